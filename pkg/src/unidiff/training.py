"""Training loop for the joint objective with independent timesteps.

Each update draws a clean batch, perturbs both modalities at
independently sampled noise levels, and regresses the concatenated
noise prediction onto the injected noises -- one network forward and
one backward per update, no matter how many distributions are being
fit.  The optimizer is decoupled-weight-decay Adam with linear warm-up.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, JointDenoiser
from .checkpoint import save_checkpoint
from .data import Dataset, DistributionSpec
from .oracle import OracleModel
from .schedule import NoiseSchedule, ScheduleSpec, perturb
from .seeding import DOMAIN_HELDOUT, DOMAIN_TRAIN, stream_rng

SUPPORTS = ("0..T", "1..T")


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 256
    learning_rate: float = 2e-4
    weight_decay: float = 0.03
    adam_betas: tuple[float, float] = (0.9, 0.9)
    seed: int = 0
    timestep_support: str = "0..T"
    eval_every: int = 1000
    warmup_frac: float = 0.01
    lr_min_frac: float = 0.0  # cosine-decay floor as a fraction of learning_rate
    heldout_size: int = 20000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate < 0.0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("adam_betas must lie in [0, 1)")
        if self.timestep_support not in SUPPORTS:
            raise ValueError(f"timestep_support must be one of {SUPPORTS}")
        if not (0.0 <= self.lr_min_frac <= 1.0):
            raise ValueError("lr_min_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig, eps: float = 1e-8):
        self.params = params
        self.lr = config.learning_rate
        self.b1, self.b2 = config.adam_betas
        self.wd = config.weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        lr = self.lr * lr_scale
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * p)


def draw_timesteps(
    rng: np.random.Generator, T: int, support: str, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Independent uniform timestep pairs over the configured support."""
    lo = 0 if support == "0..T" else 1
    return rng.integers(lo, T + 1, size=n), rng.integers(lo, T + 1, size=n)


@dataclass
class HeldoutSet:
    """Frozen clean pairs, timesteps, noises, and perturbed states for
    paired loss evaluation."""

    x0: np.ndarray
    y0: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    eps_x: np.ndarray
    eps_y: np.ndarray
    x_t: np.ndarray
    y_t: np.ndarray


def make_heldout(
    spec: DistributionSpec, sched: NoiseSchedule, size: int, seed: int, support: str
) -> HeldoutSet:
    rng = stream_rng(seed, DOMAIN_HELDOUT, 0)
    x0, y0 = spec.sample(size, rng)
    tx, ty = draw_timesteps(rng, sched.T, support, size)
    eps_x = rng.standard_normal(x0.shape)
    eps_y = rng.standard_normal(y0.shape)
    x_t = perturb(x0, tx, eps_x, sched)
    y_t = perturb(y0, ty, eps_y, sched)
    return HeldoutSet(x0, y0, tx, ty, eps_x, eps_y, x_t, y_t)


def eval_loss(predictor, held: HeldoutSet, chunk: int = 4096) -> float:
    """Mean ||prediction - injected noise||^2 over the frozen held-out set.

    Works for any predictor with .predict (network, oracle, or stub);
    pairing the same perturbations across predictors cancels most Monte
    Carlo noise in loss comparisons.
    """
    n = held.x0.shape[0]
    total = 0.0
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        px, py = predictor.predict(
            held.x_t[lo:hi], held.y_t[lo:hi], held.tx[lo:hi], held.ty[lo:hi]
        )
        total += float(((px - held.eps_x[lo:hi]) ** 2).sum())
        total += float(((py - held.eps_y[lo:hi]) ** 2).sum())
    return total / n


def loss_on_batch(
    net: JointDenoiser,
    sched: NoiseSchedule,
    x0: np.ndarray,
    y0: np.ndarray,
    rng: np.random.Generator,
    support: str = "0..T",
) -> tuple[float, dict[str, np.ndarray]]:
    """One forward-backward on a clean batch; returns (loss, grads)."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    n = x0.shape[0]
    tx, ty = draw_timesteps(rng, sched.T, support, n)
    eps_x = rng.standard_normal(x0.shape)
    eps_y = rng.standard_normal(y0.shape)
    x_t = perturb(x0, tx, eps_x, sched)
    y_t = perturb(y0, ty, eps_y, sched)
    px, py, params_t = net.forward_tensors(x_t, y_t, tx, ty)
    dx = ad.add(px, -eps_x.astype(net.dtype))
    dy = ad.add(py, -eps_y.astype(net.dtype))
    loss_t = ad.mul(ad.add(ad.sum_(ad.square(dx)), ad.sum_(ad.square(dy))), 1.0 / n)
    loss = float(loss_t.data)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    ad.backward(loss_t)
    net.n_backward += 1
    return loss, {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in params_t.items()}


@dataclass
class TrainResult:
    net: JointDenoiser
    sched: NoiseSchedule
    curve: list[dict]
    heldout_loss: float
    oracle_heldout_loss: float | None
    diverged: bool = False


def _lr_scale(step: int, cfg: TrainConfig) -> float:
    warmup = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warmup:
        return (step + 1) / warmup
    if cfg.lr_min_frac >= 1.0:
        return 1.0
    frac = (step - warmup) / max(1, cfg.steps - warmup)
    return cfg.lr_min_frac + (1.0 - cfg.lr_min_frac) * 0.5 * (1.0 + np.cos(np.pi * frac))


def train(
    cfg: TrainConfig,
    source: DistributionSpec | Dataset,
    backbone: BackboneConfig,
    sched_spec: ScheduleSpec,
    out_dir: str | None = None,
    heldout_spec: DistributionSpec | None = None,
) -> TrainResult:
    """Run the optimization loop; deterministic given cfg.seed.

    `source` is either a generative spec (fresh batches every step) or a
    fixed dataset (minibatches resampled per step).  A held-out set is
    drawn from `heldout_spec` (or `source` when it is a spec) to track
    the loss gap to the analytic oracle.
    """
    sched = sched_spec.build()
    net = JointDenoiser(backbone, sched.T, seed=cfg.seed)
    opt = AdamW(net.params, cfg)

    from_spec = isinstance(source, DistributionSpec)
    spec = source if from_spec else heldout_spec
    held = None
    oracle_loss = None
    if spec is not None:
        held = make_heldout(spec, sched, cfg.heldout_size, cfg.seed, cfg.timestep_support)
        oracle_loss = eval_loss(OracleModel(spec, sched), held)

    curve: list[dict] = []
    diverged = False
    for step in range(cfg.steps):
        rng = stream_rng(cfg.seed, DOMAIN_TRAIN, step)
        if from_spec:
            x0, y0 = source.sample(cfg.batch_size, rng)
        else:
            idx = rng.integers(0, len(source), size=cfg.batch_size)
            x0, y0 = source.x[idx], source.y[idx]
        try:
            loss, grads = loss_on_batch(net, sched, x0, y0, rng, cfg.timestep_support)
        except FloatingPointError:
            diverged = True
            break
        opt.step(grads, _lr_scale(step, cfg))
        row = {"step": step, "loss": loss, "heldout_loss": None, "oracle_gap": None}
        last = step == cfg.steps - 1
        if held is not None and (step % cfg.eval_every == cfg.eval_every - 1 or last):
            hl = eval_loss(net, held)
            row["heldout_loss"] = hl
            row["oracle_gap"] = hl - oracle_loss if oracle_loss is not None else None
            if out_dir is not None:
                save_checkpoint(out_dir, net, sched_spec, step + 1)
        curve.append(row)

    if out_dir is not None:
        if not diverged:
            save_checkpoint(out_dir, net, sched_spec, cfg.steps)
        write_curve_csv(os.path.join(out_dir, "loss_curve.csv"), curve)
    heldout_loss = eval_loss(net, held) if held is not None else float("nan")
    return TrainResult(net, sched, curve, heldout_loss, oracle_loss, diverged)


def write_curve_csv(path: str, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "oracle_gap"])
        for row in curve:
            gap = "" if row["oracle_gap"] is None else f"{row['oracle_gap']:.6f}"
            writer.writerow([row["step"], f"{row['loss']:.6f}", gap])
