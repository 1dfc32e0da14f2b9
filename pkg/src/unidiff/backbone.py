"""Joint noise-prediction transformer over two modalities.

The token sequence is [time-token(tx), time-token(ty), x-chunks,
y-chunks]: both noise levels enter as tokens, so a single network covers
every (tx, ty) combination.  Blocks use post-layer-norm ordering
(attention -> add -> LN -> MLP -> add -> LN); the second half of the
stack merges long skips from the first half with a linear projection
followed by a layer norm.  The output head is zero-initialized so the
untrained network is a neutral denoiser (predicts zero noise).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    d_x: int
    d_y: int
    token_dim: int = 64
    n_heads: int = 4
    depth: int = 5
    chunk_size: int = 1
    time_embed: int = 16  # sinusoidal frequency count
    mlp_hidden: int = 0  # 0 means 2 * token_dim

    def __post_init__(self):
        if self.depth < 1 or self.depth % 2 == 0:
            raise ValueError(f"depth must be odd and positive, got {self.depth}")
        if self.token_dim % self.n_heads != 0:
            raise ValueError(
                f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.d_x % self.chunk_size or self.d_y % self.chunk_size:
            raise ValueError("d_x and d_y must be divisible by chunk_size")
        if self.time_embed < 1:
            raise ValueError("time_embed must be >= 1")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 2 * self.token_dim)

    @property
    def n_x_tokens(self) -> int:
        return self.d_x // self.chunk_size

    @property
    def n_y_tokens(self) -> int:
        return self.d_y // self.chunk_size

    @property
    def seq_len(self) -> int:
        return 2 + self.n_x_tokens + self.n_y_tokens

    @property
    def n_skips(self) -> int:
        return (self.depth - 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until all draws lie within 2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(
    config: BackboneConfig, seed: int, dtype=np.float32, zero_head: bool = True
) -> dict[str, np.ndarray]:
    """Named parameter arrays; unique names, deterministic given seed.

    zero_head=False randomizes the output head as well (used by the
    gradient checker, where a zero head would block gradient flow).
    """
    rng = np.random.default_rng(seed)
    D, M, C = config.token_dim, config.mlp_hidden, config.chunk_size
    p: dict[str, np.ndarray] = {}

    def w(name, shape):
        p[name] = _trunc_normal(rng, shape).astype(dtype)

    def zeros(name, shape):
        p[name] = np.zeros(shape, dtype=dtype)

    w("embed_x_w", (C, D))
    zeros("embed_x_b", (D,))
    w("embed_y_w", (C, D))
    zeros("embed_y_b", (D,))
    w("time_w", (2 * config.time_embed, D))
    zeros("time_b", (D,))
    w("pos", (config.seq_len, D))
    for i in range(config.depth):
        for proj in ("q", "k", "v"):
            w(f"block{i}_{proj}_w", (D, D))
            zeros(f"block{i}_{proj}_b", (D,))
        w(f"block{i}_proj_w", (D, D))
        zeros(f"block{i}_proj_b", (D,))
        w(f"block{i}_mlp1_w", (D, M))
        zeros(f"block{i}_mlp1_b", (M,))
        w(f"block{i}_mlp2_w", (M, D))
        zeros(f"block{i}_mlp2_b", (D,))
    for i in range(config.n_skips + 1, config.depth):
        w(f"skip{i}_w", (2 * D, D))
        zeros(f"skip{i}_b", (D,))
    if zero_head:
        zeros("head_x_w", (D, C))
        zeros("head_x_b", (C,))
        zeros("head_y_w", (D, C))
        zeros("head_y_b", (C,))
    else:
        w("head_x_w", (D, C))
        w("head_x_b", (C,))
        w("head_y_w", (D, C))
        w("head_y_b", (C,))
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def time_feature_table(T: int, n_freq: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of t/T for t = 0..T; shape (T+1, 2*n_freq).

    Frequencies are log-spaced starting at 1, so the first feature pair
    is injective in t on its own.
    """
    tau = np.arange(T + 1, dtype=np.float64)[:, None] / T
    if n_freq == 1:
        omega = np.array([1.0])
    else:
        omega = 10000.0 ** (np.arange(n_freq) / (n_freq - 1))
    ang = tau * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class JointDenoiser:
    """eps_theta(x_tx, y_ty, tx, ty) -> (eps_x, eps_y), with gradients.

    Forward/backward call counts are instrumented so tests can assert
    the one-evaluation-per-update contract.
    """

    def __init__(
        self,
        config: BackboneConfig,
        T: int,
        params: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.config = config
        self.T = T
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(config, seed, dtype)
        self._time_table = time_feature_table(T, config.time_embed, self.dtype)
        self.n_forward = 0
        self.n_backward = 0

    # -- graph construction -------------------------------------------------

    def _wrap_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def _check(self, x: np.ndarray, y: np.ndarray, tx, ty):
        if x.ndim != 2 or x.shape[1] != self.config.d_x:
            raise ValueError(f"x has shape {x.shape}, expected (n, {self.config.d_x})")
        if y.ndim != 2 or y.shape[1] != self.config.d_y:
            raise ValueError(f"y has shape {y.shape}, expected (n, {self.config.d_y})")
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y batch sizes differ")
        for t in (tx, ty):
            if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > self.T):
                raise ValueError(f"timestep out of range 0..{self.T}")

    def _block(self, h: Tensor, p: dict[str, Tensor], i: int, n: int, trace) -> Tensor:
        cfg = self.config
        D, H = cfg.token_dim, cfg.n_heads
        dh = D // H
        S = cfg.seq_len

        def heads(name):
            proj = ad.linear(h, p[f"block{i}_{name}_w"], p[f"block{i}_{name}_b"])
            return ad.transpose(ad.reshape(proj, (n, S, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, np.float64(1.0 / np.sqrt(dh)).astype(self.dtype))
        attn = ad.matmul(ad.softmax(scores), v)  # (n, H, S, dh)
        attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (n, S, D))
        attn = ad.linear(attn, p[f"block{i}_proj_w"], p[f"block{i}_proj_b"])
        h = ad.layer_norm(ad.add(h, attn))
        if trace is not None:
            trace["post_ln"].append(h.data)
        m = ad.gelu(ad.linear(h, p[f"block{i}_mlp1_w"], p[f"block{i}_mlp1_b"]))
        m = ad.linear(m, p[f"block{i}_mlp2_w"], p[f"block{i}_mlp2_b"])
        h = ad.layer_norm(ad.add(h, m))
        if trace is not None:
            trace["post_ln"].append(h.data)
        return h

    def forward_tensors(
        self, x, y, tx, ty, params_t: dict[str, Tensor] | None = None, trace: dict | None = None
    ) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
        """Build the graph; returns (eps_x, eps_y, wrapped params)."""
        cfg = self.config
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype))
        y = np.ascontiguousarray(np.asarray(y, dtype=self.dtype))
        if x.ndim == 1:
            x = x[None]
        if y.ndim == 1:
            y = y[None]
        self._check(x, y, tx, ty)
        n = x.shape[0]
        p = params_t if params_t is not None else self._wrap_params()
        self.n_forward += 1

        tx_feat = self._time_table[np.broadcast_to(np.asarray(tx), (n,))]
        ty_feat = self._time_table[np.broadcast_to(np.asarray(ty), (n,))]
        tok_tx = ad.reshape(ad.linear(Tensor(tx_feat), p["time_w"], p["time_b"]), (n, 1, cfg.token_dim))
        tok_ty = ad.reshape(ad.linear(Tensor(ty_feat), p["time_w"], p["time_b"]), (n, 1, cfg.token_dim))
        xt = ad.linear(
            Tensor(x.reshape(n, cfg.n_x_tokens, cfg.chunk_size)), p["embed_x_w"], p["embed_x_b"]
        )
        yt = ad.linear(
            Tensor(y.reshape(n, cfg.n_y_tokens, cfg.chunk_size)), p["embed_y_w"], p["embed_y_b"]
        )
        h = ad.add(ad.concat([tok_tx, tok_ty, xt, yt], axis=1), p["pos"])

        saved: list[Tensor] = []
        for i in range(cfg.depth):
            if i > cfg.n_skips:
                skip = saved[cfg.depth - 1 - i]
                h = ad.concat([h, skip], axis=2)
                h = ad.layer_norm(ad.linear(h, p[f"skip{i}_w"], p[f"skip{i}_b"]))
                if trace is not None:
                    trace["post_ln"].append(h.data)
            h = self._block(h, p, i, n, trace)
            if i < cfg.n_skips:
                saved.append(h)

        ox = ad.narrow(h, 1, 2, cfg.n_x_tokens)
        oy = ad.narrow(h, 1, 2 + cfg.n_x_tokens, cfg.n_y_tokens)
        eps_x = ad.reshape(ad.linear(ox, p["head_x_w"], p["head_x_b"]), (n, cfg.d_x))
        eps_y = ad.reshape(ad.linear(oy, p["head_y_w"], p["head_y_b"]), (n, cfg.d_y))
        if not (np.all(np.isfinite(eps_x.data)) and np.all(np.isfinite(eps_y.data))):
            raise FloatingPointError("non-finite activations in forward pass")
        return eps_x, eps_y, p

    # -- public surface ------------------------------------------------------

    def predict(self, x, y, tx, ty) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode joint noise prediction (no graph)."""
        single = np.asarray(x).ndim == 1
        with ad.no_grad():
            eps_x, eps_y, _ = self.forward_tensors(x, y, tx, ty)
        if single:
            return eps_x.data[0], eps_y.data[0]
        return eps_x.data, eps_y.data

    def vjp(self, x, y, tx, ty, g_x, g_y) -> dict[str, np.ndarray]:
        """Parameter gradients of <g_x, eps_x> + <g_y, eps_y>."""
        eps_x, eps_y, p = self.forward_tensors(x, y, tx, ty)
        g_x = np.asarray(g_x, dtype=self.dtype).reshape(eps_x.data.shape)
        g_y = np.asarray(g_y, dtype=self.dtype).reshape(eps_y.data.shape)
        root = ad.add(ad.sum_(ad.mul(eps_x, g_x)), ad.sum_(ad.mul(eps_y, g_y)))
        ad.backward(root)
        self.n_backward += 1
        return {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in p.items()}


def gradient_check(
    config: BackboneConfig,
    T: int = 50,
    seed: int = 0,
    batch: int = 2,
    coords_per_array: int = 4,
    h: float = 1e-5,
) -> tuple[float, dict[str, float]]:
    """Analytic vs central-finite-difference gradients in double precision.

    Checks a random linear functional of the network output at randomly
    sampled parameter coordinates of every array.  Relative error is
    floored at 1e-3 of the gradient inf-norm so that coordinates with
    vanishing gradients report finite-difference roundoff, not noise
    blowup.  Returns (max relative error, per-array maxima).
    """
    rng = np.random.default_rng(seed)
    net = JointDenoiser(
        config, T, params=init_params(config, seed, np.float64, zero_head=False), dtype=np.float64
    )
    x = rng.standard_normal((batch, config.d_x))
    y = rng.standard_normal((batch, config.d_y))
    tx = rng.integers(0, T + 1, size=batch)
    ty = rng.integers(0, T + 1, size=batch)
    g_x = rng.standard_normal((batch, config.d_x))
    g_y = rng.standard_normal((batch, config.d_y))
    grads = net.vjp(x, y, tx, ty, g_x, g_y)
    g_inf = max(np.abs(g).max() for g in grads.values())

    def functional():
        with ad.no_grad():
            eps_x, eps_y, _ = net.forward_tensors(x, y, tx, ty)
        return float((eps_x.data * g_x).sum() + (eps_y.data * g_y).sum())

    per_array: dict[str, float] = {}
    for name, arr in net.params.items():
        k = min(coords_per_array, arr.size)
        coords = rng.choice(arr.size, size=k, replace=False)
        num = ad.numerical_grad(functional, arr, coords, h=h)
        ana = grads[name].reshape(-1)[coords]
        denom = np.maximum.reduce([np.abs(num), np.abs(ana), np.full(k, 1e-3 * g_inf)])
        per_array[name] = float((np.abs(num - ana) / denom).max())
    return max(per_array.values()), per_array
