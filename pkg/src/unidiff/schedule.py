"""Discrete forward diffusion chain shared by both modalities.

The chain is parameterised by per-step noise fractions beta_1..beta_T.
Timestep 0 means clean data: alpha_bar[0] == 1 by convention, so the
perturbation kernel at t=0 is the identity.  A schedule is considered
"marginalizing" when alpha_bar[T] <= MARGINALIZING_ALPHA_BAR, i.e. the
terminal state carries negligible signal and behaves like pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MARGINALIZING_ALPHA_BAR = 1e-4

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# Toy preset: T=50 with betas scaled by 1000/50 so alpha_bar[T] stays
# below the marginalizing bound.
TOY_T = 50
TOY_BETA_START = 0.002
TOY_BETA_END = 0.4


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable forward-chain coefficients.

    betas/alphas have length T (betas[i] is the step i+1 coefficient);
    alpha_bars has length T+1 and is indexed directly by timestep, with
    alpha_bars[0] == 1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] != self.T or self.T < 1:
            raise ValueError(f"need exactly T={self.T} betas, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def beta(self, t) -> np.ndarray | float:
        """beta_t for t in 1..T."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"beta(t) defined for 1 <= t <= {self.T}")
        return self.betas[t - 1]

    def alpha(self, t) -> np.ndarray | float:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"alpha(t) defined for 1 <= t <= {self.T}")
        return self.alphas[t - 1]

    def alpha_bar(self, t) -> np.ndarray | float:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"alpha_bar(t) defined for 0 <= t <= {self.T}")
        return self.alpha_bars[t]

    @property
    def is_marginalizing(self) -> bool:
        return bool(self.alpha_bars[self.T] <= MARGINALIZING_ALPHA_BAR)

    def posterior_variance(self, t) -> np.ndarray | float:
        """beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t."""
        t = np.asarray(t)
        num = 1.0 - self.alpha_bars[t - 1]
        den = 1.0 - self.alpha_bars[t]
        return num / den * self.beta(t)


def build_schedule_from_betas(betas, *, require_marginalizing: bool = False) -> NoiseSchedule:
    """Override hook: construct a schedule from an explicit beta vector."""
    betas = np.asarray(betas, dtype=np.float64)
    sched = NoiseSchedule(T=int(betas.shape[0]), betas=betas)
    if require_marginalizing and not sched.is_marginalizing:
        raise ValueError(
            f"alpha_bar[T]={sched.alpha_bars[-1]:.3e} exceeds the marginalizing "
            f"bound {MARGINALIZING_ALPHA_BAR:g}"
        )
    return sched


def build_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    *,
    require_marginalizing: bool = False,
) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T)
    return build_schedule_from_betas(betas, require_marginalizing=require_marginalizing)


def toy_schedule() -> NoiseSchedule:
    """Small schedule for fast tests; still marginalizing at t=T."""
    return build_linear_schedule(TOY_T, TOY_BETA_START, TOY_BETA_END, require_marginalizing=True)


def default_schedule() -> NoiseSchedule:
    return build_linear_schedule(require_marginalizing=True)


def perturb(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise clean data to level t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    t may be a scalar or a per-row integer array matching x0's leading axis.
    t=0 returns x0 exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data shape {x0.shape}")
    abar = sched.alpha_bar(t)
    if np.ndim(abar) > 0:
        abar = np.reshape(abar, (-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable linear-schedule parameters, as stored in manifests."""

    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def build(self, *, require_marginalizing: bool = False) -> NoiseSchedule:
        return build_linear_schedule(
            self.T, self.beta_start, self.beta_end, require_marginalizing=require_marginalizing
        )

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(T=int(d["T"]), beta_start=float(d["beta_start"]), beta_end=float(d["beta_end"]))

    @classmethod
    def toy(cls) -> "ScheduleSpec":
        return cls(T=TOY_T, beta_start=TOY_BETA_START, beta_end=TOY_BETA_END)
