"""Reverse-process samplers over any joint noise predictor.

Five tasks are supported through one predictor by timestep placement:
marginals feed fresh Gaussian filler at level T for the ignored
modality, conditionals feed the clean condition at level 0, joint ties
the two timesteps.  Guidance combines the task model with the matching
unconditional rows: ``(1 + s) * conditional - s * unconditional``, all
evaluated on the same network.

Samplers: the stochastic ancestral chain (with sub-schedule striding
when fewer steps than T are requested) and a deterministic order-1
solver usable in both time directions for encoding and decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule
from .seeding import DOMAIN_SAMPLE, stream_rng

TASKS = ("joint", "x", "y", "x-given-y", "y-given-x")
SIGMA_MODES = ("sqrt_beta", "posterior")


@dataclass
class SampleRequest:
    task: str
    n: int = 1
    condition: np.ndarray | None = None
    guidance_scale: float = 0.0
    sampler: str = "ancestral"
    steps: int | None = None  # None: all T steps
    seed: int = 0
    sigma_mode: str = "sqrt_beta"
    freeze_filler: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        conditional = self.task in ("x-given-y", "y-given-x")
        if conditional and self.condition is None:
            raise ValueError(f"task {self.task!r} requires a condition")
        if not conditional and self.condition is not None:
            raise ValueError(f"task {self.task!r} takes no condition")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance scale must be >= 0")
        if self.sampler not in ("ancestral", "deterministic"):
            raise ValueError("sampler must be 'ancestral' or 'deterministic'")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.condition is not None:
            object.__setattr__(self, "condition", np.asarray(self.condition, dtype=np.float64))


def _chunked_predict(model, x, y, tx, ty, chunk: int = 4096):
    n = x.shape[0]
    if n <= chunk:
        return model.predict(x, y, tx, ty)
    ex = np.empty_like(x)
    ey = np.empty_like(y)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        ex[lo:hi], ey[lo:hi] = model.predict(x[lo:hi], y[lo:hi], tx, ty)
    return ex, ey


def guided_eps(
    model,
    task: str,
    state,
    condition,
    t: int,
    s: float,
    rng: np.random.Generator | None = None,
    filler: tuple | None = None,
):
    """Noise prediction for one reverse step of the given task.

    `state` is (x_t, y_t) for the joint task and the single perturbed
    modality otherwise.  Fillers for marginalized slots are drawn fresh
    from `rng` unless explicitly provided.  Returns (eps_x, eps_y) for
    joint, a single array otherwise.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if s < 0.0:
        raise ValueError("guidance scale must be >= 0")
    T = model.T if hasattr(model, "T") else model.sched.T
    d_x, d_y = model.d_x, model.d_y

    def draw(shape, i):
        if filler is not None:
            return filler[i]
        return rng.standard_normal(shape)

    if task == "joint":
        x_t, y_t = state
        ex_j, ey_j = _chunked_predict(model, x_t, y_t, t, t)
        if s == 0.0:
            return ex_j, ey_j
        n = x_t.shape[0]
        ex_u, _ = _chunked_predict(model, x_t, draw((n, d_y), 0), t, T)
        _, ey_u = _chunked_predict(model, draw((n, d_x), 1), y_t, T, t)
        return (1.0 + s) * ex_j - s * ex_u, (1.0 + s) * ey_j - s * ey_u

    if task in ("x", "x-given-y"):
        x_t = state
        n = x_t.shape[0]
        if task == "x":
            ex_u, _ = _chunked_predict(model, x_t, draw((n, d_y), 0), t, T)
            return ex_u
        cond = np.broadcast_to(condition, (n, d_y))
        ex_c, _ = _chunked_predict(model, x_t, cond, t, 0)
        if s == 0.0:
            return ex_c
        ex_u, _ = _chunked_predict(model, x_t, draw((n, d_y), 0), t, T)
        return (1.0 + s) * ex_c - s * ex_u

    y_t = state
    n = y_t.shape[0]
    if task == "y":
        _, ey_u = _chunked_predict(model, draw((n, d_x), 0), y_t, T, t)
        return ey_u
    cond = np.broadcast_to(condition, (n, d_x))
    _, ey_c = _chunked_predict(model, cond, y_t, 0, t)
    if s == 0.0:
        return ey_c
    _, ey_u = _chunked_predict(model, draw((n, d_x), 0), y_t, T, t)
    return (1.0 + s) * ey_c - s * ey_u


def ancestral_step(
    v: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    z: np.ndarray | None,
    sigma_mode: str = "sqrt_beta",
) -> np.ndarray:
    """One stochastic reverse step t -> t-1; z is forcibly zero at t=1."""
    if t < 1:
        raise ValueError("ancestral_step requires t >= 1")
    if v.shape != eps_hat.shape:
        raise ValueError("eps_hat shape does not match state shape")
    alpha = sched.alpha(t)
    beta = sched.beta(t)
    mean = (v - beta / np.sqrt(1.0 - sched.alpha_bar(t)) * eps_hat) / np.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    if sigma_mode == "sqrt_beta":
        sigma = np.sqrt(beta)
    else:
        sigma = np.sqrt(sched.posterior_variance(t))
    return mean + sigma * z


def deterministic_step(
    v: np.ndarray, eps_hat: np.ndarray, t_from: int, t_to: int, sched: NoiseSchedule
) -> np.ndarray:
    """Order-1 deterministic update between arbitrary levels.

    Predicts the clean point from eps_hat, then re-noises it to t_to
    with the same eps_hat; valid for t_to < t_from (decoding) and
    t_to > t_from (noise injection / encoding).
    """
    if t_from == t_to:
        raise ValueError("t_from and t_to must differ")
    a_from = np.sqrt(sched.alpha_bar(t_from))
    b_from = np.sqrt(1.0 - sched.alpha_bar(t_from))
    a_to = np.sqrt(sched.alpha_bar(t_to))
    b_to = np.sqrt(1.0 - sched.alpha_bar(t_to))
    x0_hat = (v - b_from * eps_hat) / a_from
    return a_to * x0_hat + b_to * eps_hat


def time_grid(T: int, steps: int) -> np.ndarray:
    """Strictly increasing integer times 0 = tau_0 < ... < tau_steps = T."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in 1..{T}")
    grid = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return grid


def _sub_chain(sched: NoiseSchedule, grid: np.ndarray):
    """Per-stride (alpha', beta', posterior sigma^2) for ancestral striding."""
    abar = sched.alpha_bars[grid]
    alpha_sub = abar[1:] / abar[:-1]
    beta_sub = 1.0 - alpha_sub
    post_var = (1.0 - abar[:-1]) / (1.0 - abar[1:]) * beta_sub
    return alpha_sub, beta_sub, post_var


def ode_integrate(eps_fn, v: np.ndarray, sched: NoiseSchedule, t_start: int, t_end: int, steps: int):
    """Deterministic integration from t_start to t_end in `steps` strides.

    eps_fn(state, t) supplies the noise prediction at the current node;
    works in both time directions.
    """
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")
    lo, hi = min(t_start, t_end), max(t_start, t_end)
    span = hi - lo
    if steps > span:
        raise ValueError(f"steps {steps} exceeds time span {span}")
    nodes = lo + np.unique(np.round(np.linspace(0, span, steps + 1)).astype(int))
    if t_start > t_end:
        nodes = nodes[::-1]
    for t_from, t_to in zip(nodes[:-1], nodes[1:]):
        v = deterministic_step(v, eps_fn(v, int(t_from)), int(t_from), int(t_to), sched)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite state at t={t_to}")
    return v


def generate(model, sched: NoiseSchedule, request: SampleRequest):
    """Run the full reverse loop for the requested task.

    Returns (x, y) arrays for the joint task, a single array otherwise.
    Deterministic given request.seed.
    """
    rng = stream_rng(request.seed, DOMAIN_SAMPLE, 0)
    n = request.n
    d_x, d_y = model.d_x, model.d_y
    T = sched.T
    steps = request.steps if request.steps is not None else T
    grid = time_grid(T, steps)
    filler = None
    if request.freeze_filler:
        filler = (rng.standard_normal((n, d_y)), rng.standard_normal((n, d_x)))

    joint = request.task == "joint"
    if joint:
        state = (rng.standard_normal((n, d_x)), rng.standard_normal((n, d_y)))
    elif request.task in ("x", "x-given-y"):
        state = rng.standard_normal((n, d_x))
    else:
        state = rng.standard_normal((n, d_y))

    if request.sampler == "deterministic":
        if joint:
            def eps_joint(v, t):
                return guided_eps(
                    model, "joint", v, None, t, request.guidance_scale, rng, filler
                )

            x, y = state
            for t_from, t_to in zip(grid[::-1][:-1], grid[::-1][1:]):
                ex, ey = eps_joint((x, y), int(t_from))
                x = deterministic_step(x, ex, int(t_from), int(t_to), sched)
                y = deterministic_step(y, ey, int(t_from), int(t_to), sched)
            _check_finite(x, y)
            return x, y

        def eps_fn(v, t):
            return guided_eps(
                model, request.task, v, request.condition, t, request.guidance_scale, rng, filler
            )

        return ode_integrate(eps_fn, state, sched, T, 0, steps)

    # ancestral: walk the (possibly strided) sub-chain
    alpha_sub, beta_sub, post_var = _sub_chain(sched, grid)
    n_sub = len(grid) - 1
    for i in range(n_sub, 0, -1):
        t_model = int(grid[i])
        abar = sched.alpha_bar(t_model)
        coef = beta_sub[i - 1] / np.sqrt(1.0 - abar)
        inv_sqrt_alpha = 1.0 / np.sqrt(alpha_sub[i - 1])
        if request.sigma_mode == "sqrt_beta":
            sigma = np.sqrt(beta_sub[i - 1])
        else:
            sigma = np.sqrt(post_var[i - 1])
        last = i == 1

        def update(v, eps_hat, z):
            out = inv_sqrt_alpha * (v - coef * eps_hat)
            if not last:
                out = out + sigma * z
            return out

        if joint:
            x, y = state
            ex, ey = guided_eps(
                model, "joint", (x, y), None, t_model, request.guidance_scale, rng, filler
            )
            zx = rng.standard_normal(x.shape) if not last else None
            zy = rng.standard_normal(y.shape) if not last else None
            state = (update(x, ex, zx), update(y, ey, zy))
            _check_finite(*state)
        else:
            eps = guided_eps(
                model,
                request.task,
                state,
                request.condition,
                t_model,
                request.guidance_scale,
                rng,
                filler,
            )
            z = rng.standard_normal(state.shape) if not last else None
            state = update(state, eps, z)
            _check_finite(state)
    return state


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite sampler state; aborting trajectory")
