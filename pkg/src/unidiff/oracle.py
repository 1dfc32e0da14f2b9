"""Exact conditional expectations of the injected noise.

For an analytic joint over (x0, y0) and the shared forward kernel, the
perturbed pair z = (x_tx, y_ty) is jointly Gaussian (per mixture
component) with the noises (eps_x, eps_y).  The optimal noise predictor
E[eps_x, eps_y | x_tx, y_ty] is therefore a responsibility-weighted
linear map of z, computable in closed form.  This is the ground truth
the trained network is regressing toward, and the reference model every
sampler is exercised against.

A slow self-normalized importance-sampling estimator of the same
quantity is kept as an independent cross-check path.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .data import DistributionSpec
from .schedule import NoiseSchedule


class _Factors:
    """Per-(tx, ty) Gaussian conditioning factors, one set per component."""

    __slots__ = ("mu_z", "prec", "log_norm", "bvec")

    def __init__(self, spec: DistributionSpec, sched: NoiseSchedule, tx: int, ty: int):
        a_x = np.sqrt(sched.alpha_bar(tx))
        a_y = np.sqrt(sched.alpha_bar(ty))
        b_x = np.sqrt(1.0 - sched.alpha_bar(tx))
        b_y = np.sqrt(1.0 - sched.alpha_bar(ty))
        d_x, d_y = spec.d_x, spec.d_y
        scale = np.concatenate([np.full(d_x, a_x), np.full(d_y, a_y)])
        self.bvec = np.concatenate([np.full(d_x, b_x), np.full(d_y, b_y)])
        K, D = spec.n_components, spec.dim
        self.mu_z = spec.means * scale
        self.prec = np.empty((K, D, D))
        self.log_norm = np.empty(K)
        noise_cov = np.diag(self.bvec**2)
        for k in range(K):
            sigma_z = scale[:, None] * spec.covs[k] * scale[None, :] + noise_cov
            try:
                chol = np.linalg.cholesky(sigma_z)
            except np.linalg.LinAlgError:
                raise ValueError(
                    f"conditioning covariance singular at (tx={tx}, ty={ty}); ill-posed spec"
                ) from None
            inv_chol = np.linalg.inv(chol)
            self.prec[k] = inv_chol.T @ inv_chol
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            self.log_norm[k] = (
                np.log(spec.weights[k]) - 0.5 * logdet - 0.5 * D * np.log(2.0 * np.pi)
            )


class OracleModel:
    """Analytic joint noise predictor for a known data distribution.

    Immutable after construction; all methods are pure.  Inputs may be
    single vectors or (n, d) batches; timesteps may be scalars or
    per-row integer arrays.
    """

    def __init__(self, spec: DistributionSpec, sched: NoiseSchedule):
        self.spec = spec
        self.sched = sched
        self._cache: dict[tuple[int, int], _Factors] = {}
        marg_w_x, marg_mu_x, marg_cov_x = spec.marginal_blocks("x")
        marg_w_y, marg_mu_y, marg_cov_y = spec.marginal_blocks("y")
        self._marginals = {
            "x": (marg_w_x, marg_mu_x, marg_cov_x),
            "y": (marg_w_y, marg_mu_y, marg_cov_y),
        }

    # -- core posterior algebra -------------------------------------------

    def _factors(self, tx: int, ty: int) -> _Factors:
        key = (int(tx), int(ty))
        if key not in self._cache:
            self._cache[key] = _Factors(self.spec, self.sched, *key)
        return self._cache[key]

    def _check_inputs(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if x.shape[1] != self.spec.d_x or y.shape[1] != self.spec.d_y:
            raise ValueError(
                f"latent dims ({x.shape[1]}, {y.shape[1]}) do not match spec "
                f"({self.spec.d_x}, {self.spec.d_y})"
            )
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y batch sizes differ")
        return x, y

    def _score_vec(self, z: np.ndarray, fac: _Factors) -> np.ndarray:
        """Gradient of log q(z) at the given noise levels; (n, D)."""
        diff = z[:, None, :] - fac.mu_z[None, :, :]  # (n, K, D)
        sol = np.einsum("kij,nkj->nki", fac.prec, diff)
        log_p = fac.log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", diff, sol)
        log_p -= log_p.max(axis=1, keepdims=True)
        resp = np.exp(log_p)
        resp /= resp.sum(axis=1, keepdims=True)
        return -np.einsum("nk,nki->ni", resp, sol)

    def _grouped(self, x, y, tx, ty, fn):
        """Evaluate fn(z, factors) with per-row timesteps by grouping."""
        x, y = self._check_inputs(x, y)
        n = x.shape[0]
        tx = np.broadcast_to(np.asarray(tx, dtype=np.int64), (n,))
        ty = np.broadcast_to(np.asarray(ty, dtype=np.int64), (n,))
        z = np.concatenate([x, y], axis=1)
        pairs = tx * (self.sched.T + 1) + ty
        out = None
        for pair in np.unique(pairs):
            idx = np.nonzero(pairs == pair)[0]
            fac = self._factors(pair // (self.sched.T + 1), pair % (self.sched.T + 1))
            res = fn(z[idx], fac)
            if out is None:
                out = np.empty((n,) + res.shape[1:], dtype=res.dtype)
            out[idx] = res
        return out

    # -- public surface ----------------------------------------------------

    def predict(self, x, y, tx, ty) -> tuple[np.ndarray, np.ndarray]:
        """E[eps_x | x_tx, y_ty], E[eps_y | x_tx, y_ty].

        At t=0 the corresponding block is exactly zero: clean data is
        independent of its never-applied noise.
        """
        single = np.asarray(x).ndim == 1
        eps = self._grouped(x, y, tx, ty, lambda z, f: -f.bvec * self._score_vec(z, f))
        eps_x, eps_y = eps[:, : self.spec.d_x], eps[:, self.spec.d_x :]
        if single:
            return eps_x[0], eps_y[0]
        return eps_x, eps_y

    def score(self, x, y, tx, ty) -> tuple[np.ndarray, np.ndarray]:
        """(grad_x log q, grad_y log q) of the perturbed joint."""
        single = np.asarray(x).ndim == 1
        s = self._grouped(x, y, tx, ty, self._score_vec)
        s_x, s_y = s[:, : self.spec.d_x], s[:, self.spec.d_x :]
        if single:
            return s_x[0], s_y[0]
        return s_x, s_y

    def log_density(self, x, y, tx, ty) -> np.ndarray:
        """log q(x_tx, y_ty) of the perturbed joint; (n,) or scalar."""

        def fn(z, fac):
            diff = z[:, None, :] - fac.mu_z[None, :, :]
            sol = np.einsum("kij,nkj->nki", fac.prec, diff)
            log_p = fac.log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", diff, sol)
            return logsumexp(log_p, axis=1)

        single = np.asarray(x).ndim == 1
        out = self._grouped(x, y, tx, ty, fn)
        return out[0] if single else out

    def marginal_predict(self, modality: str, v, t) -> np.ndarray:
        """Pure single-modality predictor E[eps | v_t] from the marginal."""
        w, mus, covs = self._marginals[modality]
        single = np.asarray(v).ndim == 1
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        a = np.sqrt(self.sched.alpha_bar(t))
        b = np.sqrt(1.0 - self.sched.alpha_bar(t))
        K, d = mus.shape
        prec = np.empty((K, d, d))
        log_norm = np.empty(K)
        for k in range(K):
            sig = a * a * covs[k] + b * b * np.eye(d)
            chol = np.linalg.cholesky(sig)
            inv_chol = np.linalg.inv(chol)
            prec[k] = inv_chol.T @ inv_chol
            log_norm[k] = np.log(w[k]) - np.log(np.diag(chol)).sum()
        diff = v[:, None, :] - a * mus[None, :, :]
        sol = np.einsum("kij,nkj->nki", prec, diff)
        log_p = log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", diff, sol)
        log_p -= log_p.max(axis=1, keepdims=True)
        resp = np.exp(log_p)
        resp /= resp.sum(axis=1, keepdims=True)
        eps = b * np.einsum("nk,nki->ni", resp, sol)
        return eps[0] if single else eps

    def mc_predict(
        self, x, y, tx: int, ty: int, n_draws: int = 10**6, rng: np.random.Generator | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Brute-force cross-check of predict() at a single point.

        Self-normalized importance sampling over clean draws: given
        (x0, y0) the injected noises are determined by the observed
        perturbed point, and the forward kernel supplies the weight.
        Returns (eps_x, eps_y, se_x, se_y) with per-coordinate standard
        errors.  Requires tx, ty >= 1 (the kernel is degenerate at 0).
        """
        if tx < 1 or ty < 1:
            raise ValueError("mc_predict requires tx >= 1 and ty >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        x = np.asarray(x, dtype=np.float64).reshape(self.spec.d_x)
        y = np.asarray(y, dtype=np.float64).reshape(self.spec.d_y)
        a_x = np.sqrt(self.sched.alpha_bar(tx))
        b_x = np.sqrt(1.0 - self.sched.alpha_bar(tx))
        a_y = np.sqrt(self.sched.alpha_bar(ty))
        b_y = np.sqrt(1.0 - self.sched.alpha_bar(ty))
        x0, y0 = self.spec.sample(n_draws, rng)
        eps_x = (x[None, :] - a_x * x0) / b_x
        eps_y = (y[None, :] - a_y * y0) / b_y
        log_w = -0.5 * (eps_x**2).sum(axis=1) - 0.5 * (eps_y**2).sum(axis=1)
        log_w -= log_w.max()
        w = np.exp(log_w)
        w /= w.sum()
        est_x = w @ eps_x
        est_y = w @ eps_y
        se_x = np.sqrt((w**2 @ (eps_x - est_x) ** 2))
        se_y = np.sqrt((w**2 @ (eps_y - est_y) ** 2))
        return est_x, est_y, se_x, se_y

    def expected_loss(self, tx: int, ty: int) -> float:
        """Analytic E||eps - E[eps|z]||^2 at fixed noise levels (K=1 only)."""
        if self.spec.n_components != 1:
            raise ValueError("closed-form expected loss requires a single Gaussian component")
        fac = self._factors(tx, ty)
        return float(self.spec.dim - fac.bvec**2 @ np.diag(fac.prec[0]))
