"""Paired two-modality latent datasets with known ground-truth joints.

Two distribution families are supported, both with fully analytic
moments, conditionals, and log-densities:

- ``correlated-gaussian``: a single joint Gaussian over the stacked
  (x, y) vector.
- ``gaussian-mixture-pair``: a K-component mixture of joint Gaussians.

Datasets serialize to the UDS format: ``<name>`` holds raw little-endian
float32 records (x block then y block per record) and ``<name>.json``
holds the manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .seeding import DOMAIN_DATA, stream_rng

UDS_BLOCK = 65536  # records per deterministic RNG block


class ModalPair(NamedTuple):
    x0: np.ndarray
    y0: np.ndarray


def _check_covariance(cov: np.ndarray, name: str) -> None:
    cov = np.asarray(cov)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


@dataclass(frozen=True)
class DistributionSpec:
    """Joint distribution over (x0, y0) with analytic structure.

    For kind "correlated-gaussian": weights/means/covs hold a single
    component with weight 1.  For "gaussian-mixture-pair": K components
    over the stacked dimension d_x + d_y.
    """

    kind: str
    d_x: int
    d_y: int
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)

    def __post_init__(self):
        if self.kind not in ("correlated-gaussian", "gaussian-mixture-pair"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.d_x < 1 or self.d_y < 1:
            raise ValueError("d_x and d_y must be positive")
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        D = self.d_x + self.d_y
        K = w.shape[0]
        if self.kind == "correlated-gaussian" and K != 1:
            raise ValueError("correlated-gaussian requires exactly one component")
        if mu.shape != (K, D) or cov.shape != (K, D, D):
            raise ValueError(
                f"component shapes inconsistent: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if np.any(w <= 0.0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, expected 1 within 1e-12")
        for k in range(K):
            _check_covariance(cov[k], f"covs[{k}]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return self.d_x + self.d_y

    def joint_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def joint_cov(self) -> np.ndarray:
        mu = self.joint_mean()
        second = np.zeros((self.dim, self.dim))
        for k in range(self.n_components):
            dm = self.means[k] - mu
            second += self.weights[k] * (self.covs[k] + np.outer(dm, dm))
        return second

    def marginal_blocks(self, modality: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(weights, means, covs) of the marginal mixture for 'x' or 'y'."""
        sl = slice(0, self.d_x) if modality == "x" else slice(self.d_x, self.dim)
        return self.weights, self.means[:, sl], self.covs[:, sl, sl]

    def conditional_moments(self, modality: str, given: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Analytic conditional mixture of `modality` given the other block.

        Returns (weights, means, covs) of the conditional mixture at the
        conditioning point.  For K=1 this is plain Gaussian conditioning.
        """
        given = np.asarray(given, dtype=np.float64)
        if modality == "x":
            a, b = slice(0, self.d_x), slice(self.d_x, self.dim)
            d_b = self.d_y
        else:
            a, b = slice(self.d_x, self.dim), slice(0, self.d_x)
            d_b = self.d_x
        if given.shape != (d_b,):
            raise ValueError(f"conditioning point has shape {given.shape}, expected ({d_b},)")
        K = self.n_components
        w = np.empty(K)
        mu_c = np.empty((K, self.means.shape[1] - d_b))
        cov_c = np.empty((K, mu_c.shape[1], mu_c.shape[1]))
        log_w = np.empty(K)
        for k in range(K):
            Saa = self.covs[k][a, a]
            Sab = self.covs[k][a, b]
            Sbb = self.covs[k][b, b]
            gain = Sab @ np.linalg.inv(Sbb)
            resid = given - self.means[k][b]
            mu_c[k] = self.means[k][a] + gain @ resid
            cov_c[k] = Saa - gain @ Sab.T
            sign, logdet = np.linalg.slogdet(Sbb)
            log_w[k] = (
                np.log(self.weights[k])
                - 0.5 * (resid @ np.linalg.solve(Sbb, resid))
                - 0.5 * logdet
                - 0.5 * d_b * np.log(2.0 * np.pi)
            )
        log_w -= log_w.max()
        w = np.exp(log_w)
        w /= w.sum()
        return w, mu_c, cov_c

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """n joint draws, returned as (x, y) arrays of shape (n, d_x), (n, d_y)."""
        K = self.n_components
        chols = np.linalg.cholesky(self.covs)
        if K == 1:
            comp = np.zeros(n, dtype=np.intp)
        else:
            comp = rng.choice(K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = self.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)
        return out[:, : self.d_x], out[:, self.d_x :]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(
            kind=d["kind"],
            d_x=int(d["d_x"]),
            d_y=int(d["d_y"]),
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            covs=np.asarray(d["covs"], dtype=np.float64),
        )


def correlated_gaussian(mean, cov, d_x: int, d_y: int) -> DistributionSpec:
    return DistributionSpec(
        kind="correlated-gaussian",
        d_x=d_x,
        d_y=d_y,
        weights=np.array([1.0]),
        means=np.asarray(mean, dtype=np.float64)[None],
        covs=np.asarray(cov, dtype=np.float64)[None],
    )


def scalar_pair_spec(rho: float = 0.8) -> DistributionSpec:
    """1-D x, 1-D y, zero mean, unit variances, correlation rho."""
    cov = np.array([[1.0, rho], [rho, 1.0]])
    return correlated_gaussian(np.zeros(2), cov, d_x=1, d_y=1)


def benchmark_spec(rho: float = 0.8, d: int = 2) -> DistributionSpec:
    """Default benchmark: d_x=d_y=d, unit marginals, cross-modality
    correlation rho on matching coordinates."""
    eye = np.eye(d)
    cov = np.block([[eye, rho * eye], [rho * eye, eye]])
    return correlated_gaussian(np.zeros(2 * d), cov, d_x=d, d_y=d)


@dataclass
class Dataset:
    """In-memory paired dataset; x is (n, d_x), y is (n, d_y)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {self.x.shape}, {self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def pair(self, i: int) -> ModalPair:
        return ModalPair(self.x[i], self.y[i])

    def __iter__(self):
        return (self.pair(i) for i in range(len(self)))


def sample_dataset(spec: DistributionSpec, n: int, seed: int) -> Dataset:
    """n i.i.d. draws from the spec, deterministic given seed.

    Generation is blocked: record block b uses its own counter-based RNG
    stream, so any partitioning of blocks across workers reproduces the
    serial output bit-for-bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs, ys = [], []
    for block, start in enumerate(range(0, n, UDS_BLOCK)):
        m = min(UDS_BLOCK, n - start)
        bx, by = spec.sample(m, stream_rng(seed, DOMAIN_DATA, block))
        xs.append(bx)
        ys.append(by)
    return Dataset(np.concatenate(xs, axis=0), np.concatenate(ys, axis=0))


@dataclass(frozen=True)
class Standardizer:
    """Recorded per-modality affine transform; invertible."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        return Dataset((ds.x - self.x_mean) / self.x_std, (ds.y - self.y_mean) / self.y_std)

    def invert(self, ds: Dataset) -> Dataset:
        return Dataset(ds.x * self.x_std + self.x_mean, ds.y * self.y_std + self.y_mean)


def standardize(ds: Dataset) -> tuple[Dataset, Standardizer]:
    """Zero-mean unit-std per coordinate; rejects constant coordinates."""
    if len(ds) == 0:
        raise ValueError("cannot standardize an empty dataset")
    x_std = ds.x.std(axis=0)
    y_std = ds.y.std(axis=0)
    if np.any(x_std == 0.0) or np.any(y_std == 0.0):
        raise ValueError("zero variance coordinate; cannot standardize")
    tf = Standardizer(ds.x.mean(axis=0), x_std, ds.y.mean(axis=0), y_std)
    return tf.apply(ds), tf


def save_uds(path: str, ds: Dataset, spec: DistributionSpec | None, seed: int | None) -> None:
    """Write raw f32 records to `path` and the manifest to `path + '.json'`."""
    n = len(ds)
    rec = np.concatenate([ds.x, ds.y], axis=1).astype("<f4")
    rec.tofile(path)
    manifest = {
        "spec": spec.to_dict() if spec is not None else None,
        "n": n,
        "d_x": int(ds.x.shape[1]),
        "d_y": int(ds.y.shape[1]),
        "seed": seed,
        "byte_order": "little",
        "dtype": "f32",
    }
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_uds(path: str) -> tuple[Dataset, dict]:
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    n, d_x, d_y = manifest["n"], manifest["d_x"], manifest["d_y"]
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != n * (d_x + d_y):
        raise ValueError(
            f"UDS payload {os.path.basename(path)} has {raw.size} floats, "
            f"manifest implies {n * (d_x + d_y)}"
        )
    rec = raw.reshape(n, d_x + d_y).astype(np.float64)
    return Dataset(rec[:, :d_x], rec[:, d_x:]), manifest
