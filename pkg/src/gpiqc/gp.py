"""Scalar Gaussian-process regression with RKHS-based frequentist error bands.

The posterior mean and variance are the usual GPR formulas with a zero prior
mean. The band half-width is ``beta * sigma(x)`` where

    beta = B + 2 R sqrt(log det(K + max(1, lam) I) - 2 log(delta))

holds uniformly in ``x`` with probability at least ``1 - delta`` whenever the
target has RKHS norm at most ``B`` and the noise is independent and
``R``-subgaussian.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg

#: negative posterior variances above this are treated as roundoff
VARIANCE_CLAMP = 1e-12


class GpError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    """Covariance function on the real line.

    ``kind`` is ``"se"`` (squared exponential) or ``"zero_at_origin"``, the
    latter wrapping ``base`` so every function in its RKHS vanishes at 0.
    """

    kind: str
    lengthscale: float = 1.0
    variance: float = 1.0
    base: Optional["Kernel"] = None

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        if self.kind == "se":
            d = x1[:, None] - x2[None, :]
            return self.variance * np.exp(-0.5 * (d / self.lengthscale) ** 2)
        if self.kind == "zero_at_origin":
            k00 = self.base(0.0, 0.0)[0, 0]
            # ratio first so that the row at x1 = 0 cancels exactly
            r1 = self.base(x1, 0.0)[:, 0] / k00
            return self.base(x1, x2) - np.outer(r1, self.base(x2, 0.0)[:, 0])
        raise GpError(f"unknown kernel kind {self.kind!r}")

    def diag(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "se":
            return np.full(x.shape, self.variance)
        k00 = self.base(0.0, 0.0)[0, 0]
        return self.base.diag(x) - self.base(x, 0.0)[:, 0] ** 2 / k00

    def to_dict(self) -> dict:
        if self.kind == "se":
            return {"kind": "se", "lengthscale": self.lengthscale, "variance": self.variance}
        return {"kind": self.kind, "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Kernel":
        if d["kind"] == "se":
            return kernel_se(d["lengthscale"], d["variance"])
        return kernel_zero_at_origin(cls.from_dict(d["base"]))


def kernel_se(lengthscale: float, variance: float) -> Kernel:
    """Squared-exponential kernel ``variance * exp(-(x - x')^2 / (2 lengthscale^2))``."""
    if not (lengthscale > 0 and variance > 0):
        raise GpError("SE kernel needs positive lengthscale and variance")
    return Kernel("se", float(lengthscale), float(variance))


def kernel_zero_at_origin(base: Kernel) -> Kernel:
    """Condition ``base`` on a noise-free observation ``f(0) = 0``."""
    if base(0.0, 0.0)[0, 0] == 0.0:
        raise GpError("base kernel has k(0, 0) = 0")
    return Kernel("zero_at_origin", base=base)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    noise_bound: float  # subgaussian constant R
    reg: float  # likelihood variance lambda

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.size < 1 or x.shape != y.shape:
            raise GpError("dataset needs N >= 1 matching inputs and targets")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise GpError("non-finite data")
        if not self.reg > 0:
            raise GpError("regularization must be positive")
        if self.noise_bound < 0:
            raise GpError("subgaussian constant must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            for a, b in zip(self.x, self.y):
                w.writerow([repr(float(a)), repr(float(b))])

    @classmethod
    def from_csv(cls, path, noise_bound: float, reg: float) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["x"]) for r in rows]),
                   np.array([float(r["y"]) for r in rows]), noise_bound, reg)


@dataclass(frozen=True)
class GpPosterior:
    kernel: Kernel
    data: Dataset
    chol: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    beta: float
    delta: float
    rkhs_bound: float
    logdet: float

    def mean(self, x) -> np.ndarray:
        return self.kernel(x, self.data.x) @ self.weights

    def variance(self, x) -> np.ndarray:
        kx = self.kernel(x, self.data.x)
        v = linalg.solve_triangular(self.chol, kx.T, lower=True)
        var = self.kernel.diag(x) - np.sum(v * v, axis=0)
        if np.any(var < -VARIANCE_CLAMP):
            raise GpError(f"posterior variance {var.min():.3e} is negative beyond roundoff")
        return np.maximum(var, 0.0)

    def std(self, x) -> np.ndarray:
        return np.sqrt(self.variance(x))

    def band(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper edges ``mean -/+ beta * std``."""
        mu = self.mean(x)
        half = self.beta * self.std(x)
        return mu - half, mu + half

    def band_csv(self, path, x) -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mu = self.mean(x)
        lo, hi = self.band(x)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "mean", "lower", "upper"])
            for row in zip(x, mu, lo, hi):
                w.writerow([repr(float(v)) for v in row])


def confidence_scale(K: np.ndarray, reg: float, noise_bound: float, rkhs_bound: float,
                     delta: float) -> Tuple[float, float]:
    """Return ``(beta, logdet)`` for Gram matrix ``K``."""
    lam_bar = max(1.0, reg)
    c = linalg.cho_factor(K + lam_bar * np.eye(K.shape[0]), lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    arg = logdet - 2.0 * np.log(delta)
    if arg < 0:
        raise GpError("invalid confidence budget: log-det term is negative")
    return rkhs_bound + 2.0 * noise_bound * np.sqrt(arg), logdet


def fit(kernel: Kernel, data: Dataset, rkhs_bound: float, delta: float) -> GpPosterior:
    """GPR posterior and frequentist band scale for ``data``."""
    if not 0.0 < delta < 1.0:
        raise GpError("delta must lie in (0, 1)")
    if not rkhs_bound > 0:
        raise GpError("RKHS norm bound must be positive")
    K = kernel(data.x, data.x)
    try:
        L = linalg.cholesky(K + data.reg * np.eye(len(data)), lower=True)
    except linalg.LinAlgError as exc:
        raise GpError("Cholesky factorization of the regularized Gram matrix failed") from exc
    weights = linalg.cho_solve((L, True), data.y)
    beta, logdet = confidence_scale(K, data.reg, data.noise_bound, rkhs_bound, delta)
    return GpPosterior(kernel, data, L, weights, float(beta), float(delta),
                       float(rkhs_bound), logdet)


def band(post: GpPosterior, x) -> Tuple[np.ndarray, np.ndarray]:
    return post.band(x)


@dataclass(frozen=True)
class RkhsFunction:
    """Finite kernel expansion ``f(x) = sum_i c_i k(x, x_i)``."""

    kernel: Kernel
    centers: np.ndarray
    coeffs: np.ndarray

    def __call__(self, x) -> np.ndarray:
        scalar = np.ndim(x) == 0
        out = self.kernel(x, self.centers) @ self.coeffs
        return float(out[0]) if scalar else out.reshape(np.shape(x))

    @property
    def norm(self) -> float:
        K = self.kernel(self.centers, self.centers)
        return float(np.sqrt(max(self.coeffs @ K @ self.coeffs, 0.0)))

    def scaled_to(self, target_norm: float) -> "RkhsFunction":
        return RkhsFunction(self.kernel, self.centers, self.coeffs * (target_norm / self.norm))

    def evaluator(self) -> Callable[[np.ndarray], np.ndarray]:
        """Array-in, array-out evaluation with the kernel terms precomputed.

        Used in simulation loops where ``f`` is called many times on small
        arrays. Falls back to the generic path for other kernels.
        """
        k = self.kernel
        base = k.base if k.kind == "zero_at_origin" else k
        if base is None or base.kind != "se":
            return lambda x: np.asarray(self(np.asarray(x, dtype=float)))
        a = -0.5 / base.lengthscale ** 2
        c = base.variance * self.coeffs
        xc = self.centers
        s = float(np.sum(c * np.exp(a * xc ** 2))) if k.kind == "zero_at_origin" else 0.0

        def f(x):
            x = np.asarray(x, dtype=float)
            out = np.exp(a * (x[..., None] - xc) ** 2) @ c
            return out - s * np.exp(a * x * x) if s else out
        return f

    def to_dict(self) -> dict:
        return {"kernel": self.kernel.to_dict(), "centers": self.centers.tolist(),
                "coeffs": self.coeffs.tolist()}


def rkhs_function(kernel: Kernel, centers, coeffs) -> Tuple[RkhsFunction, float]:
    """Return the kernel expansion and its exact RKHS norm ``sqrt(c^T K c)``."""
    centers = np.asarray(centers, dtype=float).ravel()
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    if centers.shape != coeffs.shape:
        raise GpError("centers and coefficients differ in length")
    if np.unique(centers).size != centers.size:
        raise GpError("centers must be distinct")
    f = RkhsFunction(kernel, centers, coeffs)
    return f, f.norm


def sample_dataset(f: Callable, n: int, rng: np.random.Generator, noise_std: float,
                   noise_bound: float, reg: float, a: float = -1.0, b: float = 1.0) -> Dataset:
    """Uniform inputs on ``[a, b]`` with additive Gaussian noise."""
    x = rng.uniform(a, b, size=n)
    y = f(x) + noise_std * rng.standard_normal(n)
    return Dataset(x, y, noise_bound, reg)
