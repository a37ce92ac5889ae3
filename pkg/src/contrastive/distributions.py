"""Tractable densities, the unnormalised Gaussian toy model, and quadrature.

Samplers take an explicit seed and are pure. ``log_density`` is exact and
normalised and maps ``(N, d)`` points to ``(N,)`` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_ratio import as_points
from .rng import make_rng

LOG_2PI = math.log(2 * math.pi)


class QuadratureError(RuntimeError):
    pass


class Gaussian:
    """Diagonal Gaussian ``N(mean, diag(scale**2))``; scalars broadcast to ``dim``."""

    def __init__(self, mean=0.0, scale=1.0, dim: int | None = None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        scale = np.atleast_1d(np.asarray(scale, dtype=float))
        d = dim or max(mean.size, scale.size)
        self.mean = np.broadcast_to(mean, (d,)).copy()
        self.scale = np.broadcast_to(scale, (d,)).copy()
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        self.dim = d

    def sample(self, count: int, seed: int) -> np.ndarray:
        z = make_rng(seed).standard_normal((count, self.dim))
        return self.mean + self.scale * z

    def log_density(self, x) -> np.ndarray:
        x = as_points(x)
        z = (x - self.mean) / self.scale
        return -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(self.scale)) - 0.5 * self.dim * LOG_2PI

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(self.scale**2)

    def __repr__(self):
        return f"Gaussian(mean={self.mean.tolist()}, scale={self.scale.tolist()})"


class GaussianMixture1D:
    """Two-or-more component 1-D Gaussian mixture."""

    dim = 1

    def __init__(self, weights, means, scales):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.scales = np.asarray(scales, dtype=float)
        if not (self.weights.shape == self.means.shape == self.scales.shape):
            raise ValueError("weights, means and scales must have equal length")
        if np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-12):
            raise ValueError("weights must be non-negative and sum to one")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")

    def sample(self, count: int, seed: int) -> np.ndarray:
        rng = make_rng(seed)
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        z = rng.standard_normal(count)
        return (self.means[comp] + self.scales[comp] * z)[:, None]

    def log_density(self, x) -> np.ndarray:
        x = as_points(x)[:, 0]
        z = (x[:, None] - self.means) / self.scales
        comp = np.log(self.weights) - 0.5 * z**2 - np.log(self.scales) - 0.5 * LOG_2PI
        m = comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def variance(self) -> float:
        return float(self.weights @ (self.scales**2 + self.means**2) - self.mean**2)


# --------------------------------------------------------------------------- toy EBM


def gaussian_partition(sigma: float) -> float:
    """Partition function ``sqrt(2 pi sigma^2)`` of ``exp(-x^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return math.sqrt(2 * math.pi * sigma**2)


@dataclass(frozen=True)
class GaussianToy:
    """Unnormalised zero-mean Gaussian with energy ``x^2 / (2 sigma^2)``."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def log_partition(self) -> float:
        return math.log(gaussian_partition(self.sigma))

    def energy(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) ** 2 / (2 * self.sigma**2)


def gaussian_loglik_decomposition(sigma: float, data) -> tuple[float, float, float]:
    """Split the toy-model log-likelihood into partition and energy contributions.

    Returns ``(partition_term, energy_term, total)`` with
    ``partition_term = -(n/2) log(2 pi sigma^2)`` and
    ``energy_term = -sum(x^2) / (2 sigma^2)``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("data must be non-empty")
    part = -0.5 * x.size * math.log(2 * math.pi * sigma**2)
    energy = -float(x @ x) / (2 * sigma**2)
    return part, energy, part + energy


# --------------------------------------------------------------------------- quadrature


@dataclass
class Quadrature:
    """Composite Gauss-Legendre rule on a box (tensor product for d = 2).

    ``bounds`` is a list of ``(lo, hi)`` per axis; each axis gets ``nodes``
    points split into panels of ``order`` points.
    """

    bounds: list[tuple[float, float]]
    nodes_per_axis: int = 2048
    order: int = 32
    norm_tol: float = 1e-6
    _cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.bounds) not in (1, 2):
            raise ValueError("quadrature supports d <= 2")
        if self.nodes_per_axis % self.order:
            raise ValueError("nodes_per_axis must be a multiple of order")

    @classmethod
    def for_gaussians(cls, *dists, width: float = 12.0, **kw) -> "Quadrature":
        """Box of ``mean +- width * max scale`` covering all given Gaussians."""
        dim = dists[0].dim
        lo = np.min([d.mean - width * d.scale.max() for d in dists], axis=0)
        hi = np.max([d.mean + width * d.scale.max() for d in dists], axis=0)
        return cls([(float(lo[i]), float(hi[i])) for i in range(dim)], **kw)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def _axis(self, lo: float, hi: float):
        t, w = np.polynomial.legendre.leggauss(self.order)
        panels = self.nodes_per_axis // self.order
        edges = np.linspace(lo, hi, panels + 1)
        half = np.diff(edges) / 2
        mid = (edges[:-1] + edges[1:]) / 2
        x = (mid[:, None] + half[:, None] * t).ravel()
        wx = (half[:, None] * w).ravel()
        return x, wx

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Points of shape ``(N, d)`` and weights of shape ``(N,)``."""
        if self._cache is None:
            axes = [self._axis(lo, hi) for lo, hi in self.bounds]
            if self.dim == 1:
                x, w = axes[0]
                self._cache = (x[:, None], w)
            else:
                (x0, w0), (x1, w1) = axes
                X0, X1 = np.meshgrid(x0, x1, indexing="ij")
                self._cache = (np.column_stack([X0.ravel(), X1.ravel()]), np.outer(w0, w1).ravel())
        return self._cache

    def integrate(self, fn) -> float:
        x, w = self.nodes()
        return float(w @ np.asarray(fn(x), dtype=float))

    def check_normalised(self, mass: float, name: str = "density") -> None:
        if abs(mass - 1.0) > self.norm_tol:
            raise QuadratureError(
                f"{name} integrates to {mass:.12g} on the quadrature box; widen the box or add nodes"
            )


def jsd_quadrature(log_p, log_q, integrator: Quadrature) -> float:
    """``KL(p || m) + KL(q || m)`` with ``m = (p + q) / 2``; lies in ``[0, 2 log 2]``."""
    x, w = integrator.nodes()
    lp = np.asarray(log_p(x), dtype=float)
    lq = np.asarray(log_q(x), dtype=float)
    p, q = np.exp(lp), np.exp(lq)
    integrator.check_normalised(w @ p, "p")
    integrator.check_normalised(w @ q, "q")
    lm = np.logaddexp(lp, lq) - math.log(2.0)
    kl_p = w @ np.where(p > 0, p * (lp - lm), 0.0)
    kl_q = w @ np.where(q > 0, q * (lq - lm), 0.0)
    return float(min(max(kl_p + kl_q, 0.0), 2 * math.log(2.0)))
