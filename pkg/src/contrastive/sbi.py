r"""Likelihood-free inference by ratio estimation (LFIRE) with grid posteriors.

The amortised estimator contrasts joint draws :math:`(x, \theta) \sim
p(x | \theta) p(\theta)` with draws from the product of marginals, so the
optimal log-ratio is :math:`\log p(x | \theta) - \log p(x)` for every
:math:`(x, \theta)`. Adding the log prior gives the unnormalised log
posterior, which is normalised on a regular grid.

Ratio models take the concatenated input ``[x, theta]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_ratio import LabeledTwoSample, LogRatioModel, as_points, fit_ratio
from .optimize import OptimizerConfig
from .rng import make_rng, sub_seed

MAX_RETRIES = 10


class SimulationError(RuntimeError):
    pass


class PosteriorUnderflow(RuntimeError):
    pass


# --------------------------------------------------------------------------- models


class Simulator:
    """A stochastic program ``(theta, design, seed) -> x``.

    ``run_batch`` simulates many parameter vectors at one design; the default
    loops over ``run`` with one child seed per row. Subclasses may vectorise
    it, in which case it must still be a pure function of its arguments.
    Failed simulations are signalled by non-finite outputs.
    """

    parameter_dim: int
    data_dim: int
    design_dim: int = 0

    def run(self, theta, design, seed: int) -> np.ndarray:
        raise NotImplementedError

    def run_batch(self, thetas, design, seed: int) -> np.ndarray:
        thetas = as_points(thetas)
        return np.array([self.run(t, design, sub_seed(seed, i)) for i, t in enumerate(thetas)])


class LinearGaussianSimulator(Simulator):
    """``x = d * theta + eps`` with ``eps ~ N(0, noise^2)``; ``d`` defaults to 1."""

    parameter_dim = 1
    data_dim = 1
    design_dim = 1

    def __init__(self, noise: float = 1.0):
        self.noise = noise

    @staticmethod
    def _d(design) -> float:
        if design is None or np.size(design) == 0:
            return 1.0
        return float(np.ravel(design)[0])

    def run(self, theta, design, seed):
        eps = make_rng(seed).standard_normal(1)
        return self._d(design) * np.ravel(theta)[:1] + self.noise * eps

    def run_batch(self, thetas, design, seed):
        thetas = as_points(thetas)
        eps = make_rng(seed).standard_normal((len(thetas), 1))
        return self._d(design) * thetas[:, :1] + self.noise * eps

    def log_likelihood(self, x, thetas, design=None) -> np.ndarray:
        """``log p(x | theta, d)`` broadcast over arrays."""
        z = (np.asarray(x) - self._d(design) * np.asarray(thetas)) / self.noise
        return -0.5 * z**2 - math.log(self.noise) - 0.5 * math.log(2 * math.pi)


class NoiseOnlySimulator(Simulator):
    """Ignores ``theta``: ``x ~ N(0, 1)``."""

    parameter_dim = 1
    data_dim = 1

    def run(self, theta, design, seed):
        return make_rng(seed).standard_normal(1)

    def run_batch(self, thetas, design, seed):
        return make_rng(seed).standard_normal((len(as_points(thetas)), 1))


class GaussianPrior:
    """Independent ``N(mean, scale^2)`` coordinates; grids cover ``mean +- width * scale``."""

    def __init__(self, mean=0.0, scale=1.0, width: float = 8.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.scale = np.atleast_1d(np.asarray(scale, dtype=float))
        self.dim = max(self.mean.size, self.scale.size)
        self.mean = np.broadcast_to(self.mean, (self.dim,)).copy()
        self.scale = np.broadcast_to(self.scale, (self.dim,)).copy()
        self.bounds = [(m - width * s, m + width * s) for m, s in zip(self.mean, self.scale)]

    def sample(self, count: int, seed: int) -> np.ndarray:
        return self.mean + self.scale * make_rng(seed).standard_normal((count, self.dim))

    def log_density(self, theta) -> np.ndarray:
        z = (as_points(theta) - self.mean) / self.scale
        return -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(self.scale)) - 0.5 * self.dim * math.log(2 * math.pi)

    @property
    def std(self) -> np.ndarray:
        return self.scale


class UniformPrior:
    """Uniform on the box ``[lower, upper]``."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(self.upper <= self.lower):
            raise ValueError("upper bounds must exceed lower bounds")
        self.dim = self.lower.size
        self.bounds = list(zip(self.lower.tolist(), self.upper.tolist()))
        self._log_vol = float(np.sum(np.log(self.upper - self.lower)))

    def sample(self, count: int, seed: int) -> np.ndarray:
        return make_rng(seed).uniform(self.lower, self.upper, size=(count, self.dim))

    def log_density(self, theta) -> np.ndarray:
        t = as_points(theta)
        inside = np.all((t >= self.lower) & (t <= self.upper), axis=1)
        return np.where(inside, -self._log_vol, -np.inf)

    @property
    def mean(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    @property
    def std(self) -> np.ndarray:
        return (self.upper - self.lower) / math.sqrt(12)


# --------------------------------------------------------------------------- samples


@dataclass
class JointSample:
    thetas: np.ndarray
    xs: np.ndarray
    seed: int
    failures: int = 0

    def __len__(self) -> int:
        return len(self.thetas)

    def inputs(self) -> np.ndarray:
        """Ratio-model inputs ``[x, theta]``."""
        return np.hstack([self.xs, self.thetas])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# master_seed={self.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"theta{i}" for i in range(self.thetas.shape[1])] + [f"x{i}" for i in range(self.xs.shape[1])])
            for t, x in zip(self.thetas, self.xs):
                w.writerow([format(v, ".17g") for v in (*t, *x)])

    @classmethod
    def from_csv(cls, path) -> "JointSample":
        with open(path, encoding="utf-8") as fh:
            seed = int(fh.readline().strip().split("=", 1)[1])
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        p = sum(h.startswith("theta") for h in header)
        return cls(body[:, :p].copy(), body[:, p:].copy(), seed)


def simulate_joint(sim: Simulator, prior, n: int, seed: int, design=None) -> JointSample:
    """``theta_i ~ prior``, ``x_i ~ sim(theta_i)``; failed rows are re-run with fresh child seeds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    thetas = as_points(prior.sample(n, sub_seed(seed, 0)))
    xs = np.asarray(sim.run_batch(thetas, design, sub_seed(seed, 1)), dtype=float).reshape(n, -1)
    bad = np.flatnonzero(~np.all(np.isfinite(xs), axis=1))
    failures = len(bad)
    for i in bad:
        for attempt in range(MAX_RETRIES):
            x = np.asarray(sim.run(thetas[i], design, sub_seed(seed, 2, int(i), attempt)), dtype=float)
            if np.all(np.isfinite(x)):
                xs[i] = x
                break
            failures += 1
        else:
            raise SimulationError(f"simulation {i} failed {MAX_RETRIES} times at theta={thetas[i]}")
    return JointSample(thetas, xs, seed, failures)


def marginal_pairs(joint: JointSample, seed: int) -> JointSample:
    """Pair each ``x`` with a uniformly permuted ``theta`` (fixed points allowed)."""
    if len(joint) < 2:
        raise ValueError("need at least two pairs to shuffle")
    perm = make_rng(seed).permutation(len(joint))
    return JointSample(joint.thetas[perm], joint.xs, seed)


def lfire_amortised_fit(
    joint: JointSample,
    marginal: JointSample,
    ratio_model: LogRatioModel,
    optimizer_config: OptimizerConfig | None = None,
    l2: float = 0.0,
) -> LogRatioModel:
    """Fit ``h(x, theta) ~ log p(x | theta) - log p(x)`` by joint-versus-marginal classification."""
    if len(joint) != len(marginal):
        raise ValueError("amortised LFIRE uses nu = 1: joint and marginal counts must match")
    sample = LabeledTwoSample(joint.inputs(), marginal.inputs())
    fitted, _ = fit_ratio(ratio_model, sample, optimizer_config, l2=l2)
    return fitted


# --------------------------------------------------------------------------- posteriors


@dataclass
class PosteriorGrid:
    """Normalised weights on the cell centres of a regular lattice."""

    axes: list[np.ndarray]
    points: np.ndarray
    weights: np.ndarray
    cell_volume: float

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def cov(self) -> np.ndarray:
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c

    def var(self) -> np.ndarray:
        return np.diag(self.cov())

    def mode(self) -> np.ndarray:
        return self.points[int(np.argmax(self.weights))]

    def tv_distance(self, other_weights) -> float:
        return 0.5 * float(np.sum(np.abs(self.weights - np.asarray(other_weights))))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"theta{i}" for i in range(self.points.shape[1])] + ["weight"])
            for p, wt in zip(self.points, self.weights):
                w.writerow([format(v, ".17g") for v in (*p, wt)])


def parameter_grid(bounds, resolution) -> tuple[list[np.ndarray], np.ndarray, float]:
    """Cell centres of a regular lattice over a box, with the cell volume."""
    res = np.broadcast_to(np.atleast_1d(resolution), (len(bounds),))
    axes = []
    vol = 1.0
    for (lo, hi), r in zip(bounds, res):
        step = (hi - lo) / int(r)
        axes.append(lo + step * (np.arange(int(r)) + 0.5))
        vol *= step
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.column_stack([m.ravel() for m in mesh]), vol


def normalise_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise PosteriorUnderflow(f"all posterior log-weights underflow (max log-weight {top})")
    w = np.exp(log_w - top)
    return w / w.sum()


def posterior_from_ratio(ratio: LogRatioModel, prior, x_obs, grid_resolution=201) -> PosteriorGrid:
    """Grid posterior with weights proportional to ``prior(theta) * exp(h(x_obs, theta))``."""
    axes, pts, vol = parameter_grid(prior.bounds, grid_resolution)
    x_obs = np.ravel(np.asarray(x_obs, dtype=float))
    inputs = np.hstack([np.broadcast_to(x_obs, (len(pts), x_obs.size)), pts])
    log_w = prior.log_density(pts) + ratio.evaluate(inputs)
    return PosteriorGrid(axes, pts, normalise_log_weights(log_w), vol)


def lfire_per_theta(
    sim: Simulator,
    prior,
    x_obs,
    grid_resolution,
    n: int,
    model_factory: Callable[[LabeledTwoSample], LogRatioModel],
    seed: int,
    optimizer_config: OptimizerConfig | None = None,
    design=None,
) -> PosteriorGrid:
    """Non-amortised LFIRE: one ratio ``log p(x | theta_g) - log p(x)`` per grid point.

    The marginal sample is shared across grid points. Ratio models here take
    ``x`` alone.
    """
    axes, pts, vol = parameter_grid(prior.bounds, grid_resolution)
    marginal_x = simulate_joint(sim, prior, n, sub_seed(seed, 0), design).xs
    x_obs = np.ravel(np.asarray(x_obs, dtype=float))[None, :]
    log_w = np.array(prior.log_density(pts), dtype=float)
    for g, theta in enumerate(pts):
        xs = sim.run_batch(np.repeat(theta[None, :], n, axis=0), design, sub_seed(seed, 1, g))
        sample = LabeledTwoSample(xs, marginal_x)
        fitted, _ = fit_ratio(model_factory(sample), sample, optimizer_config)
        log_w[g] += fitted.evaluate(x_obs)[0]
    return PosteriorGrid(axes, pts, normalise_log_weights(log_w), vol)


def conjugate_linear_gaussian_posterior(x_obs: float, d: float = 1.0, prior_var: float = 1.0, noise_var: float = 1.0):
    """Posterior ``(mean, var)`` of ``theta`` for ``x = d theta + eps``."""
    prec = 1.0 / prior_var + d * d / noise_var
    return (d * x_obs / noise_var) / prec, 1.0 / prec
