r"""Bayesian experimental design by maximising a Jensen-Shannon lower bound.

For a design ``d`` the joint :math:`p(\theta, x | d)` plays the role of the
data distribution and the product :math:`p(\theta) p(x | d)` the reference.
The bound :math:`2 \log 2 - J(h)` at ``nu = 1`` is maximised jointly over the
ratio ``h`` and the design. Included are a discrete-time binomial-chain SIR
simulator, a linear-Gaussian validation model (``x = d theta + eps``, from
:mod:`contrastive.sbi`), and nested Monte Carlo mutual-information oracles
used to cross-check design argmaxes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_ratio import (
    TWO_LOG2,
    LabeledTwoSample,
    LogRatioModel,
    as_points,
    fit_ratio,
    logistic_loss,
)
from .optimize import OptimizerConfig, minimise
from .rng import make_rng, sub_seed
from .sbi import (
    PosteriorGrid,
    Simulator,
    UniformPrior,
    marginal_pairs,
    posterior_from_ratio,
    simulate_joint,
)


class BudgetError(RuntimeError):
    pass


# --------------------------------------------------------------------------- designs


@dataclass(frozen=True)
class DesignVector:
    values: tuple[float, ...]
    lower: float
    upper: float
    ordered: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < self.lower) or np.any(v > self.upper):
            raise ValueError(f"design {v.tolist()} outside [{self.lower}, {self.upper}]")
        if self.ordered and np.any(np.diff(v) < 0):
            raise ValueError("ordered design must be non-decreasing")

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass
class DesignSpace:
    """Box ``[lower, upper]^q`` with an optional candidate grid (rows are designs)."""

    lower: float
    upper: float
    dim: int = 1
    grid: np.ndarray | None = None
    ordered: bool = False

    def candidates(self) -> np.ndarray:
        if self.grid is None:
            raise ValueError("design space has no candidate grid")
        return np.asarray(self.grid, dtype=float).reshape(-1, self.dim)

    def project(self, d) -> np.ndarray:
        d = np.clip(np.asarray(d, dtype=float), self.lower, self.upper)
        return np.sort(d) if self.ordered else d


# --------------------------------------------------------------------------- SIR


@dataclass(frozen=True)
class SirConfig:
    population: int = 500
    initial_infected: int = 2
    beta_range: tuple[float, float] = (0.0, 3.0)
    gamma_range: tuple[float, float] = (0.0, 1.5)
    horizon: float = 3.0
    steps: int = 200
    scheme: str = "binomial-chain"

    def __post_init__(self):
        if not 0 < self.initial_infected < self.population:
            raise ValueError("need 0 < initial_infected < population")
        if self.beta_range[0] < 0 or self.gamma_range[0] < 0:
            raise ValueError("rates must be non-negative on the prior support")
        if self.scheme != "binomial-chain":
            raise ValueError(f"unsupported SIR scheme {self.scheme!r}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def prior(self) -> UniformPrior:
        return UniformPrior(
            [self.beta_range[0], self.gamma_range[0]], [self.beta_range[1], self.gamma_range[1]]
        )

    def time_index(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(t < 0) or np.any(t > self.horizon):
            raise ValueError(f"design times {t.tolist()} outside the horizon [0, {self.horizon}]")
        return np.rint(t / self.dt).astype(int)


def sir_paths(config: SirConfig, betas, gammas, seed: int, record=None):
    """Binomial-chain trajectories; returns ``(S, I, R)`` of shape ``(n, len(record))``.

    Per step: infections ~ Bin(S, 1 - exp(-beta I dt / N)),
    recoveries ~ Bin(I, 1 - exp(-gamma dt)). ``record`` lists the step
    indices to keep (default: all ``steps + 1``). The random stream does not
    depend on ``record``.
    """
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    gammas = np.atleast_1d(np.asarray(gammas, dtype=float))
    if np.any(betas < 0) or np.any(gammas < 0):
        raise ValueError("rates must be non-negative")
    n, N, dt = len(betas), config.population, config.dt
    record = np.arange(config.steps + 1) if record is None else np.atleast_1d(record)
    slot = {int(k): j for j, k in enumerate(record)}
    rng = make_rng(seed)
    out = np.empty((3, n, len(record)), dtype=np.int64)
    s = np.full(n, N - config.initial_infected, dtype=np.int64)
    i = np.full(n, config.initial_infected, dtype=np.int64)
    r = np.zeros(n, dtype=np.int64)
    p_rec = -np.expm1(-gammas * dt)
    for k in range(config.steps + 1):
        if k in slot:
            out[:, :, slot[k]] = s, i, r
        if k == config.steps:
            break
        new_inf = rng.binomial(s, -np.expm1(-betas * i * dt / N))
        new_rec = rng.binomial(i, p_rec)
        s = s - new_inf
        i = i + new_inf - new_rec
        r = r + new_rec
    return out[0], out[1], out[2]


def sir_simulate(config: SirConfig, beta: float, gamma: float, design, seed: int) -> np.ndarray:
    """Observation ``(I_t / N, R_t / N)`` at each design time, concatenated as ``[I..., R...]``."""
    idx = config.time_index(design.array() if isinstance(design, DesignVector) else design)
    _, I, R = sir_paths(config, [beta], [gamma], seed, record=idx)
    return np.concatenate([I[0], R[0]]) / config.population


class SirSimulator(Simulator):
    """Simulator wrapper; ``theta = (beta, gamma)``, ``design`` = measurement times.

    ``run_batch`` draws whole trajectories from one stream seeded by ``seed``
    and reads them at the design times, so equal seeds give common random
    numbers across designs.
    """

    parameter_dim = 2

    def __init__(self, config: SirConfig | None = None, n_times: int = 1):
        self.config = config or SirConfig()
        self.design_dim = n_times
        self.data_dim = 2 * n_times

    def run(self, theta, design, seed):
        theta = np.ravel(theta)
        return sir_simulate(self.config, theta[0], theta[1], design, seed)

    def run_batch(self, thetas, design, seed):
        thetas = as_points(thetas)
        idx = self.config.time_index(design)
        _, I, R = sir_paths(self.config, thetas[:, 0], thetas[:, 1], seed, record=idx)
        return np.hstack([I, R]) / self.config.population


# --------------------------------------------------------------------------- bound


@dataclass
class BoundEstimate:
    bound: float
    gradient: np.ndarray
    std_error: float


def design_banks(sim: Simulator, prior, design, n: int, seed: int) -> LabeledTwoSample:
    """Joint and shuffled (product-of-marginals) samples at ``design``; inputs are ``[x, theta]``."""
    joint = simulate_joint(sim, prior, n, seed, design)
    marg = marginal_pairs(joint, sub_seed(seed, 99))
    return LabeledTwoSample(joint.inputs(), marg.inputs())


def jsd_design_objective(
    sim: Simulator, prior, design, ratio_model: LogRatioModel, n: int, seed: int
) -> BoundEstimate:
    """JSD lower bound ``2 log 2 - J(h)`` at ``design`` on a fresh bank.

    ``gradient`` is the gradient of the bound with respect to the ratio
    parameters (the negated logistic-loss gradient).
    """
    sample = design_banks(sim, prior, design, n, seed)
    rep = logistic_loss(ratio_model, sample, with_gradient=True)
    return BoundEstimate(TWO_LOG2 - rep.loss, -rep.gradient, rep.std_error)


def linear_gaussian_oracle_ratio(design: float, noise: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """``log N(x; d theta, s^2) - log N(x; 0, d^2 + s^2)`` on inputs ``[x, theta]``."""
    d, s2 = float(design), noise**2

    def h(z):
        z = as_points(z)
        x, th = z[:, 0], z[:, 1]
        v = d * d + s2
        return -0.5 * (x - d * th) ** 2 / s2 + 0.5 * x**2 / v + 0.5 * math.log(v / s2)

    return h


def linear_gaussian_mi(design) -> float:
    """Closed-form ``0.5 log(1 + d^2)`` for a unit-variance prior and noise."""
    return 0.5 * math.log1p(float(design) ** 2)


# --------------------------------------------------------------------------- search


@dataclass
class MiTrace:
    iterations: list[int] = field(default_factory=list)
    designs: list[np.ndarray] = field(default_factory=list)
    bounds: list[float] = field(default_factory=list)
    std_errors: list[float] = field(default_factory=list)
    final_design: np.ndarray | None = None
    final_bound: float | None = None
    final_ratio: LogRatioModel | None = None
    simulations: int = 0

    def record(self, it: int, design, bound: float, se: float) -> None:
        self.iterations.append(it)
        self.designs.append(np.asarray(design, dtype=float).copy())
        self.bounds.append(float(bound))
        self.std_errors.append(float(se))

    def to_csv(self, path) -> None:
        q = len(self.designs[0]) if self.designs else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", *[f"d{j}" for j in range(q)], "bound", "std_error"])
            for it, d, b, se in zip(self.iterations, self.designs, self.bounds, self.std_errors):
                w.writerow([it, *[format(v, ".17g") for v in d], format(b, ".17g"), format(se, ".17g")])


RatioFactory = Callable[[LabeledTwoSample], LogRatioModel]


def concurrent_design_optimise(
    sim: Simulator,
    prior,
    design_space: DesignSpace,
    ratio_model_factory: RatioFactory,
    strategy: str = "grid-refit",
    budget: int = 10**6,
    seed: int = 0,
    n_per_design: int = 10_000,
    optimizer_config: OptimizerConfig | None = None,
    init_design=None,
    iterations: int = 30,
    ratio_steps: int = 25,
    design_step: float = 0.5,
    fd_step: float = 0.05,
) -> MiTrace:
    """Find the design maximising the JSD bound while fitting the ratio.

    ``grid-refit`` fits a fresh ratio at every candidate of
    ``design_space.grid`` (common training and evaluation seeds across
    candidates) and keeps the best held-out bound. ``alternating-ascent``
    alternates ``ratio_steps`` warm-started gradient steps on the ratio with a
    finite-difference ascent step on the design; each iteration draws new
    banks shared by ``d`` and ``d +- fd_step``. ``budget`` counts simulator
    runs; a run stops when the next evaluation would exceed it.
    """
    cfg = optimizer_config or OptimizerConfig(tol=1e-7, max_iter=1000)
    trace = MiTrace()
    if strategy == "grid-refit":
        cost = 2 * n_per_design
        cands = design_space.candidates()
        if budget < cost:
            raise BudgetError(f"budget {budget} is below the cost {cost} of one design evaluation")
        best = -np.inf
        train_seed, eval_seed = sub_seed(seed, 0), sub_seed(seed, 1)
        for i, d in enumerate(cands):
            if trace.simulations + cost > budget:
                break
            train = design_banks(sim, prior, d, n_per_design, train_seed)
            ratio, _ = fit_ratio(ratio_model_factory(train), train, cfg)
            est = jsd_design_objective(sim, prior, d, ratio, n_per_design, eval_seed)
            trace.simulations += cost
            trace.record(i, d, est.bound, est.std_error)
            if est.bound > best:
                best = est.bound
                trace.final_design, trace.final_bound, trace.final_ratio = d.copy(), est.bound, ratio
        return trace

    if strategy != "alternating-ascent":
        raise ValueError(f"unknown strategy {strategy!r}")
    q = design_space.dim
    cost = (2 + 2 * q) * n_per_design
    if budget < cost:
        raise BudgetError(f"budget {budget} is below the cost {cost} of one ascent iteration")
    d = design_space.project(
        np.full(q, 0.5 * (design_space.lower + design_space.upper)) if init_design is None else init_design
    )
    ratio = None
    step_cfg = OptimizerConfig(**{**cfg.__dict__, "max_iter": ratio_steps})
    best = -np.inf
    for it in range(iterations):
        if trace.simulations + cost > budget:
            break
        bank_seed = sub_seed(seed, 2, it)
        train = design_banks(sim, prior, d, n_per_design, bank_seed)
        if ratio is None:
            ratio = ratio_model_factory(train)
        ratio, _ = fit_ratio(ratio, train, step_cfg)
        grad = np.zeros(q)
        for j in range(q):
            e = np.zeros(q)
            e[j] = fd_step
            up = jsd_design_objective(sim, prior, design_space.project(d + e), ratio, n_per_design, bank_seed)
            dn = jsd_design_objective(sim, prior, design_space.project(d - e), ratio, n_per_design, bank_seed)
            grad[j] = (up.bound - dn.bound) / (2 * fd_step)
        est = jsd_design_objective(sim, prior, d, ratio, n_per_design, sub_seed(seed, 3, it))
        trace.simulations += cost
        trace.record(it, d, est.bound, est.std_error)
        if est.bound > best:
            best = est.bound
            trace.final_design, trace.final_bound, trace.final_ratio = d.copy(), est.bound, ratio
        d = design_space.project(d + design_step * grad)
    if not trace.bounds:
        raise BudgetError("budget exhausted before any complete evaluation")
    return trace


# --------------------------------------------------------------------------- MI oracles


@dataclass
class MiEstimate:
    mi: float
    std_error: float


def _logmeanexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def nested_mc_mi_oracle(
    log_likelihood: Callable, sim: Simulator, prior, design, n_outer: int, n_inner: int, seed: int
) -> MiEstimate:
    """Nested Monte Carlo MI with a tractable ``log_likelihood(x, theta, design)``.

    Estimates ``E[log p(x | theta, d) - log p_hat(x | d)]`` where
    ``p_hat(x | d)`` averages the likelihood over ``n_inner`` fresh prior
    draws (in log-sum-exp form). Biased upward for finite ``n_inner``.
    """
    joint = simulate_joint(sim, prior, n_outer, sub_seed(seed, 0), design)
    inner = as_points(prior.sample(n_inner, sub_seed(seed, 1)))
    x = joint.xs[:, 0]
    ll = log_likelihood(x, joint.thetas[:, 0], design)
    ll_inner = log_likelihood(x[:, None], inner[None, :, 0], design)
    terms = ll - _logmeanexp(ll_inner, axis=1)
    return MiEstimate(float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n_outer)))


def bin_observations(x, n_bins: int) -> np.ndarray:
    """Map observations in ``[0, 1]^k`` to a single integer cell index (``n_bins`` per axis)."""
    x = as_points(x)
    cells = np.minimum((x * n_bins).astype(np.int64), n_bins - 1)
    return cells @ (n_bins ** np.arange(x.shape[1]))


def sir_binned_mi(
    sim: SirSimulator,
    prior,
    designs: Sequence,
    n_outer: int,
    n_inner: int,
    n_lik: int,
    n_bins: int,
    seed: int,
) -> list[MiEstimate]:
    """Nested Monte Carlo MI for the SIR model with binned observations.

    Each outer and inner parameter gets ``n_lik`` simulations, giving a
    histogram estimate of ``p(bin | theta, d)``. The marginal is the average
    of the inner histograms. Per outer draw the MI term is the exact sum over
    bins, with the Miller-Madow correction ``(occupied - 1) / (2 n_lik)``
    subtracted for the plug-in entropy. Trajectories are shared by all
    designs (common random numbers).
    """
    cfg = sim.config
    th_out = prior.sample(n_outer, sub_seed(seed, 0))
    th_in = prior.sample(n_inner, sub_seed(seed, 1))
    thetas = np.repeat(np.vstack([th_out, th_in]), n_lik, axis=0)
    idx = [cfg.time_index(d) for d in designs]
    record = np.unique(np.concatenate(idx))
    _, I, R = sir_paths(cfg, thetas[:, 0], thetas[:, 1], sub_seed(seed, 2), record=record)
    rows = np.repeat(np.arange(n_outer + n_inner), n_lik)
    out = []
    for k in idx:
        cols = np.searchsorted(record, k)
        obs = np.hstack([I[:, cols], R[:, cols]]) / cfg.population
        # only occupied cells carry mass; relabel them densely
        _, cells = np.unique(bin_observations(obs, n_bins), return_inverse=True)
        tables = np.zeros((n_outer + n_inner, int(cells.max()) + 1))
        np.add.at(tables, (rows, cells), 1.0)
        tables /= n_lik
        marginal = tables[n_outer:].mean(axis=0)
        L = tables[:n_outer]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_term = np.where(L > 0, np.log(L) - np.log(marginal), 0.0)
            # outer cells never seen by the inner draws get the inner-resolution floor
            log_term = np.where((L > 0) & (marginal == 0), np.log(L * n_inner * n_lik), log_term)
        terms = np.sum(L * log_term, axis=1) - ((L > 0).sum(axis=1) - 1) / (2 * n_lik)
        out.append(MiEstimate(float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n_outer))))
    return out


def posterior_at_design(ratio: LogRatioModel, prior, x_obs, grid_resolution=101) -> PosteriorGrid:
    return posterior_from_ratio(ratio, prior, x_obs, grid_resolution)
