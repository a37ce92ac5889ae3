r"""Telescoping density-ratio estimation (TRE) and the density-chasm experiment.

A large-gap log-ratio :math:`\log p_0 - \log p_{K+1}` is written as the sum of
small-gap ratios between consecutive waymarks,

.. math:: \log p_0 - \log p_{K+1} = \sum_{k=0}^{K} (\log p_k - \log p_{k+1}),

and each bridge is fitted separately with the logistic loss at ``nu = 1``.
Waymarks are built by variance-preserving linear combinations
:math:`z_k = \sqrt{1 - a_k^2}\, x + a_k\, y` of paired data and reference
samples, so Gaussian endpoints give Gaussian waymarks.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_ratio import LabeledTwoSample, LogRatioModel, as_points, fit_ratio, logistic_loss
from .distributions import Gaussian
from .optimize import OptimizationError, OptimizerConfig
from .rng import make_rng, sub_seed

SCHEMES = ("linear-combination",)


class BridgeFitError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"bridge {index} failed to fit: {cause}")
        self.index = index


def default_schedule(K: int) -> np.ndarray:
    return np.arange(K + 2) / (K + 1)


@dataclass
class WaymarkChain:
    K: int
    alphas: np.ndarray
    samples: list[np.ndarray]
    scheme: str = "linear-combination"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("a chain needs K >= 1 intermediate waymarks")
        a = np.asarray(self.alphas, dtype=float)
        if len(a) != self.K + 2 or a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise ValueError("schedule must increase strictly from 0 to 1 with K + 2 entries")
        if len(self.samples) != self.K + 2:
            raise ValueError("need one sample set per waymark")

    @property
    def n_bridges(self) -> int:
        return self.K + 1

    def bridge_sample(self, k: int) -> LabeledTwoSample:
        return LabeledTwoSample(self.samples[k], self.samples[k + 1])


def build_waymarks(
    data_samples,
    reference_samples,
    K: int,
    scheme: str = "linear-combination",
    seed: int = 0,
    alphas: Sequence[float] | None = None,
) -> WaymarkChain:
    """Chain of ``K`` intermediate waymarks between data (``a = 0``) and reference (``a = 1``).

    Both inputs are shuffled independently and paired by index. Unequal
    sample counts are truncated to the smaller one with a warning.
    """
    if K < 1:
        raise ValueError("K must be >= 1; for K = 0 fit a single ratio with core_ratio.fit_ratio")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown waymark scheme {scheme!r}")
    x, y = as_points(data_samples), as_points(reference_samples)
    if x.shape[1] != y.shape[1]:
        raise ValueError("data and reference samples must have equal dimensionality")
    if len(x) != len(y):
        warnings.warn(f"pairing {min(len(x), len(y))} of {len(x)} data / {len(y)} reference samples")
    n = min(len(x), len(y))
    x = x[make_rng(seed, 0).permutation(len(x))[:n]]
    y = y[make_rng(seed, 1).permutation(len(y))[:n]]
    a = default_schedule(K) if alphas is None else np.asarray(alphas, dtype=float)
    samples = [x if ak == 0 else y if ak == 1 else math.sqrt(1 - ak**2) * x + ak * y for ak in a]
    return WaymarkChain(K, a, samples, scheme)


def waymark_variances(alphas, data_var: float, ref_var: float) -> np.ndarray:
    """Per-coordinate variance of each waymark for independent zero-mean endpoints."""
    a = np.asarray(alphas, dtype=float)
    return (1 - a**2) * data_var + a**2 * ref_var


@dataclass
class BridgeEstimate:
    bridges: list[LogRatioModel]
    results: list | None = None

    def evaluate(self, x) -> np.ndarray:
        return np.sum([b.evaluate(x) for b in self.bridges], axis=0)

    __call__ = evaluate


def tre_fit(
    chain: WaymarkChain,
    ratio_model_factory: Callable[[int, LabeledTwoSample], LogRatioModel],
    optimizer_config: OptimizerConfig | None = None,
) -> BridgeEstimate:
    """Fit one fresh model per bridge ``(k, k + 1)``; the estimate is their sum."""
    bridges, results = [], []
    for k in range(chain.n_bridges):
        sample = chain.bridge_sample(k)
        try:
            fitted, res = fit_ratio(ratio_model_factory(k, sample), sample, optimizer_config)
        except OptimizationError as exc:
            raise BridgeFitError(k, exc) from exc
        bridges.append(fitted)
        results.append(res)
    return BridgeEstimate(bridges, results)


# --------------------------------------------------------------------------- chasm


class SquaredNormRatio(LogRatioModel):
    """``h(x; u) = u * ||x||^2 + offset``, one free parameter on the squared norm.

    ``offset`` is held fixed at the value that makes the family contain the
    true log-ratio between two zero-mean isotropic Gaussians.
    """

    def __init__(self, dim: int, offset: float, u: float = 0.0):
        self.dim = dim
        self.offset = float(offset)
        self.params = np.array([float(u)])
        self.description = "u * |x|^2 + offset"

    def evaluate(self, x):
        x = self._check(x)
        return self.params[0] * np.einsum("ij,ij->i", x, x) + self.offset

    def parameter_gradient(self, x):
        x = self._check(x)
        return np.einsum("ij,ij->i", x, x)[:, None]

    def with_params(self, params):
        return SquaredNormRatio(self.dim, self.offset, float(np.ravel(params)[0]))


def gaussian_scale_ratio(var_a: float, var_b: float, dim: int) -> tuple[float, float]:
    """``(u, offset)`` with ``log N(0, var_a I) - log N(0, var_b I) = u ||x||^2 + offset``."""
    return 0.5 / var_b - 0.5 / var_a, 0.5 * dim * math.log(var_b / var_a)


def curvature_proxy(model: LogRatioModel, sample: LabeledTwoSample, delta: float) -> float:
    """Central second difference of the loss along the first parameter."""
    w = model.params
    e = np.zeros_like(w)
    e[0] = delta
    f0 = logistic_loss(model, sample).loss
    fp = logistic_loss(model.with_params(w + e), sample).loss
    fm = logistic_loss(model.with_params(w - e), sample).loss
    return (fp - 2 * f0 + fm) / delta**2


CHASM_COLUMNS = ("alpha", "seed", "method", "K", "param_error", "curvature_proxy", "final_loss")


def chasm_experiment(
    alpha_list: Sequence[float],
    d: int = 10,
    n: int = 1000,
    K: int = 8,
    seeds: Sequence[int] = range(20),
    optimizer_config: OptimizerConfig | None = None,
    delta: float = 1e-3,
) -> list[dict]:
    """Single-ratio versus telescoping estimation of ``N(0, I_d)`` against ``N(0, alpha^2 I_d)``.

    Both methods use :class:`SquaredNormRatio` (per bridge for TRE); the TRE
    slope estimate is the sum of the bridge slopes. ``param_error`` is the
    absolute error of the slope ``estimate``; ``curvature_proxy`` is the second difference
    of the single-ratio loss at its optimum (for TRE, the mean over bridges).
    """
    cfg = optimizer_config or OptimizerConfig(tol=1e-10, max_iter=500)
    rows = []
    for alpha in alpha_list:
        u_true, offset = gaussian_scale_ratio(1.0, alpha**2, d)
        variances = waymark_variances(default_schedule(K), 1.0, alpha**2)
        for s in seeds:
            seed = sub_seed(int(s), int(round(alpha * 1000)))
            x = Gaussian(0.0, 1.0, d).sample(n, sub_seed(seed, 0))
            y = Gaussian(0.0, alpha, d).sample(n, sub_seed(seed, 1))
            sample = LabeledTwoSample(x, y)
            single, res = fit_ratio(SquaredNormRatio(d, offset), sample, cfg)
            rows.append(
                dict(
                    alpha=alpha, seed=int(s), method="single", K=0,
                    estimate=float(single.params[0]),
                    param_error=abs(single.params[0] - u_true),
                    curvature_proxy=curvature_proxy(single, sample, delta),
                    final_loss=res.value,
                )
            )

            chain = build_waymarks(x, y, K, seed=sub_seed(seed, 2))

            def factory(k, _sample):
                return SquaredNormRatio(d, gaussian_scale_ratio(variances[k], variances[k + 1], d)[1])

            est = tre_fit(chain, factory, cfg)
            u_tre = sum(b.params[0] for b in est.bridges)
            curv = np.mean(
                [curvature_proxy(b, chain.bridge_sample(k), delta) for k, b in enumerate(est.bridges)]
            )
            rows.append(
                dict(
                    alpha=alpha, seed=int(s), method="tre", K=K,
                    estimate=float(u_tre),
                    param_error=abs(u_tre - u_true),
                    curvature_proxy=float(curv),
                    final_loss=float(sum(r.value for r in est.results)),
                )
            )
    return rows


def write_chasm_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHASM_COLUMNS)
        for r in rows:
            w.writerow(
                [
                    format(r["alpha"], ".17g"), r["seed"], r["method"], r["K"],
                    format(r["param_error"], ".17g"),
                    format(r["curvature_proxy"], ".17g"),
                    format(r["final_loss"], ".17g"),
                ]
            )
