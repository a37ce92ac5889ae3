"""Full-batch first-order optimisers and a finite-difference gradient checker.

Objectives are callables ``w -> (value, gradient)`` over a flat parameter
vector. Both methods support a backtracking (Armijo) line search; with it the
objective trace is non-increasing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

METHODS = ("gradient-descent", "normalized-gradient-descent")


class OptimizationError(RuntimeError):
    """Raised when an optimisation run has to be abandoned.

    ``params`` and ``trace`` hold the last good state.
    """

    def __init__(self, message: str, params: np.ndarray, trace: "Trace"):
        super().__init__(message)
        self.params = params
        self.trace = trace


class DivergenceError(OptimizationError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: Literal["gradient-descent", "normalized-gradient-descent"] = "gradient-descent"
    step_size: float = 1.0
    line_search: bool = True
    max_iter: int = 2000
    tol: float = 1e-6
    # Barzilai-Borwein trial steps; only used together with line_search.
    bb_steps: bool = True
    seed: int | None = None
    # consecutive increases tolerated without line search
    divergence_patience: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class Trace:
    values: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)

    def append(self, value: float, grad_norm: float, step: float) -> None:
        self.values.append(float(value))
        self.grad_norms.append(float(grad_norm))
        self.steps.append(float(step))

    def __len__(self) -> int:
        return len(self.values)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "value", "grad_norm", "step"])
            for i, (v, g, s) in enumerate(zip(self.values, self.grad_norms, self.steps)):
                w.writerow([i, format(v, ".17g"), format(g, ".17g"), format(s, ".17g")])


@dataclass
class OptimResult:
    params: np.ndarray
    value: float
    grad: np.ndarray
    trace: Trace
    converged: bool
    n_iter: int


def _finite(value, grad) -> bool:
    return math.isfinite(value) and bool(np.all(np.isfinite(grad)))


def minimise(objective: Objective, init, config: OptimizerConfig | None = None) -> OptimResult:
    """Minimise ``objective`` starting from ``init``.

    Iteration stops when the gradient norm drops below ``config.tol`` or after
    ``config.max_iter`` iterations. Trace entry ``k`` records the objective,
    gradient norm and accepted step length at iterate ``k``.
    """
    cfg = config or OptimizerConfig()
    w = np.array(init, dtype=float).ravel().copy()
    f, g = objective(w)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel()
    trace = Trace()
    if not _finite(f, g):
        raise OptimizationError("objective is not finite at the initial point", w, trace)

    normalized = cfg.method == "normalized-gradient-descent"
    step = cfg.step_size
    prev_w = prev_g = None
    increases = 0
    trace.append(f, np.linalg.norm(g), 0.0)

    for it in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.tol:
            return OptimResult(w, f, g, trace, True, it)
        direction = -g / gnorm if normalized else -g
        slope = -gnorm if normalized else -gnorm**2

        if cfg.line_search:
            if cfg.bb_steps and prev_w is not None:
                s, y = w - prev_w, g - prev_g
                sy = float(s @ y)
                if sy > 0:
                    bb = float(s @ s) / sy
                    step = bb * gnorm if normalized else bb
            t = step
            while True:
                w_new = w + t * direction
                f_new, g_new = objective(w_new)
                f_new = float(f_new)
                g_new = np.asarray(g_new, dtype=float).ravel()
                if _finite(f_new, g_new) and f_new <= f + 1e-4 * t * slope:
                    break
                t *= 0.5
                if t < 1e-20 * max(1.0, np.linalg.norm(w)):
                    # no decrease achievable at working precision
                    return OptimResult(w, f, g, trace, gnorm < cfg.tol, it)
            # let the next trial step grow again after backtracking
            step = 2.0 * t if not cfg.bb_steps else t
        else:
            t = step
            w_new = w + t * direction
            f_new, g_new = objective(w_new)
            f_new = float(f_new)
            g_new = np.asarray(g_new, dtype=float).ravel()
            if not _finite(f_new, g_new):
                raise OptimizationError(
                    f"objective became non-finite at iteration {it + 1}", w, trace
                )
            increases = increases + 1 if f_new > f else 0
            if increases >= cfg.divergence_patience:
                raise DivergenceError(
                    f"objective increased for {increases} consecutive steps "
                    f"(last value {f_new:.6g}); reduce step_size",
                    w,
                    trace,
                )

        prev_w, prev_g = w, g
        w, f, g = w_new, f_new, g_new
        trace.append(f, np.linalg.norm(g), t)

    return OptimResult(w, f, g, trace, float(np.linalg.norm(g)) < cfg.tol, cfg.max_iter)


def finite_difference_check(
    objective: Objective, point, step: float = 1e-6, mode: str = "central", floor: float = 1e-6
) -> float:
    """Max relative error between the analytic and central-difference gradients.

    The relative error of coordinate ``i`` is ``|a_i - b_i| / max(|a_i|, |b_i|, floor)``.
    """
    if mode != "central":
        raise ValueError("only central differences are supported")
    w = np.array(point, dtype=float).ravel()
    _, analytic = objective(w)
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        fp, _ = objective(w + e)
        fm, _ = objective(w - e)
        numeric[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
