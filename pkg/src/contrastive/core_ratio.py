r"""Density-ratio estimation with the logistic loss.

Data points :math:`x_i \sim p` (label 1) are contrasted with reference points
:math:`y_j \sim q` (label 0). With :math:`\nu = m / n` the loss is

.. math:: J(h) = \frac{1}{n} \sum_i \log(1 + \nu e^{-h(x_i)})
        + \frac{\nu}{m} \sum_j \log(1 + \nu^{-1} e^{h(y_j)})

and its population minimiser is :math:`h^* = \log p - \log q`. At
:math:`\nu = 1`, :math:`2 \log 2 - J(h)` is a lower bound on the
Jensen-Shannon divergence :math:`\mathrm{KL}(p \| m) + \mathrm{KL}(q \| m)`,
:math:`m = (p + q) / 2`, exact at :math:`h^*`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .optimize import OptimizerConfig, OptimResult, minimise

LOG2 = math.log(2.0)
TWO_LOG2 = 2.0 * LOG2

LogDensity = Callable[[np.ndarray], np.ndarray]


def softplus(z):
    """Stable ``log(1 + exp(z))``."""
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0.0))))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def as_points(x) -> np.ndarray:
    """Coerce to a float array of shape ``(N, d)``; 1-D input is read as N scalars."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None]
    elif x.ndim != 2:
        raise ValueError(f"expected points of shape (N, d), got {x.shape}")
    return x


@dataclass(frozen=True)
class LabeledTwoSample:
    """Data points (label 1) and reference points (label 0)."""

    data: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        data, ref = as_points(self.data), as_points(self.reference)
        if len(data) == 0 or len(ref) == 0:
            raise ValueError("both data and reference samples must be non-empty")
        if data.shape[1] != ref.shape[1]:
            raise ValueError(
                f"dimensionality mismatch: data has d={data.shape[1]}, reference d={ref.shape[1]}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "reference", ref)

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def m(self) -> int:
        return len(self.reference)

    @property
    def nu(self) -> float:
        return self.m / self.n

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def swapped(self) -> "LabeledTwoSample":
        return LabeledTwoSample(self.reference, self.data)


@dataclass(frozen=True)
class LossReport:
    loss: float
    data_term: float
    reference_term: float
    std_error: float
    nu: float
    gradient: np.ndarray | None = None


# --------------------------------------------------------------------------- models


class LogRatioModel:
    """A parametric log-ratio ``h(x; w)``.

    Subclasses implement ``evaluate`` and ``parameter_gradient`` for the
    current ``params``; ``with_params`` returns a copy with new parameters.
    ``vjp(x, r)`` returns ``sum_i r_i * grad_w h(x_i)`` and may be overridden
    with something cheaper than forming the full Jacobian.
    """

    params: np.ndarray
    dim: int
    description: str = "log-ratio model"

    def evaluate(self, x) -> np.ndarray:
        raise NotImplementedError

    def parameter_gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, params) -> "LogRatioModel":
        raise NotImplementedError

    def vjp(self, x, r) -> np.ndarray:
        return np.asarray(r, dtype=float) @ self.parameter_gradient(x)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    @property
    def n_params(self) -> int:
        return int(np.size(self.params))

    def _check(self, x) -> np.ndarray:
        x = as_points(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"model expects d={self.dim}, got points with d={x.shape[1]}")
        return x


class FixedRatio(LogRatioModel):
    """A parameter-free log-ratio, e.g. an analytic oracle."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int, description="fixed"):
        self.fn = fn
        self.dim = dim
        self.params = np.zeros(0)
        self.description = description

    def evaluate(self, x):
        x = self._check(x)
        return np.asarray(self.fn(x), dtype=float).reshape(len(x))

    def parameter_gradient(self, x):
        return np.zeros((len(as_points(x)), 0))

    def with_params(self, params):
        if np.size(params):
            raise ValueError("FixedRatio has no parameters")
        return self


class LinearFeatureModel(LogRatioModel):
    """``h(x; w) = w . f(x)`` for a user-supplied feature map ``f``."""

    def __init__(self, features: Callable[[np.ndarray], np.ndarray], dim: int, params, description="linear"):
        self.features = features
        self.dim = dim
        self.params = np.array(params, dtype=float).ravel()
        self.description = description

    def evaluate(self, x):
        return self.features(self._check(x)) @ self.params

    def parameter_gradient(self, x):
        return self.features(self._check(x))

    def with_params(self, params):
        return LinearFeatureModel(self.features, self.dim, params, self.description)


class FeatureMap:
    """Monomials of the inputs up to ``degree`` (constant term included),
    optionally standardised as ``(f - shift) / scale`` column-wise."""

    def __init__(self, dim: int, degree: int = 2, shift=None, scale=None):
        self.dim = dim
        self.degree = degree
        self.powers = _monomial_powers(dim, degree)
        k = len(self.powers)
        self.shift = np.zeros(k) if shift is None else np.asarray(shift, dtype=float)
        self.scale = np.ones(k) if scale is None else np.asarray(scale, dtype=float)

    @property
    def size(self) -> int:
        return len(self.powers)

    def raw(self, x) -> np.ndarray:
        x = as_points(x)
        out = np.empty((len(x), len(self.powers)))
        for j, p in enumerate(self.powers):
            col = np.ones(len(x))
            for i, e in enumerate(p):
                if e:
                    col = col * x[:, i] ** e
            out[:, j] = col
        return out

    def __call__(self, x) -> np.ndarray:
        return (self.raw(x) - self.shift) / self.scale

    def standardized(self, x) -> "FeatureMap":
        """Copy whose non-constant columns have zero mean and unit scale on ``x``."""
        f = self.raw(x)
        shift, scale = f.mean(axis=0), f.std(axis=0)
        const = scale < 1e-12
        shift[const], scale[const] = 0.0, 1.0
        return FeatureMap(self.dim, self.degree, shift, scale)


def _monomial_powers(dim: int, degree: int) -> list[tuple[int, ...]]:
    powers = [(0,) * dim]
    frontier = [(0,) * dim]
    for _ in range(degree):
        nxt = []
        for p in frontier:
            start = max([i for i, e in enumerate(p) if e], default=0)
            for i in range(start, dim):
                q = list(p)
                q[i] += 1
                nxt.append(tuple(q))
        powers.extend(nxt)
        frontier = nxt
    return powers


def polynomial_model(dim: int, degree: int = 2, fit_to=None, params=None) -> LinearFeatureModel:
    """Linear model on monomial features; ``fit_to`` standardises the features on a sample."""
    fmap = FeatureMap(dim, degree)
    if fit_to is not None:
        fmap = fmap.standardized(fit_to)
    w = np.zeros(fmap.size) if params is None else params
    return LinearFeatureModel(fmap, dim, w, description=f"polynomial degree {degree}")


def quadratic_model(dim: int, fit_to=None, params=None) -> LinearFeatureModel:
    return polynomial_model(dim, 2, fit_to, params)


class MLPModel(LogRatioModel):
    """One hidden layer of tanh units: ``h(x) = v . tanh(W x + b) + c``.

    ``params`` is the flat concatenation ``[W (hidden x dim, row-major), b, v, c]``.
    Inputs are optionally standardised with fixed ``shift``/``scale``.
    """

    def __init__(self, dim: int, hidden: int, params=None, shift=None, scale=None):
        self.dim = dim
        self.hidden = hidden
        size = hidden * dim + 2 * hidden + 1
        self.params = np.zeros(size) if params is None else np.array(params, dtype=float).ravel()
        if self.params.size != size:
            raise ValueError(f"expected {size} parameters, got {self.params.size}")
        self.shift = np.zeros(dim) if shift is None else np.asarray(shift, dtype=float)
        self.scale = np.ones(dim) if scale is None else np.asarray(scale, dtype=float)
        self.description = f"tanh perceptron, {hidden} hidden units"

    @classmethod
    def initialised(cls, dim: int, hidden: int, seed: int, fit_to=None) -> "MLPModel":
        from .rng import make_rng

        rng = make_rng(seed)
        W = rng.standard_normal((hidden, dim)) / math.sqrt(dim)
        b = 0.1 * rng.standard_normal(hidden)
        v = 0.1 * rng.standard_normal(hidden)
        params = np.concatenate([W.ravel(), b, v, [0.0]])
        shift = scale = None
        if fit_to is not None:
            x = as_points(fit_to)
            shift, scale = x.mean(axis=0), np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
        return cls(dim, hidden, params, shift, scale)

    def _unpack(self):
        H, d = self.hidden, self.dim
        p = self.params
        W = p[: H * d].reshape(H, d)
        b = p[H * d : H * d + H]
        v = p[H * d + H : H * d + 2 * H]
        return W, b, v, p[-1]

    def _forward(self, x):
        z = (self._check(x) - self.shift) / self.scale
        W, b, v, c = self._unpack()
        a = np.tanh(z @ W.T + b)
        return z, a, a @ v + c

    def evaluate(self, x):
        return self._forward(x)[2]

    def parameter_gradient(self, x):
        z, a, _ = self._forward(x)
        _, _, v, _ = self._unpack()
        da = (1.0 - a**2) * v  # dh / d(pre-activation)
        gW = (da[:, :, None] * z[:, None, :]).reshape(len(z), -1)
        return np.concatenate([gW, da, a, np.ones((len(z), 1))], axis=1)

    def vjp(self, x, r):
        z, a, _ = self._forward(x)
        _, _, v, _ = self._unpack()
        r = np.asarray(r, dtype=float)
        da = (1.0 - a**2) * v * r[:, None]
        return np.concatenate([(da.T @ z).ravel(), da.sum(axis=0), r @ a, [r.sum()]])

    def with_params(self, params):
        return MLPModel(self.dim, self.hidden, params, self.shift, self.scale)


# --------------------------------------------------------------------------- loss


def _check_model(model: LogRatioModel, sample: LabeledTwoSample) -> None:
    if model.dim != sample.dim:
        raise ValueError(f"model dimensionality {model.dim} != sample dimensionality {sample.dim}")


def loss_from_values(h_data, h_ref, nu: float) -> LossReport:
    """Logistic loss given log-ratio values at data and reference points."""
    h_data = np.asarray(h_data, dtype=float)
    h_ref = np.asarray(h_ref, dtype=float)
    lnu = math.log(nu)
    a = softplus(lnu - h_data)
    b = nu * softplus(h_ref - lnu)
    n, m = a.size, b.size
    var = (a.var(ddof=1) / n if n > 1 else 0.0) + (b.var(ddof=1) / m if m > 1 else 0.0)
    da, db = float(a.mean()), float(b.mean())
    return LossReport(da + db, da, db, math.sqrt(var), nu)


def logistic_loss(model: LogRatioModel, sample: LabeledTwoSample, with_gradient: bool = False) -> LossReport:
    """Logistic loss of ``model`` on ``sample`` with its Monte Carlo standard error."""
    _check_model(model, sample)
    h_x = model.evaluate(sample.data)
    h_y = model.evaluate(sample.reference)
    rep = loss_from_values(h_x, h_y, sample.nu)
    if not with_gradient:
        return rep
    g = _gradient_from_values(model, sample, h_x, h_y)
    return LossReport(rep.loss, rep.data_term, rep.reference_term, rep.std_error, rep.nu, g)


def data_weights(h, nu: float) -> np.ndarray:
    """``-nu e^{-h} / (1 + nu e^{-h})``: per-point factor of the data term gradient."""
    return -sigmoid(math.log(nu) - np.asarray(h, dtype=float))


def reference_weights(h, nu: float) -> np.ndarray:
    """``e^{h} / (1 + e^{h} / nu)``: per-point factor of the reference term gradient."""
    return nu * sigmoid(np.asarray(h, dtype=float) - math.log(nu))


def _gradient_from_values(model, sample, h_x, h_y) -> np.ndarray:
    nu = sample.nu
    gx = model.vjp(sample.data, data_weights(h_x, nu) / sample.n)
    gy = model.vjp(sample.reference, reference_weights(h_y, nu) / sample.m)
    return gx + gy


def logistic_loss_gradient(model: LogRatioModel, sample: LabeledTwoSample) -> np.ndarray:
    _check_model(model, sample)
    return _gradient_from_values(
        model, sample, model.evaluate(sample.data), model.evaluate(sample.reference)
    )


def loss_objective(model: LogRatioModel, sample: LabeledTwoSample, l2: float = 0.0):
    """``w -> (J, grad J)`` for use with :func:`minimise`."""
    _check_model(model, sample)

    def objective(w):
        rep = logistic_loss(model.with_params(w), sample, with_gradient=True)
        if l2:
            return rep.loss + 0.5 * l2 * float(w @ w), rep.gradient + l2 * w
        return rep.loss, rep.gradient

    return objective


def fit_ratio(
    model: LogRatioModel, sample: LabeledTwoSample, config: OptimizerConfig | None = None, l2: float = 0.0
) -> tuple[LogRatioModel, OptimResult]:
    """Minimise the logistic loss over the parameters of ``model``."""
    result = minimise(loss_objective(model, sample, l2), model.params, config)
    return model.with_params(result.params), result


# --------------------------------------------------------------------------- oracles


def optimal_ratio_oracle(log_p: LogDensity, log_q: LogDensity) -> Callable[[np.ndarray], np.ndarray]:
    """``x -> log p(x) - log q(x)``."""

    def h(x):
        return np.asarray(log_p(x), dtype=float) - np.asarray(log_q(x), dtype=float)

    return h


def limiting_loss_at_optimum(log_p: LogDensity, log_q: LogDensity, nu: float, integrator) -> float:
    """Population loss at ``h* = log p - log q`` by deterministic quadrature.

    ``integrator`` is a :class:`contrastive.distributions.Quadrature`; both
    densities must integrate to one on it within ``integrator.norm_tol``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    x, w = integrator.nodes()
    lp = np.asarray(log_p(x), dtype=float)
    lq = np.asarray(log_q(x), dtype=float)
    p, q = np.exp(lp), np.exp(lq)
    integrator.check_normalised(w @ p, "p")
    integrator.check_normalised(w @ q, "q")
    lnu = math.log(nu)
    lmix = np.logaddexp(lp, lnu + lq)
    t1 = np.where(p > 0, p * (lp - lmix), 0.0)
    t2 = np.where(q > 0, q * (lnu + lq - lmix), 0.0)
    return float(-(w @ t1) - nu * (w @ t2))


def jsd_from_loss(loss) -> float:
    """``2 log 2 - J``: a lower bound on the Jensen-Shannon divergence, exact at ``h*``.

    Accepts a float (assumed computed at ``nu = 1``) or a :class:`LossReport`,
    which is rejected unless ``nu == 1``.
    """
    if isinstance(loss, LossReport):
        if loss.nu != 1.0:
            raise ValueError(f"JSD bound requires nu = 1, loss was computed with nu = {loss.nu}")
        loss = loss.loss
    return TWO_LOG2 - float(loss)
