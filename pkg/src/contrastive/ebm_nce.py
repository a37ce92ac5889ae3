r"""Noise-contrastive estimation (NCE) of energy-based models.

An energy-based model :math:`\phi(x; \theta) = e^{-E(x; \theta)}` is fitted by
classifying data against samples from a reference ``q`` with the log-ratio

.. math:: h(x; \theta, c) = -E(x; \theta) - \log q(x) + c,

so that the estimated density is :math:`e^{\hat c} \phi(x; \hat\theta)`.
Besides the plain fit this module has the iterative scheme (previous fit
becomes the next reference) and two gradient diagnostics relating NCE to
maximum likelihood.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core_ratio import (
    LabeledTwoSample,
    LogRatioModel,
    as_points,
    data_weights,
    logistic_loss,
    logistic_loss_gradient,
    reference_weights,
)
from .distributions import Gaussian
from .optimize import OptimizerConfig, minimise
from .rng import sub_seed


class EnergyModel:
    """Interface for ``E(x; theta)``.

    Models that can be sampled and normalised exactly (the Gaussian family)
    also implement ``sampler``, ``log_partition`` and ``log_partition_gradient``.
    """

    theta: np.ndarray
    dim: int

    def energy(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def energy_param_gradient(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def sampler(self, theta):
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    def log_partition(self, theta) -> float:
        raise NotImplementedError

    def log_partition_gradient(self, theta) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_sampler(self) -> bool:
        return type(self).sampler is not EnergyModel.sampler


class GaussianEnergy(EnergyModel):
    """``E(x; sigma) = x^2 / (2 sigma^2) - log_scale`` on the real line.

    ``theta = [sigma]``. ``log_scale`` multiplies the unnormalised model by a
    constant and exists to check that only ``c`` absorbs such factors.
    """

    dim = 1

    def __init__(self, sigma: float = 1.0, log_scale: float = 0.0):
        self.theta = np.array([float(sigma)])
        self.log_scale = float(log_scale)

    def energy(self, x, theta):
        x = as_points(x)[:, 0]
        return x**2 / (2 * theta[0] ** 2) - self.log_scale

    def energy_param_gradient(self, x, theta):
        x = as_points(x)[:, 0]
        return (-(x**2) / theta[0] ** 3)[:, None]

    def sampler(self, theta):
        return Gaussian(0.0, abs(float(theta[0])))

    def log_partition(self, theta):
        return 0.5 * math.log(2 * math.pi * theta[0] ** 2) + self.log_scale

    def log_partition_gradient(self, theta):
        return np.array([1.0 / theta[0]])


class NceRatioModel(LogRatioModel):
    """``h(x) = -E(x; theta) - log q(x) + c`` with parameters ``[theta, c]``.

    With ``fixed_c`` set, ``c`` is held at that value and the parameters are
    ``theta`` alone.
    """

    def __init__(self, model: EnergyModel, reference, params=None, fixed_c: float | None = None):
        if getattr(reference, "dim", model.dim) != model.dim:
            raise ValueError(
                f"dimensionality mismatch: model d={model.dim}, reference d={reference.dim}"
            )
        self.model = model
        self.reference = reference
        self.dim = model.dim
        self.fixed_c = fixed_c
        k = len(model.theta)
        if params is None:
            params = model.theta if fixed_c is not None else np.append(model.theta, 0.0)
        self.params = np.array(params, dtype=float).ravel()
        if self.params.size != k + (fixed_c is None):
            raise ValueError("parameter vector has the wrong length")
        self.description = "nce: log phi - log q + c"

    @property
    def theta(self) -> np.ndarray:
        return self.params[: len(self.model.theta)]

    @property
    def c(self) -> float:
        return float(self.fixed_c if self.fixed_c is not None else self.params[-1])

    def evaluate(self, x):
        x = self._check(x)
        return -self.model.energy(x, self.theta) - self.reference.log_density(x) + self.c

    def parameter_gradient(self, x):
        x = self._check(x)
        g = -self.model.energy_param_gradient(x, self.theta)
        if self.fixed_c is None:
            g = np.column_stack([g, np.ones(len(x))])
        return g

    def with_params(self, params):
        return NceRatioModel(self.model, self.reference, params, self.fixed_c)


def nce_ratio_model(model: EnergyModel, reference, c: float = 0.0) -> NceRatioModel:
    return NceRatioModel(model, reference, np.append(model.theta, c))


@dataclass
class NceEstimate:
    theta_hat: np.ndarray
    c_hat: float
    final_loss: float
    initial_loss: float
    trajectory: list[tuple[int, float]]
    seed: int
    nu: float
    config: dict = field(default_factory=dict)
    start_accuracy: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["theta_hat"] = [float(t) for t in self.theta_hat]
        d["trajectory"] = [[int(i), float(v)] for i, v in self.trajectory]
        return json.dumps(d, indent=2, sort_keys=True)


def _reference_count(n: int, nu: float) -> int:
    m = int(round(nu * n))
    if m < 1:
        raise ValueError(f"nu = {nu} gives no reference samples for n = {n}")
    return m


def nce_fit(
    model: EnergyModel,
    data,
    reference,
    nu: float,
    optimizer_config: OptimizerConfig | None = None,
    seed: int = 0,
    init_c: float = 0.0,
    init_theta=None,
) -> NceEstimate:
    """Fit ``(theta, c)`` by minimising the logistic loss against ``m = nu n`` reference draws.

    The reference sample is drawn once from ``reference.sample(m, seed)``.
    """
    data = as_points(data)
    if len(data) == 0:
        raise ValueError("data must be non-empty")
    cfg = optimizer_config or OptimizerConfig()
    y = reference.sample(_reference_count(len(data), nu), seed)
    sample = LabeledTwoSample(data, y)
    theta0 = model.theta if init_theta is None else np.asarray(init_theta, dtype=float)
    ratio = NceRatioModel(model, reference, np.append(theta0, init_c))

    def objective(w):
        rep = logistic_loss(ratio.with_params(w), sample, with_gradient=True)
        return rep.loss, rep.gradient

    res = minimise(objective, ratio.params, cfg)
    k = len(model.theta)
    return NceEstimate(
        theta_hat=res.params[:k].copy(),
        c_hat=float(res.params[k]),
        final_loss=res.value,
        initial_loss=res.trace.values[0],
        trajectory=list(enumerate(res.trace.values)),
        seed=seed,
        nu=sample.nu,
        config=asdict(cfg),
    )


def classification_accuracy(ratio: LogRatioModel, data, reference_points) -> float:
    """Balanced accuracy of the rule ``h > 0 -> data``; ties count as half right."""
    hx, hy = ratio.evaluate(data), ratio.evaluate(reference_points)
    acc_x = np.mean(np.where(hx > 0, 1.0, np.where(hx == 0, 0.5, 0.0)))
    acc_y = np.mean(np.where(hy < 0, 1.0, np.where(hy == 0, 0.5, 0.0)))
    return float(0.5 * (acc_x + acc_y))


def iterative_nce(
    model: EnergyModel,
    data,
    rounds: int,
    steps_per_round: int,
    optimizer_config: OptimizerConfig | None = None,
    initial_reference=None,
    nu: float = 1.0,
    seed: int = 0,
    held_out=None,
) -> list[NceEstimate]:
    """NCE where the fitted model of round ``t`` becomes the reference of round ``t + 1``.

    Round 0 contrasts against ``initial_reference``. Each round draws a fresh
    reference sample, warm-starts from the previous ``(theta, c)`` and runs at
    most ``steps_per_round`` iterations. ``start_accuracy`` of each estimate
    is the accuracy, on ``held_out`` data (defaults to ``data``), of the
    classifier defined by the incoming parameters and that round's reference.
    """
    if not model.has_sampler:
        raise TypeError("iterative NCE needs an energy model with an exact sampler")
    if initial_reference is None:
        raise ValueError("round 0 needs an initial reference distribution")
    data = as_points(data)
    held_out = data if held_out is None else as_points(held_out)
    base = optimizer_config or OptimizerConfig()
    cfg = OptimizerConfig(**{**asdict(base), "max_iter": steps_per_round})

    theta, c = np.array(model.theta, dtype=float), 0.0
    reference = initial_reference
    estimates = []
    for t in range(rounds):
        if t > 0:
            reference = model.sampler(theta)
        round_seed = sub_seed(seed, t)
        probe = NceRatioModel(model, reference, np.append(theta, c))
        y_probe = reference.sample(len(held_out), sub_seed(round_seed, 1))
        acc = classification_accuracy(probe, held_out, y_probe)
        est = nce_fit(model, data, reference, nu, cfg, seed=round_seed, init_c=c, init_theta=theta)
        est.start_accuracy = acc
        estimates.append(est)
        theta, c = est.theta_hat, est.c_hat
    return estimates


# --------------------------------------------------------------------------- MLE links


@dataclass
class MleGradientReport:
    theta: np.ndarray
    nu: float
    scale: float
    b_t: float
    nce_gradient: np.ndarray
    mc_nll_gradient: np.ndarray
    exact_nll_gradient: np.ndarray
    mc_std_error: np.ndarray
    partition_std_error: np.ndarray
    checked: bool
    agrees_mc: bool | None
    agrees_exact: bool | None


def mle_gradient_equivalence_check(
    model: EnergyModel, theta_t, data, m: int, seed: int, c: float | None = None
) -> MleGradientReport:
    """Compare the NCE gradient at ``theta_t`` (reference ``p(.; theta_t)``) with the NLL gradient.

    With ``c = -log Z(theta_t)`` (the default) the normalisation error ``b_t``
    vanishes and the theta-part of the NCE gradient should equal
    ``nu / (1 + nu)`` times the Monte Carlo negative log-likelihood gradient.
    The comparison to the exact NLL gradient uses the analytic partition
    gradient. Agreement is judged at 3 standard errors; if ``b_t != 0`` the
    gradients are still reported but no agreement is asserted.
    """
    data = as_points(data)
    theta_t = np.asarray(theta_t, dtype=float)
    n = len(data)
    nu = m / n
    ref = model.sampler(theta_t)
    log_z = model.log_partition(theta_t)
    c = -log_z if c is None else float(c)
    b_t = c + log_z

    y = ref.sample(m, seed)
    ratio = NceRatioModel(model, ref, np.append(theta_t, c))
    k = len(theta_t)
    nce_grad = logistic_loss_gradient(ratio, LabeledTwoSample(data, y))[:k]

    gx = -model.energy_param_gradient(data, theta_t)  # grad log phi
    gy = -model.energy_param_gradient(y, theta_t)
    mc = -(gx.mean(axis=0) - gy.mean(axis=0))
    exact = -(gx.mean(axis=0) - model.log_partition_gradient(theta_t))
    se_x = gx.std(axis=0, ddof=1) / math.sqrt(n)
    se_y = gy.std(axis=0, ddof=1) / math.sqrt(m)
    scale = nu / (1 + nu)

    checked = abs(b_t) < 1e-9
    agrees_mc = agrees_exact = None
    if checked:
        combined = scale * np.sqrt(se_x**2 + se_y**2)
        agrees_mc = bool(np.all(np.abs(nce_grad - scale * mc) <= 3 * combined))
        agrees_exact = bool(np.all(np.abs(nce_grad - scale * exact) <= 3 * scale * se_y))
    return MleGradientReport(
        theta_t, nu, scale, b_t, nce_grad, mc, exact, np.sqrt(se_x**2 + se_y**2), se_y,
        checked, agrees_mc, agrees_exact,
    )


def partition_gradient_errors(model: EnergyModel, theta_t, m_list, seeds) -> np.ndarray:
    """RMS error (over seeds) of the Monte Carlo log-partition gradient for each ``m``."""
    theta_t = np.asarray(theta_t, dtype=float)
    ref = model.sampler(theta_t)
    exact = model.log_partition_gradient(theta_t)
    out = []
    for m in m_list:
        errs = []
        for s in seeds:
            y = ref.sample(int(m), sub_seed(s, int(m)))
            mc = (-model.energy_param_gradient(y, theta_t)).mean(axis=0)
            errs.append(np.sum((mc - exact) ** 2))
        out.append(math.sqrt(np.mean(errs)))
    return np.array(out)


@dataclass
class LargeNuRow:
    nu: float
    nce_gradient: np.ndarray
    is_gradient: np.ndarray
    deviation: float
    max_data_weight_dev: float
    max_ref_weight_rel_dev: float
    ess: float
    degenerate: bool


def large_nu_gradient_check(model: EnergyModel, data, reference, nu_list, seed: int) -> list[LargeNuRow]:
    """NCE gradient with ``c = 0`` versus its ``nu -> infinity`` limit.

    The limit is the importance-sampled gradient
    ``-(1/n) sum grad log phi(x_i) + (1/m) sum (phi / q)(y_j) grad log phi(y_j)``.
    One bank of ``max(nu) n`` reference draws is drawn; each ``nu`` uses its
    first ``nu n`` points for both gradients. Rows with importance-weight
    effective sample size below 10 are flagged ``degenerate``.
    """
    data = as_points(data)
    n = len(data)
    nus = [float(v) for v in nu_list]
    bank = reference.sample(_reference_count(n, max(nus)), seed)
    theta = model.theta
    ratio = NceRatioModel(model, reference, theta, fixed_c=0.0)
    gx = -model.energy_param_gradient(data, theta)
    hx = ratio.evaluate(data)
    rows = []
    for nu in nus:
        y = bank[: _reference_count(n, nu)]
        hy = ratio.evaluate(y)
        gy = -model.energy_param_gradient(y, theta)
        nce = logistic_loss_gradient(ratio, LabeledTwoSample(data, y))
        w = np.exp(hy)
        target = -gx.mean(axis=0) + (w @ gy) / len(y)
        ess = float(w.sum() ** 2 / np.sum(w**2))
        rows.append(
            LargeNuRow(
                nu=len(y) / n,
                nce_gradient=nce,
                is_gradient=target,
                deviation=float(np.max(np.abs(nce - target))),
                max_data_weight_dev=float(np.max(np.abs(data_weights(hx, len(y) / n) + 1.0))),
                max_ref_weight_rel_dev=float(np.max(np.abs(reference_weights(hy, len(y) / n) / w - 1.0))),
                ess=ess,
                degenerate=ess < 10,
            )
        )
    return rows
