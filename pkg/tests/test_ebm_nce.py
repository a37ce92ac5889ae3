import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contrastive.core_ratio import (
    LabeledTwoSample,
    data_weights,
    loss_objective,
    reference_weights,
)
from contrastive.distributions import Gaussian
from contrastive.ebm_nce import (
    EnergyModel,
    GaussianEnergy,
    NceRatioModel,
    classification_accuracy,
    iterative_nce,
    large_nu_gradient_check,
    mle_gradient_equivalence_check,
    nce_fit,
    nce_ratio_model,
    partition_gradient_errors,
)
from contrastive.optimize import OptimizerConfig, finite_difference_check
from contrastive.rng import sub_seed

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


# --------------------------------------------------------------------------- model


def test_energy_gradient_matches_finite_differences(rng):
    m = GaussianEnergy()
    x = rng.normal(size=50)
    for sigma in [0.7, 1.3, 2.9]:
        theta = np.array([sigma])
        h = 1e-6
        fd = (m.energy(x, theta + h) - m.energy(x, theta - h)) / (2 * h)
        an = m.energy_param_gradient(x, theta)[:, 0]
        assert np.allclose(an, fd, rtol=1e-4, atol=1e-8)


def test_ratio_model_vanishes_when_model_equals_reference(rng):
    r = nce_ratio_model(GaussianEnergy(1.0), Gaussian(0.0, 1.0), c=-HALF_LOG_2PI)
    assert np.allclose(r.evaluate(rng.normal(size=(100, 1)) * 3), 0.0, atol=1e-12)


def test_ratio_model_constant_without_normalisation(rng):
    r = nce_ratio_model(GaussianEnergy(1.0), Gaussian(0.0, 1.0), c=0.0)
    h = r.evaluate(rng.normal(size=(100, 1)) * 3)
    assert np.allclose(h, 0.918939, atol=1e-6)


def test_ratio_model_gradient_layout(rng):
    r = nce_ratio_model(GaussianEnergy(1.5), Gaussian(0.0, 3.0), c=0.2)
    x = rng.normal(size=(7, 1))
    g = r.parameter_gradient(x)
    assert g.shape == (7, 2)
    assert np.allclose(g[:, 0], x[:, 0] ** 2 / 1.5**3)
    assert np.all(g[:, 1] == 1.0)


@given(
    sigma=st.floats(0.3, 5.0),
    c=st.floats(-5.0, 5.0),
    seed=st.integers(0, 2**32),
)
def test_ratio_model_loss_gradient_finite_differences(sigma, c, seed):
    r = nce_ratio_model(GaussianEnergy(sigma), Gaussian(0.0, 2.0), c=c)
    sample = LabeledTwoSample(Gaussian(0.0, 1.5).sample(200, seed), Gaussian(0.0, 2.0).sample(300, seed + 1))
    assert finite_difference_check(loss_objective(r, sample), r.params, step=1e-6) < 1e-4


def test_ratio_model_dimension_mismatch():
    with pytest.raises(ValueError, match="dimensionality"):
        NceRatioModel(GaussianEnergy(), Gaussian([0.0, 0.0], 1.0))


# --------------------------------------------------------------------------- fitting


@pytest.fixture(scope="module")
def large_fit():
    x = Gaussian(0.0, 2.0).sample(100_000, 11)
    return nce_fit(GaussianEnergy(1.0), x, Gaussian(0.0, 3.0), 10.0, seed=12)


def test_nce_recovers_scale_and_normaliser(large_fit):
    sigma = large_fit.theta_hat[0]
    assert sigma == pytest.approx(2.0, abs=0.05)
    assert abs(large_fit.c_hat + math.log(math.sqrt(2 * math.pi * sigma**2))) < 0.05


def test_nce_trajectory_non_increasing(large_fit):
    values = [v for _, v in large_fit.trajectory]
    assert large_fit.final_loss <= large_fit.initial_loss
    assert np.all(np.diff(values) <= 1e-12)


def test_nce_estimate_serialises(large_fit):
    d = json.loads(large_fit.to_json())
    assert d["theta_hat"] == [float(large_fit.theta_hat[0])]
    assert d["seed"] == 12
    assert d["nu"] == 10.0
    assert d["config"]["method"] == "gradient-descent"


def test_nce_rejects_empty_data():
    with pytest.raises(ValueError):
        nce_fit(GaussianEnergy(), np.empty((0, 1)), Gaussian(0.0, 1.0), 1.0)


def test_nce_well_specified_identity():
    # data drawn from q itself: the fit should return q's scale
    est = []
    for s in range(20):
        x = Gaussian(0.0, 3.0).sample(2000, sub_seed(1, s))
        est.append(nce_fit(GaussianEnergy(1.0), x, Gaussian(0.0, 3.0), 1.0, seed=sub_seed(2, s)).theta_hat[0])
    est = np.array(est)
    assert abs(est.mean() - 3.0) < 3 * est.std(ddof=1) / math.sqrt(len(est))


def test_nce_spread_non_increasing_in_nu():
    cfg = OptimizerConfig(tol=1e-8)
    spread = []
    for nu in [1, 10, 100]:
        est = []
        for s in range(20):
            x = Gaussian(0.0, 2.0).sample(1000, sub_seed(5, s))
            est.append(nce_fit(GaussianEnergy(1.0), x, Gaussian(0.0, 3.0), nu, cfg, seed=sub_seed(6, s)).theta_hat[0])
        spread.append(np.std(est, ddof=1))
    assert spread[0] >= spread[1] >= spread[2]


def test_nce_scale_invariance():
    # multiplying phi by k shifts c_hat by -log k and leaves theta_hat unchanged
    x = Gaussian(0.0, 2.0).sample(5000, 21)
    ref = Gaussian(0.0, 3.0)
    base = nce_fit(GaussianEnergy(1.0), x, ref, 2.0, seed=22, init_c=0.3)
    for k in [0.1, 7.0]:
        scaled = nce_fit(
            GaussianEnergy(1.0, log_scale=math.log(k)), x, ref, 2.0, seed=22, init_c=0.3 - math.log(k)
        )
        assert scaled.theta_hat[0] == pytest.approx(base.theta_hat[0], abs=1e-9)
        assert scaled.c_hat == pytest.approx(base.c_hat - math.log(k), abs=1e-9)
        assert len(scaled.trajectory) == len(base.trajectory)


def test_consistency_rmse_decreases_with_n():
    rmse = []
    for n in [1000, 10_000, 100_000]:
        err = []
        for s in range(20):
            x = Gaussian(0.0, 2.0).sample(n, sub_seed(31, n, s))
            err.append(nce_fit(GaussianEnergy(1.0), x, Gaussian(0.0, 3.0), 10.0, seed=sub_seed(32, n, s)).theta_hat[0] - 2.0)
        rmse.append(math.sqrt(np.mean(np.square(err))))
    assert rmse[0] > rmse[1] > rmse[2]


def test_normalisation_recovery_median():
    gaps = []
    for s in range(20):
        x = Gaussian(0.0, 2.0).sample(100_000, sub_seed(41, s))
        e = nce_fit(GaussianEnergy(1.0), x, Gaussian(0.0, 3.0), 10.0, seed=sub_seed(42, s))
        gaps.append(abs(e.c_hat + GaussianEnergy().log_partition(e.theta_hat)))
    assert np.median(gaps) < 0.05


# --------------------------------------------------------------------------- iterative


def test_iterative_requires_sampler():
    class NoSampler(EnergyModel):
        theta = np.array([1.0])
        dim = 1

    with pytest.raises(TypeError):
        iterative_nce(NoSampler(), np.zeros((3, 1)), 2, 5, initial_reference=Gaussian(0.0, 1.0))


def test_iterative_requires_initial_reference():
    with pytest.raises(ValueError):
        iterative_nce(GaussianEnergy(), np.zeros((3, 1)), 2, 5)


def test_iterative_beats_static_at_equal_budget():
    rounds, steps = 10, 3
    cfg = OptimizerConfig(tol=1e-10)
    it_err, st_err = [], []
    for s in range(20):
        x = Gaussian(0.0, 2.0).sample(1000, sub_seed(7, s))
        it = iterative_nce(
            GaussianEnergy(1.0), x, rounds, steps, cfg, initial_reference=Gaussian(0.0, 10.0), seed=sub_seed(8, s)
        )
        st_ = nce_fit(
            GaussianEnergy(1.0), x, Gaussian(0.0, 10.0), 1.0,
            OptimizerConfig(tol=1e-10, max_iter=rounds * steps), seed=sub_seed(8, s, 0),
        )
        it_err.append(abs(it[-1].theta_hat[0] - 2.0))
        st_err.append(abs(st_.theta_hat[0] - 2.0))
    assert np.median(it_err) <= np.median(st_err)


def test_iterative_fixed_point():
    x = Gaussian(0.0, 2.0).sample(20_000, 51)
    sigma_mle = math.sqrt(np.mean(x**2))
    est = iterative_nce(
        GaussianEnergy(sigma_mle), x, 4, 200, initial_reference=Gaussian(0.0, sigma_mle), seed=52
    )
    thetas = np.array([sigma_mle] + [e.theta_hat[0] for e in est])
    # NCE at nu = 1 with reference = model: sd about sigma / sqrt(n) per round
    se = sigma_mle / math.sqrt(len(x))
    assert np.all(np.abs(np.diff(thetas)) < 3 * se)


def test_iterative_start_accuracy_is_chance():
    x = Gaussian(0.0, 2.0).sample(5000, 61)
    est = iterative_nce(GaussianEnergy(1.0), x, 4, 50, initial_reference=Gaussian(0.0, 10.0), seed=62)
    se = 0.5 / math.sqrt(len(x))
    for e in est[1:]:
        assert abs(e.start_accuracy - 0.5) < 3 * se


def test_classification_accuracy_perfect_and_ties():
    r = nce_ratio_model(GaussianEnergy(1.0), Gaussian(0.0, 1.0), c=-HALF_LOG_2PI)
    assert classification_accuracy(r, np.ones((5, 1)), np.ones((5, 1))) == 0.5


# --------------------------------------------------------------------------- MLE links


@pytest.mark.parametrize("sigma_t", [1.0, 1.5, 2.0, 2.5, 3.0])
def test_mle_gradient_equivalence(sigma_t):
    x = Gaussian(0.0, 2.0).sample(100_000, 71)
    rep = mle_gradient_equivalence_check(GaussianEnergy(), [sigma_t], x, 100_000, seed=72)
    assert rep.checked and rep.b_t == 0.0
    assert rep.scale == pytest.approx(0.5)
    assert rep.agrees_mc and rep.agrees_exact


def test_mle_gradient_stationary_at_mle():
    x = Gaussian(0.0, 2.0).sample(100_000, 81)
    sigma_mle = math.sqrt(np.mean(x**2))
    rep = mle_gradient_equivalence_check(GaussianEnergy(), [sigma_mle], x, 100_000, seed=82)
    assert abs(rep.exact_nll_gradient[0]) < 1e-12
    assert abs(rep.nce_gradient[0]) < 3 * rep.scale * rep.mc_std_error[0]


def test_mle_gradient_mismatched_c_skips():
    x = Gaussian(0.0, 2.0).sample(1000, 91)
    rep = mle_gradient_equivalence_check(GaussianEnergy(), [1.5], x, 1000, seed=92, c=0.0)
    assert not rep.checked and rep.agrees_mc is None
    assert rep.b_t == pytest.approx(0.5 * math.log(2 * math.pi * 1.5**2))


def test_partition_gradient_error_rate():
    m_list = [10**3, 10**4, 10**5, 10**6]
    err = partition_gradient_errors(GaussianEnergy(), [1.5], m_list, seeds=range(10))
    slope = np.polyfit(np.log(m_list), np.log(err), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.15)
    assert err[-1] < err[0]


@pytest.fixture(scope="module")
def large_nu_rows():
    x = Gaussian(0.0, 2.0).sample(1000, 101)
    return large_nu_gradient_check(GaussianEnergy(1.8), x, Gaussian(0.0, 3.0), [1, 10, 100, 1000], seed=102)


def test_large_nu_deviation_decreasing(large_nu_rows):
    dev = [r.deviation for r in large_nu_rows]
    assert all(a > b for a, b in zip(dev, dev[1:]))
    assert not any(r.degenerate for r in large_nu_rows)


def test_large_nu_weight_limits():
    h = np.linspace(-10.0, 0.0, 1001)
    assert np.max(np.abs(data_weights(h, 1000.0) + 1.0)) < 1e-3
    assert np.max(np.abs(reference_weights(h, 1000.0) / np.exp(h) - 1.0)) < 1e-3


def test_large_nu_flags_degenerate_weights():
    # reference far narrower than phi: importance weights explode
    x = Gaussian(0.0, 2.0).sample(20, 111)
    rows = large_nu_gradient_check(GaussianEnergy(5.0), x, Gaussian(0.0, 0.2), [1], seed=112)
    assert rows[0].ess < 10 and rows[0].degenerate
