import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contrastive.core_ratio import (
    TWO_LOG2,
    FeatureMap,
    FixedRatio,
    LabeledTwoSample,
    LinearFeatureModel,
    MLPModel,
    fit_ratio,
    jsd_from_loss,
    limiting_loss_at_optimum,
    logistic_loss,
    logistic_loss_gradient,
    loss_objective,
    optimal_ratio_oracle,
    polynomial_model,
    quadratic_model,
    softplus,
)
from contrastive.distributions import Gaussian, Quadrature, jsd_quadrature
from contrastive.optimize import OptimizerConfig, finite_difference_check


def zero_model(dim=1):
    return FixedRatio(lambda x: np.zeros(len(x)), dim)


def linear_model(dim, w):
    return LinearFeatureModel(lambda x: x, dim, w)


# --------------------------------------------------------------------------- sample type


def test_sample_validation():
    with pytest.raises(ValueError):
        LabeledTwoSample(np.zeros((0, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        LabeledTwoSample(np.zeros((3, 2)), np.zeros((3, 1)))
    s = LabeledTwoSample(np.zeros(4), np.zeros(10))
    assert s.nu == 2.5 and s.dim == 1


def test_model_dimension_mismatch_rejected():
    s = LabeledTwoSample(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        logistic_loss(zero_model(1), s)


# --------------------------------------------------------------------------- loss values


def test_softplus_stable():
    z = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    out = softplus(z)
    assert np.all(np.isfinite(out))
    assert out[2] == pytest.approx(math.log(2))
    assert out[-1] == 1e4
    assert out[0] == 0.0


@pytest.mark.parametrize("n", [1, 7, 1000])
def test_zero_ratio_nu_one(rng, n):
    s = LabeledTwoSample(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) * 5)
    rep = logistic_loss(zero_model(3), s)
    assert abs(rep.loss - 2 * math.log(2)) < 1e-12
    assert rep.loss == pytest.approx(rep.data_term + rep.reference_term)


def test_zero_ratio_nu_two(rng):
    s = LabeledTwoSample(rng.normal(size=(50, 1)), rng.normal(size=(100, 1)))
    expected = math.log(3) + 2 * math.log(1.5)
    assert logistic_loss(zero_model(), s).loss == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.909543, abs=1e-6)


def test_identical_distributions_mc():
    p = Gaussian(0.0, 1.0)
    s = LabeledTwoSample(p.sample(100_000, 1), p.sample(100_000, 2))
    h = FixedRatio(optimal_ratio_oracle(p.log_density, p.log_density), 1)
    rep = logistic_loss(h, s)
    assert abs(rep.loss - TWO_LOG2) <= 3 * rep.std_error + 1e-12


@given(st.floats(min_value=-1e4, max_value=1e4), st.floats(min_value=0.01, max_value=100))
def test_loss_finite_for_large_ratios(c, nu):
    n = 10
    m = max(1, int(round(nu * n)))
    s = LabeledTwoSample(np.zeros((n, 1)), np.zeros((m, 1)))
    h = FixedRatio(lambda x: np.full(len(x), c), 1)
    rep = logistic_loss(h, s, with_gradient=True)
    assert math.isfinite(rep.loss) and rep.loss >= 0


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10_000))
def test_label_symmetry(n, m, seed):
    g = np.random.Generator(np.random.Philox(seed))
    x, y = g.normal(size=(n, 2)), g.normal(size=(m, 2)) + 1
    w = g.normal(size=2)
    s = LabeledTwoSample(x, y)
    forward = logistic_loss(linear_model(2, w), s).loss
    backward = logistic_loss(linear_model(2, -w), s.swapped()).loss
    # swapping roles rescales the loss by 1/nu; identical at nu = 1
    assert backward * s.nu == pytest.approx(forward, rel=1e-12, abs=1e-14)
    if n == m:
        assert backward == pytest.approx(forward, rel=1e-12)


# --------------------------------------------------------------------------- gradients


def test_gradient_symmetric_sample(rng):
    x = rng.normal(size=(200, 3))
    s = LabeledTwoSample(x, -x)
    g = logistic_loss_gradient(linear_model(3, np.zeros(3)), s)
    assert np.allclose(g, -x.mean(axis=0), atol=1e-14)


def random_models(seed, count=20):
    g = np.random.Generator(np.random.Philox(seed))
    out = []
    for i in range(count):
        d = int(g.integers(1, 4))
        x = g.normal(size=(60, d))
        y = g.normal(size=(int(g.integers(20, 120)), d)) * 1.5 + 0.3
        s = LabeledTwoSample(x, y)
        if i % 2:
            m = MLPModel.initialised(d, int(g.integers(2, 6)), seed + i)
            m = m.with_params(m.params + 0.5 * g.normal(size=m.n_params))
        else:
            m = polynomial_model(d, 2, params=0.3 * g.normal(size=FeatureMap(d, 2).size))
        out.append((m, s))
    return out


@pytest.mark.parametrize("model,sample", random_models(7))
def test_gradient_matches_finite_differences(model, sample):
    err = finite_difference_check(loss_objective(model, sample), model.params, step=1e-6)
    assert err < 1e-4


@given(st.integers(0, 2**32))
def test_mlp_parameter_gradient_matches_fd(seed):
    g = np.random.Generator(np.random.Philox(seed))
    m = MLPModel.initialised(2, 3, seed)
    m = m.with_params(m.params + g.normal(size=m.n_params))
    x = g.normal(size=(4, 2))
    jac = m.parameter_gradient(x)
    eps = 1e-6
    for k in range(m.n_params):
        e = np.zeros(m.n_params)
        e[k] = eps
        fd = (m.with_params(m.params + e).evaluate(x) - m.with_params(m.params - e).evaluate(x)) / (2 * eps)
        assert np.allclose(jac[:, k], fd, rtol=1e-5, atol=1e-8)
    r = g.normal(size=4)
    assert np.allclose(m.vjp(x, r), r @ jac)


def test_gradient_vanishes_at_fit():
    p, q = Gaussian(0.0, 1.0), Gaussian(0.5, 1.5)
    s = LabeledTwoSample(p.sample(5000, 3), q.sample(5000, 4))
    cfg = OptimizerConfig(tol=1e-8, max_iter=5000)
    fitted, res = fit_ratio(quadratic_model(1, fit_to=np.vstack([s.data, s.reference])), s, cfg)
    assert res.converged
    assert np.linalg.norm(logistic_loss_gradient(fitted, s)) < 1e-8


# --------------------------------------------------------------------------- oracles


def test_oracle_identical_is_zero(rng):
    p = Gaussian([0.0, 1.0], [1.0, 2.0])
    h = optimal_ratio_oracle(p.log_density, p.log_density)
    assert np.all(h(rng.normal(size=(20, 2))) == 0)


def test_oracle_scale_mismatch_at_origin():
    d, alpha = 10, 2.0
    h = optimal_ratio_oracle(Gaussian(0.0, 1.0, d).log_density, Gaussian(0.0, alpha, d).log_density)
    # |x|^2 (1/(2 alpha^2) - 1/2) + d log alpha at x = 0
    assert h(np.zeros((1, d)))[0] == pytest.approx(d * math.log(alpha), abs=1e-12)
    assert d * math.log(alpha) == pytest.approx(6.9315, abs=1e-4)


def test_oracle_mean_shift():
    h = optimal_ratio_oracle(Gaussian(1.0, 1.0).log_density, Gaussian(0.0, 1.0).log_density)
    xs = np.linspace(-3, 3, 13)
    assert np.allclose(h(xs), xs - 0.5, atol=1e-12)


def test_limiting_loss_identical():
    p = Gaussian(0.0, 1.0)
    Q = Quadrature.for_gaussians(p)
    assert limiting_loss_at_optimum(p.log_density, p.log_density, 1.0, Q) == pytest.approx(TWO_LOG2, abs=1e-10)


def test_limiting_loss_matches_jsd():
    p, q = Gaussian(0.0, 1.0), Gaussian(0.0, 2.0)
    Q = Quadrature.for_gaussians(p, q)
    lim = limiting_loss_at_optimum(p.log_density, q.log_density, 1.0, Q)
    assert lim == pytest.approx(TWO_LOG2 - jsd_quadrature(p.log_density, q.log_density, Q), abs=1e-6)


def test_limiting_loss_large_nu_identical():
    p = Gaussian(0.0, 1.0)
    Q = Quadrature.for_gaussians(p)
    values = []
    for nu in [1, 10, 100, 1000]:
        v = limiting_loss_at_optimum(p.log_density, p.log_density, nu, Q)
        # p = q: log(1 + nu) + nu log(1 + 1/nu)
        assert v == pytest.approx(math.log1p(nu) + nu * math.log1p(1 / nu), rel=1e-10)
        values.append(v)
    assert np.all(np.diff(values) > 0)


def test_limiting_loss_rejects_bad_quadrature():
    from contrastive.distributions import QuadratureError

    p = Gaussian(0.0, 1.0)
    narrow = Quadrature([(-1.0, 1.0)])
    with pytest.raises(QuadratureError):
        limiting_loss_at_optimum(p.log_density, p.log_density, 1.0, narrow)


def test_jsd_from_loss_values():
    assert jsd_from_loss(TWO_LOG2) == 0.0
    s = LabeledTwoSample(np.zeros((2, 1)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        jsd_from_loss(logistic_loss(zero_model(), s))


def test_jsd_from_optimal_loss_matches_quadrature():
    p, q = Gaussian(0.0, 1.0), Gaussian(0.0, 2.0)
    s = LabeledTwoSample(p.sample(100_000, 11), q.sample(100_000, 12))
    rep = logistic_loss(FixedRatio(optimal_ratio_oracle(p.log_density, q.log_density), 1), s)
    truth = jsd_quadrature(p.log_density, q.log_density, Quadrature.for_gaussians(p, q))
    assert abs(jsd_from_loss(rep) - truth) < 3 * rep.std_error


def test_fitted_bound_does_not_exceed_truth():
    p, q = Gaussian(0.0, 1.0), Gaussian(0.0, 2.0)
    train = LabeledTwoSample(p.sample(20_000, 1), q.sample(20_000, 2))
    test = LabeledTwoSample(p.sample(100_000, 3), q.sample(100_000, 4))
    truth = jsd_quadrature(p.log_density, q.log_density, Quadrature.for_gaussians(p, q))
    for model in [quadratic_model(1, fit_to=train.data), MLPModel.initialised(1, 4, 5, fit_to=train.data)]:
        fitted, _ = fit_ratio(model, train, OptimizerConfig(max_iter=300))
        rep = logistic_loss(fitted, test)
        assert jsd_from_loss(rep) <= truth + 3 * rep.std_error


def test_oracle_is_optimal_against_perturbations():
    p, q = Gaussian(0.0, 1.0), Gaussian(0.5, 2.0)
    s = LabeledTwoSample(p.sample(100_000, 21), q.sample(100_000, 22))
    oracle = optimal_ratio_oracle(p.log_density, q.log_density)
    base = logistic_loss(FixedRatio(oracle, 1), s)
    g = np.random.Generator(np.random.Philox(5))
    for _ in range(50):
        a, b, c = 0.1 * g.normal(size=3)
        pert = FixedRatio(lambda x, a=a, b=b, c=c: oracle(x) + a + b * x[:, 0] + c * np.tanh(x[:, 0]), 1)
        assert base.loss <= logistic_loss(pert, s).loss + 3 * base.std_error


def test_feature_map_monomials():
    fm = FeatureMap(2, 2)
    x = np.array([[2.0, 3.0]])
    assert fm.powers == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert np.allclose(fm(x), [[1, 2, 3, 4, 6, 9]])
    st_map = fm.standardized(np.random.default_rng(0).normal(size=(100, 2)))
    f = st_map(np.random.default_rng(0).normal(size=(100, 2)))
    assert np.allclose(f[:, 1:].mean(axis=0), 0, atol=1e-12)
    assert np.allclose(f[:, 0], 1.0)
