import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import optimize

from smmgmm.errors import ExpOverflow
from smmgmm.estimator import fit_one_step
from smmgmm.moments import (MODEL_NAMES, MomentData, additive_moments, build_model,
                            expanded_moments, logistic_joint_moments, mult_moments_mmom0,
                            mult_moments_mmom1, mult_moments_mmomc)
from smmgmm.numerics import expit, finite_diff_jacobian, logistic_mle

from conftest import binary_sample


def test_additive_examples():
    assert_allclose(additive_moments(1, 1, (0.5, 0.5), [1, 1]), [0, 0])
    assert_allclose(additive_moments(1, 0, (0.6, 0.19), [1, 0, 1]), [0.81, 0, 0.81])
    y = np.array([1.0, 0.0, 1.0, 1.0])
    g = additive_moments(y, np.array([1.0, 0.0, 0.0, 1.0]), (0.0, y.mean()), np.ones((4, 1)))
    assert abs(g[:, 0].mean()) < 1e-15


def test_mmom0_examples():
    assert_allclose(mult_moments_mmom0(1, 1, (0.6, 0.19), [1]), [np.exp(-0.6) - 0.19], atol=1e-12)
    assert abs(mult_moments_mmom0(1, 1, (0.6, 0.19), [1])[0] - 0.35881) <= 1e-5
    s = np.array([1.0, 0.0, 1.0])
    assert_allclose(mult_moments_mmom0(1.0, 0.0, (3.7, 0.2), s), (1.0 - 0.2) * s)
    assert_allclose(mult_moments_mmom0(0.7, 1.0, (0.0, 0.2), s), additive_moments(0.7, 1.0, (0.0, 0.2), s))


def test_mmom1_mmomc_examples():
    g1 = mult_moments_mmom1(1, 1, (0.6, -1.6607), [1])
    assert abs(g1[0] - 0.35880) <= 1e-4
    assert_allclose(g1, (1 - np.exp(-1.0607)) * np.exp(-0.6), rtol=1e-12)
    astar = -1.3
    assert_allclose(mult_moments_mmom1(np.exp(astar), 0.0, (0.4, astar), [1, 1]), [0, 0], atol=1e-15)


@settings(max_examples=100)
@given(st.floats(0, 1), st.floats(-2, 2), st.floats(-3, 3), st.floats(-4, 1),
       st.lists(st.floats(-2, 2), min_size=1, max_size=4))
def test_mmomc_is_scaled_mmom1(y, x, psi, astar, s):
    g1 = mult_moments_mmom1(y, x, (psi, astar), s)
    gc = mult_moments_mmomc(y, x, (psi, astar), s)
    assert_allclose(gc, np.exp(-astar) * g1, rtol=1e-12, atol=1e-14)


@settings(max_examples=100)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2),
       st.lists(st.floats(-2, 2), min_size=1, max_size=4))
def test_null_effect_models_coincide(y, x, alpha, s):
    assert_allclose(mult_moments_mmom0(y, x, (0.0, alpha), s), additive_moments(y, x, (0.0, alpha), s))


def test_overflow_guard():
    with pytest.raises(ExpOverflow, match="centre or rescale"):
        mult_moments_mmom0(1.0, 800.0, (1.0, 0.2), [1])
    with pytest.raises(ExpOverflow):
        mult_moments_mmomc(1.0, -100.0, (8.0, 0.0), [1])


def test_logistic_joint_examples():
    r = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    s = np.array([1.0, 1.0, 0.0])
    beta = np.array([-1.0, 0.5, 0.3, -0.2, 0.1, 0.2])
    g_a = logistic_joint_moments(1.0, 0.0, np.r_[beta, 0.7, 0.3], r, s)
    g_b = logistic_joint_moments(1.0, 0.0, np.r_[beta, -2.0, 0.3], r, s)
    assert_allclose(g_a, g_b)
    assert_allclose(g_a[6:], (expit(r @ beta) - 0.3) * s)


def test_logistic_joint_association_block_at_mle(m2_data):
    d = MomentData.from_dataset(m2_data)
    beta, _ = logistic_mle(d.r, d.y)
    model = build_model("logistic_joint", d)
    alpha = float(expit(d.r @ beta).mean())
    gbar = model.mean_moments(np.r_[beta, 0.0, alpha], d)
    assert np.max(np.abs(gbar[:6])) <= 1e-10
    assert abs(gbar[6]) <= 1e-12


def test_logistic_joint_moments_at_truth(m2_data):
    """Population-true theta gives sample moment means of order n^-1/2."""
    d = MomentData.from_dataset(m2_data)
    b = np.array([-1.518, 0.15, 0.3183, -0.5202, -0.6, 0.6])
    beta = np.array([b[0], b[1] + 0.6, b[2], b[3], b[4], b[5]])
    model = build_model("logistic_joint", d)
    g = model.moments(np.r_[beta, 0.6, 0.18997], d)
    z = np.abs(g.mean(axis=0)) / (g.std(axis=0) / np.sqrt(d.n))
    assert np.all(z < 4.0)


def test_expanded_first_block_centred():
    ds = binary_sample(1)
    d = MomentData.from_dataset(ds)
    mu = d.zc.mean(axis=0)
    for base in ("additive", "mult"):
        g = expanded_moments(base, d.y, d.x, np.r_[mu, 0.37], d.zc)
        assert np.max(np.abs(g[:, :2].mean(axis=0))) <= 1e-15
    k = d.r.shape[1]
    g = expanded_moments("logistic", d.y, d.x, np.r_[np.zeros(k), mu, 0.37], d.zc, d.r)
    assert np.max(np.abs(g[:, k:k + 2].mean(axis=0))) <= 1e-15


def test_expanded_reproduces_g_estimator_binary_instrument():
    ds = binary_sample(5, n=300, k=2)
    d = MomentData.from_dataset(ds)
    zbar = d.zc[:, 0].mean()

    def g_est(psi):  # sum (Z - zbar) Y exp(-psi X) = 0
        return np.sum((d.zc[:, 0] - zbar) * d.y * np.exp(-psi * d.x))

    root = optimize.brentq(g_est, -5, 5, xtol=1e-14)
    fit = fit_one_step("mult_expanded", d)
    assert_allclose(fit.psi0, root, atol=1e-8)


def test_expanded_just_identified_exact_fit():
    ds = binary_sample(8, n=300, k=2)
    d = MomentData.from_dataset(ds)
    model = build_model("mult_expanded", d)
    assert model.param_dim == model.moment_dim == 2
    fit = fit_one_step(model, d)
    assert np.max(np.abs(model.mean_moments(fit.theta, d))) <= 1e-8


def test_expanded_three_levels_overidentified():
    d = MomentData.from_dataset(binary_sample(8, n=300, k=3))
    model = build_model("mult_expanded", d)
    assert (model.param_dim, model.moment_dim, model.over_id_df) == (3, 4, 1)


def _random_theta(model, d, rng):
    th = rng.normal(scale=0.5, size=model.param_dim)
    if model.name in ("mult_mmom0", "logistic_plugin", "logistic_joint", "additive"):
        th[-1] = rng.uniform(0.05, 0.6)
    return th


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_jacobian_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    ds = binary_sample(11, n=100)
    d = MomentData.from_dataset(ds).with_beta(rng.normal(scale=0.5, size=6))
    model = build_model(name, d)
    for i in range(100):
        row = d.row(int(rng.integers(d.n)))
        th = _random_theta(model, d, rng)
        analytic = model.jac(row, th)
        numeric = finite_diff_jacobian(lambda t: model.g(row, t), th)
        assert np.all(np.abs(analytic - numeric) <= 1e-5 * np.maximum(1.0, np.abs(numeric)))
    th = _random_theta(model, d, rng)
    assert_allclose(model.mean_jacobian(th, d), model.jacobian(th, d).mean(axis=0), atol=1e-13)
    assert_allclose(model.mean_moments(th, d), model.moments(th, d).mean(axis=0), atol=1e-13)


def test_functional_forms_match_models():
    ds = binary_sample(2)
    d = MomentData.from_dataset(ds)
    th = np.array([0.3, 0.2])
    assert_allclose(build_model("additive", d).moments(th, d), additive_moments(d.y, d.x, th, d.s))
    assert_allclose(build_model("mult_mmom0", d).moments(th, d), mult_moments_mmom0(d.y, d.x, th, d.s))
    th = np.array([0.3, -1.2])
    assert_allclose(build_model("mult_mmom1", d).moments(th, d), mult_moments_mmom1(d.y, d.x, th, d.s))
    assert_allclose(build_model("mult_mmomc", d).moments(th, d), mult_moments_mmomc(d.y, d.x, th, d.s))
    tj = np.r_[np.linspace(-0.5, 0.5, 6), 0.4, 0.3]
    assert_allclose(build_model("logistic_joint", d).moments(tj, d),
                    logistic_joint_moments(d.y, d.x, tj, d.r, d.s))
    te = np.r_[np.linspace(-0.5, 0.5, 6), 0.3, 0.3, 0.4]
    assert_allclose(build_model("logistic_expanded", d).moments(te, d),
                    expanded_moments("logistic", d.y, d.x, te, d.zc, d.r))


def test_model_dimensions():
    d = MomentData.from_dataset(binary_sample(3))
    dims = {n: (build_model(n, d).param_dim, build_model(n, d).moment_dim) for n in MODEL_NAMES}
    assert dims["additive"] == (2, 3)
    assert dims["logistic_joint"] == (8, 9)
    assert dims["logistic_expanded"] == (9, 10)
    with pytest.raises(ValueError):
        build_model("quadratic", d)
