import numpy as np
import pytest

from atunlearn.gan import GeneratorSpec
from atunlearn.theory import (
    LOG2,
    GaussianPair,
    bijection_check,
    dpi_check,
    hellinger_sq_gaussian,
    jsd_estimate,
    kl_gaussian,
    kl_histogram,
    mc_hellinger_sq,
    mc_kl,
    pushforward,
    random_dpi_trials,
)


def _pair(dim, dist, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(dim)
    d = rng.standard_normal(dim)
    return GaussianPair(a, a + dist * d / np.linalg.norm(d))


def test_closed_form_trivial_values():
    assert kl_gaussian(_pair(3, 0.0)) == 0.0
    assert kl_gaussian(GaussianPair(np.zeros(4), np.eye(4)[0])) == pytest.approx(0.5)
    assert kl_gaussian(GaussianPair(np.zeros(4), np.eye(4)[0]), convention="unscaled") == pytest.approx(1.0)
    assert hellinger_sq_gaussian(_pair(3, 0.0)) == 0.0
    assert hellinger_sq_gaussian(GaussianPair(np.zeros(2), [np.sqrt(8), 0.0])) == pytest.approx(1 - np.exp(-1))
    with pytest.raises(ValueError):
        kl_gaussian(_pair(2, 1.0), convention="other")


def test_scale_enters_as_mahalanobis():
    pair = GaussianPair(np.zeros(2), np.array([1.0, 0.0]), scale=0.5)
    assert kl_gaussian(pair) == pytest.approx(2.0)


def test_mismatched_means():
    with pytest.raises(ValueError):
        GaussianPair(np.zeros(2), np.zeros(3))


def test_mc_kl_dim5():
    pair = _pair(5, 2.0)
    est, se = mc_kl(pair, 1_000_000, seed=1)
    assert abs(est - kl_gaussian(pair)) / kl_gaussian(pair) < 0.02
    assert se > 0


def test_mc_hellinger_dim3():
    pair = _pair(3, 1.0)
    est, _ = mc_hellinger_sq(pair, 1_000_000, seed=2)
    assert abs(est - hellinger_sq_gaussian(pair)) / hellinger_sq_gaussian(pair) < 0.02


def test_jsd_properties():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100_000, 2))
    assert jsd_estimate(x, x, 32) < 0.01
    a = rng.uniform(0, 1, (500, 2))
    b = rng.uniform(5, 6, (500, 2))
    assert jsd_estimate(a, b, 8) == pytest.approx(LOG2, abs=1e-6)
    y = rng.standard_normal((5000, 2)) + 0.5
    assert jsd_estimate(x[:5000], y, 16) == jsd_estimate(y, x[:5000], 16)


def test_kl_histogram_approaches_gaussian_kl():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(200_000)
    y = rng.standard_normal(200_000) + 1.0
    assert kl_histogram(x, y, 60) == pytest.approx(0.5, abs=0.05)


def test_pushforward_matches_network():
    spec = GeneratorSpec(3, (3,), 2)
    net = spec.build()
    rng = np.random.default_rng(0)
    thetas = rng.standard_normal((5, net.n_params))
    z = rng.standard_normal(3)
    out = pushforward(spec, thetas, z)
    for i in range(5):
        np.testing.assert_allclose(out[i], net(thetas[i], z[None, :])[0], rtol=1e-12)


def test_identical_distributions_hold():
    spec = GeneratorSpec(3, (3,), 2)
    mean = np.random.default_rng(1).standard_normal(spec.build().n_params)
    rec = dpi_check(GaussianPair(mean, mean, 0.5), spec, np.ones(3), n=5000, n_boot=20)
    assert rec.param_div == 0.0 and rec.holds
    assert rec.pushforward_div < 0.05


def test_dpi_dimension_check():
    with pytest.raises(ValueError):
        dpi_check(GaussianPair(np.zeros(3), np.ones(3)), GeneratorSpec(3, (3,), 2), np.ones(3))


def test_bijection_equality_case():
    rec, equal = bijection_check(delta=1.0)
    assert equal and rec.holds
    assert rec.param_div == 0.5


def test_random_trials_small_batch():
    recs = random_dpi_trials(trials=3, n=5000, seed=4)
    assert all(r.holds for r in recs)
    assert all(r.pushforward_div <= r.param_div + r.epsilon for r in recs)
