import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovsmc.gradients import finite_diff
from ovsmc.models import ModelError
from ovsmc.nn import MlpParams
from ovsmc.proposals import (
    STD_FLOOR,
    ProposalKind,
    ProposalParams,
    bootstrap,
    locally_optimal,
    locally_optimal_params,
    neural_gaussian,
    propose,
    reparam_eval,
)

from oracles import grid_integral


def zero_neural(d_x=1, d_y=1):
    lam = neural_gaussian(d_x, d_y)
    return lam.with_flat(np.zeros(lam.n_params))


def test_parameter_counts():
    assert bootstrap().n_params == 0 and locally_optimal().n_params == 0
    lam = neural_gaussian(1, 1)
    # mean net 2-3-1, std net 2-2-1
    assert lam.n_params == (2 * 3 + 3 + 3 + 1) + (2 * 2 + 2 + 2 + 1)
    np.testing.assert_array_equal(lam.with_flat(lam.flat).flat, lam.flat)
    with pytest.raises(ValueError):
        lam.with_flat(np.zeros(3))


def test_std_net_must_be_softplus():
    lam = neural_gaussian(1, 1)
    with pytest.raises(ValueError):
        ProposalParams(ProposalKind.NEURAL_GAUSSIAN, lam.mean_net, lam.mean_net)


def test_zero_nets_at_mode(lg1d):
    model, theta = lg1d
    pe = reparam_eval(zero_neural(), model, theta, [0.3], [0.1], [0.0])
    sigma = np.log(2.0) + STD_FLOOR
    assert sigma == pytest.approx(0.694147, abs=1e-6)
    assert pe.x_new[0] == 0.0
    assert pe.logq == pytest.approx(-0.5 * np.log(2 * np.pi * sigma**2), abs=1e-14)


def test_bootstrap_noise_free_push(lg1d):
    model, theta = lg1d
    pe = reparam_eval(bootstrap(), model, theta, [1.0], [0.0], [0.0])
    assert pe.x_new[0] == pytest.approx(0.8)
    assert pe.grad_lambda_logq.size == 0


def test_neural_moments_monte_carlo(lg1d, rng):
    model, theta = lg1d
    lam = neural_gaussian(1, 1, seed=2)
    lam = lam.with_flat(lam.flat + 0.3 * rng.standard_normal(lam.n_params))
    n = 100_000
    x, y = np.full((n, 1), 0.4), np.array([-0.7])
    prop = propose(lam, model, theta, x, y, rng.standard_normal((n, 1)))
    mu, sigma = prop.mu[0, 0], prop.sigma[0, 0]
    xs = prop.x_new[:, 0]
    assert abs(xs.mean() - mu) < 3 * sigma / np.sqrt(n)
    # SE of the sample variance of a Gaussian: sigma^2 sqrt(2/(n-1))
    assert abs(xs.var(ddof=1) - sigma**2) < 3 * sigma**2 * np.sqrt(2.0 / (n - 1))


def test_locally_optimal_closed_form(lg1d):
    model, theta = lg1d
    mu, Sigma = locally_optimal_params(model, theta, [1.0], [0.8])
    assert Sigma[0, 0] == pytest.approx(1 / 29, rel=1e-12)
    assert mu[0] == pytest.approx(0.8, abs=1e-12)
    mu0, _ = locally_optimal_params(model, theta, [0.0], [0.0])
    assert mu0[0] == 0.0


def test_locally_optimal_matches_quadrature(lg1d):
    model, theta = lg1d
    x, y = np.array([[1.0]]), np.array([0.8])

    def unnorm(xp):
        X = np.repeat(x, xp.size, axis=0)
        return np.exp(model.transition(theta, X, xp[:, None]).value + model.emission(theta, xp[:, None], y).value)

    z = grid_integral(unnorm, 0.8, 0.2)
    mean = grid_integral(lambda s: s * unnorm(s), 0.8, 0.2) / z
    var = grid_integral(lambda s: (s - mean) ** 2 * unnorm(s), 0.8, 0.2) / z
    assert mean == pytest.approx(0.8, abs=1e-8)
    assert var == pytest.approx(1 / 29, abs=1e-8)


def test_locally_optimal_needs_lg(sv):
    model, theta = sv
    with pytest.raises(ModelError):
        locally_optimal_params(model, theta, [0.0], [0.0])


def test_locally_optimal_density_is_normalised(lg2d, rng):
    model, theta = lg2d
    from scipy import stats

    x, y, eps = rng.standard_normal((3, 2))
    mu, Sigma = locally_optimal_params(model, theta, x, y)
    prop = propose(locally_optimal(), model, theta, x[None], y, eps[None])
    assert prop.logq[0] == pytest.approx(stats.multivariate_normal(mu, Sigma).logpdf(prop.x_new[0]), abs=1e-12)


def _composite_cases():
    rng = np.random.default_rng(8)
    for d in (1, 2):
        lam = neural_gaussian(d, d, seed=int(rng.integers(100)))
        lam = lam.with_flat(lam.flat + 0.3 * rng.standard_normal(lam.n_params))
        yield d, lam, rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal(d)


@pytest.mark.parametrize("d,lam,x,y,eps", list(_composite_cases()))
def test_lambda_gradients_match_finite_differences(d, lam, x, y, eps):
    from ovsmc.models import LinearGaussian

    model = LinearGaussian(d, d)
    theta = model.pack(np.eye(d) * 0.5, np.eye(d), np.eye(d), np.eye(d))
    pe = reparam_eval(lam, model, theta, x, y, eps)

    # log q at a fixed point, differentiated in lambda
    def logq_fixed(v):
        lv = lam.with_flat(v)
        prop = propose(lv, model, theta, x[None], y, np.zeros((1, d)))
        mu, s = prop.mu[0], prop.sigma[0]
        z = (pe.x_new - mu) / s
        return float(-0.5 * d * np.log(2 * np.pi) - np.sum(np.log(s) + 0.5 * z * z))

    fd = finite_diff(logq_fixed, lam.flat)
    assert np.linalg.norm(pe.grad_lambda_logq - fd) <= 1e-6 * np.linalg.norm(fd)

    c = np.arange(1.0, d + 1.0)
    fd_push = finite_diff(lambda v: float(c @ reparam_eval(lam.with_flat(v), model, theta, x, y, eps).x_new), lam.flat)
    assert np.linalg.norm(pe.lambda_pullback(c) - fd_push) <= 1e-6 * np.linalg.norm(fd_push)

    # composite lambda -> log q(r(eps)) at fixed eps
    full = finite_diff(lambda v: reparam_eval(lam.with_flat(v), model, theta, x, y, eps).logq, lam.flat)
    got = pe.lambda_pullback(pe.grad_x_new_logq) + pe.grad_lambda_logq
    assert np.linalg.norm(got - full) <= 1e-4 * max(np.linalg.norm(full), 1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), bias=st.floats(-50, 0))
def test_std_respects_floor(seed, bias):
    lam = neural_gaussian(1, 1, seed=seed)
    flat = lam.flat.copy()
    flat[-1] = bias  # output bias of the std network
    lam = lam.with_flat(flat)
    rng = np.random.default_rng(seed)
    from ovsmc.models import LinearGaussian

    model = LinearGaussian(1, 1)
    prop = propose(lam, model, model.pack(0.8, 1, 0.5, 0.2), rng.standard_normal((20, 1)), [0.3], rng.standard_normal((20, 1)))
    assert np.all(prop.sigma >= STD_FLOOR)
    assert np.all(np.isfinite(prop.logq))
