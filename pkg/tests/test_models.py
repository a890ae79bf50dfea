import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovsmc.gradients import finite_diff
from ovsmc.models import (
    LinearGaussian,
    ModelError,
    ModelKind,
    ModelParams,
    StochasticVolatility,
    log_emission,
    log_initial,
    log_transition,
    project_params,
    simulate,
    stationary_init,
)

from oracles import grid_integral

STD_NORMAL_AT_ZERO = -0.5 * np.log(2 * np.pi)


def test_params_reject_non_finite():
    with pytest.raises(ModelError):
        ModelParams([0.1, np.nan], ModelKind.STOCHASTIC_VOLATILITY)


def test_params_layout_checked(sv):
    model, _ = sv
    with pytest.raises(ModelError):
        model.check_params(ModelParams([0.5, 0.1], ModelKind.STOCHASTIC_VOLATILITY))
    with pytest.raises(ModelError):
        model.check_params(LinearGaussian(1, 1).pack(0.8, 1, 0.5, 0.2))


def test_params_are_read_only(lg1d):
    _, theta = lg1d
    with pytest.raises(ValueError):
        theta.values[0] = 3.0


def test_param_names():
    assert LinearGaussian(1, 1).param_names() == ["A", "B", "S_u", "S_v"]
    names = LinearGaussian(2, 1).param_names()
    assert names[:4] == ["A[0,0]", "A[0,1]", "A[1,0]", "A[1,1]"]
    assert len(names) == 4 + 2 + 4 + 1
    assert StochasticVolatility().param_names() == ["alpha", "sigma", "beta"]


class TestSimulate:
    def test_shapes_and_reproducible(self, lg1d):
        model, theta = lg1d
        a = simulate(model, theta, 100, seed=3)
        b = simulate(model, theta, 100, seed=3)
        assert a.states.shape == (101, 1) and a.observations.shape == (101, 1)
        assert a.T == 100
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.observations, b.observations)
        assert np.all(np.isfinite(a.observations))

    def test_different_seed_changes_path(self, lg1d):
        model, theta = lg1d
        assert not np.array_equal(simulate(model, theta, 10, 1).states, simulate(model, theta, 10, 2).states)

    def test_rejects_bad_length(self, lg1d):
        model, theta = lg1d
        with pytest.raises(ModelError):
            simulate(model, theta, 0, 1)

    def test_lg_stationary_variance(self):
        model = LinearGaussian(1, 1)
        traj = simulate(model, model.pack(0.0, 1.0, 1.0, 1.0), 100_000, seed=0)
        assert abs(traj.states.var() - 1.0) < 0.02

    def test_sv_stationary_std(self, sv):
        model, theta = sv
        traj = simulate(model, theta, 100_000, seed=0)
        # sigma / sqrt(1 - alpha^2) = 0.7426
        assert abs(traj.states.std() - 0.7426) < 0.02

    def test_sv_observations_scale_with_state(self, sv):
        model, theta = sv
        traj = simulate(model, theta, 20_000, seed=1)
        # E[y^2] = beta^2 E[exp(x)] = beta^2 exp(var/2)
        expected = 0.641**2 * np.exp(0.5 * 0.165**2 / (1 - 0.975**2))
        assert np.mean(traj.observations**2) == pytest.approx(expected, rel=0.1)


class TestDensities:
    def test_lg_transition_standard_normal(self):
        model = LinearGaussian(1, 1)
        ev = log_transition(model, model.pack(1.0, 1.0, 1.0, 1.0), [0.0], [0.0])
        assert ev.value[0] == pytest.approx(-0.918939, abs=1e-6)

    def test_sv_transition_mean_centred(self):
        model = StochasticVolatility()
        ev = log_transition(model, model.pack(0.5, 1.0, 1.0), [2.0], [1.0])
        assert ev.value[0] == pytest.approx(STD_NORMAL_AT_ZERO, abs=1e-12)

    def test_emissions_at_zero(self):
        sv = StochasticVolatility()
        assert log_emission(sv, sv.pack(0.5, 1.0, 1.0), [0.0], [0.0]).value[0] == pytest.approx(-0.918939, abs=1e-6)
        lg = LinearGaussian(1, 1)
        assert log_emission(lg, lg.pack(0.5, 1.0, 1.0, 1.0), [0.0], [0.0]).value[0] == pytest.approx(-0.918939, abs=1e-6)

    def test_sv_emission_rejects_nonpositive_beta(self):
        model = StochasticVolatility()
        with pytest.raises(ModelError):
            log_emission(model, model.pack(0.5, 1.0, 0.0), [0.0], [1.0])

    def test_lg_matches_scipy(self, lg2d, rng):
        from scipy import stats

        model, theta = lg2d
        p = model.unpack(theta)
        x, xp, y = rng.standard_normal((3, 2))
        ev = model.transition(theta, x, xp)
        assert ev.value[0] == pytest.approx(stats.multivariate_normal(p.A @ x, p.Q).logpdf(xp), abs=1e-12)
        ev = model.emission(theta, xp, y)
        assert ev.value[0] == pytest.approx(stats.multivariate_normal(p.B @ xp, p.R).logpdf(y), abs=1e-12)

    def test_batched_matches_single(self, lg2d, rng):
        model, theta = lg2d
        x, xp = rng.standard_normal((2, 7, 2))
        batch = model.transition(theta, x, xp)
        for i in range(7):
            one = model.transition(theta, x[i], xp[i])
            assert one.value[0] == pytest.approx(batch.value[i], abs=1e-13)
            np.testing.assert_allclose(one.grad_params[0], batch.grad_params[i], atol=1e-13)

    def test_weighted_grad_is_weighted_sum(self, lg2d, rng):
        model, theta = lg2d
        xp, y = rng.standard_normal((5, 2)), rng.standard_normal(2)
        w = rng.dirichlet(np.ones(5))
        per = model.emission(theta, xp, y).grad_params
        np.testing.assert_allclose(model.emission(theta, xp, y, weights=w).grad_params, w @ per, atol=1e-13)


def _model_cases():
    lg1 = LinearGaussian(1, 1)
    lg2 = LinearGaussian(2, 2)
    sv = StochasticVolatility()
    return [
        ("lg1", lg1, lg1.pack(0.8, 1.0, 0.5, 0.2)),
        ("lg2", lg2, lg2.pack([[0.5, 0.1], [-0.2, 0.4]], [[1.0, 0.3], [0.0, 0.8]], [[0.7, 0.1], [0.0, 0.5]], [[0.4, -0.1], [0.0, 0.6]])),
        ("sv", sv, sv.pack(0.9, 0.3, 0.7)),
    ]


def _rel(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-12)


@pytest.mark.parametrize("name,model,theta", _model_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_gradients_match_finite_differences(name, model, theta):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, xp = rng.standard_normal((2, model.d_x))
        y = rng.standard_normal(model.d_y)
        for density, args in ((model.transition, (x, xp)), (model.emission, (xp, y))):
            ev = density(theta, *args)
            fd_p = finite_diff(lambda v: density(theta.replace_values(v), *args).value[0], theta.values)
            assert _rel(ev.grad_params[0], fd_p) < 1e-6
        fd_x = finite_diff(lambda v: model.transition(theta, x, v).value[0] + model.emission(theta, v, y).value[0], xp)
        got = model.transition(theta, x, xp).grad_state[0] + model.emission(theta, xp, y).grad_state[0]
        assert _rel(got, fd_x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-0.95, 0.95),
    s=st.floats(0.1, 2.0),
    x=st.floats(-3, 3),
)
def test_lg_transition_integrates_to_one(a, s, x):
    model = LinearGaussian(1, 1)
    theta = model.pack(a, 1.0, s, 1.0)
    f = lambda xp: np.exp(model.transition(theta, np.full((xp.size, 1), x), xp[:, None]).value)
    assert grid_integral(f, a * x, s) == pytest.approx(1.0, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.01, 0.99), sigma=st.floats(0.05, 2.0), x=st.floats(-3, 3))
def test_sv_transition_integrates_to_one(alpha, sigma, x):
    model = StochasticVolatility()
    theta = model.pack(alpha, sigma, 1.0)
    f = lambda xp: np.exp(model.transition(theta, np.full((xp.size, 1), x), xp[:, None]).value)
    assert grid_integral(f, alpha * x, sigma) == pytest.approx(1.0, abs=1e-4)


class TestInitialLaw:
    def test_lg_stationary_variance(self, lg1d):
        model, theta = lg1d
        mean, cov = stationary_init(model, theta)
        assert mean[0] == 0.0
        assert cov[0, 0] == pytest.approx(0.25 / 0.36, rel=1e-12)

    def test_sv_stationary_variance(self, sv):
        model, theta = sv
        assert stationary_init(model, theta)[1][0, 0] == pytest.approx(0.55139, abs=1e-5)

    def test_zero_dynamics(self):
        model = LinearGaussian(1, 1)
        assert stationary_init(model, model.pack(0.0, 1.0, 0.7, 1.0))[1][0, 0] == pytest.approx(0.49)

    def test_multivariate_lyapunov(self, lg2d):
        model, theta = lg2d
        p = model.unpack(theta)
        _, P = stationary_init(model, theta)
        np.testing.assert_allclose(p.A @ P @ p.A.T + p.Q, P, atol=1e-12)

    def test_unstable_rejected(self):
        model = LinearGaussian(1, 1)
        with pytest.raises(ModelError):
            stationary_init(model, model.pack(1.0, 1.0, 0.5, 0.2))

    def test_log_initial_is_parameter_free(self, lg1d):
        model, theta = lg1d
        ev = log_initial(model, theta, [[0.3], [-1.0]])
        assert np.all(ev.grad_params == 0.0)
        var = 0.25 / 0.36
        assert ev.value[0] == pytest.approx(-0.5 * np.log(2 * np.pi * var) - 0.09 / (2 * var))

    def test_fixed_initial_law(self, lg1d):
        model, theta = lg1d
        fixed = model.with_fixed_init(np.array([1.0]), np.array([[2.0]]))
        mean, cov = fixed.stationary_init(theta)
        assert cov[0, 0] == pytest.approx(0.25 / 0.36)
        traj = simulate(fixed, theta, 5, 0)
        assert traj.states.shape == (6, 1)


class TestProjection:
    def test_sv_clipping(self):
        model = StochasticVolatility()
        np.testing.assert_allclose(project_params(model, model.pack(1.2, 0.5, 0.1)).values, [0.9999, 0.5, 0.1])
        np.testing.assert_allclose(project_params(model, model.pack(0.5, -0.1, 0.2)).values, [0.5, 1e-4, 0.2])

    def test_lg_identity(self, lg2d):
        model, theta = lg2d
        assert np.array_equal(project_params(model, theta).values, theta.values)

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    def test_sv_projection_is_feasible_and_idempotent(self, values):
        model = StochasticVolatility()
        once = project_params(model, model.pack(*values))
        a, s, b = once.values
        assert 0 < a < 1 and s > 0 and b > 0
        assert np.array_equal(project_params(model, once).values, once.values)
