import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scorestring.errors import CapabilityError, ConfigurationError, DivergenceError
from scorestring.fields import (
    FieldOracle,
    GaussianMixture,
    analytic_fields,
    make_schedule,
    standard_normal_mixture,
)
from scorestring.integrators import (
    GammaSchedule,
    StepperConfig,
    contract_time_grid,
    hutchinson_divergence,
    integrate_ode,
    integrate_sde,
    log_likelihood,
    standard_normal_logpdf,
    step_gamma,
)


def zero_oracle():
    return FieldOracle(
        velocity=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        score=lambda t, x: -np.asarray(x, dtype=float),
        divergence_of_velocity=lambda t, x: np.zeros(np.asarray(x).shape[:-1]),
    )


# -- configs -----------------------------------------------------------------


def test_stepper_config_validation():
    with pytest.raises(ConfigurationError):
        StepperConfig(n_steps=0)
    with pytest.raises(ConfigurationError):
        StepperConfig(t_start=0.5, t_end=0.5)
    with pytest.raises(ConfigurationError):
        StepperConfig(method="rk4")


def test_gamma_schedule_shapes():
    g = GammaSchedule(4.0, (0.2, 0.8))
    assert g(0.5) == 4.0 and g(0.1) == 0.0 and g(0.9) == 0.0
    r = GammaSchedule(4.0, (0.2, 0.8), "linear_ramp", 0.1)
    assert r(0.85) == pytest.approx(2.0)
    assert r(0.95) == 0.0
    with pytest.raises(ConfigurationError):
        GammaSchedule(-1.0)
    with pytest.raises(ConfigurationError):
        GammaSchedule(1.0, (0.9, 0.1))


@given(t=st.floats(0.0, 1.0))
def test_gamma_nonnegative(t):
    for q in ("hard_window", "linear_ramp"):
        assert GammaSchedule(3.0, (0.3, 0.6), q, 0.2)(t) >= 0.0


@pytest.mark.parametrize("method", ["euler", "heun"])
@pytest.mark.parametrize("quench", ["hard_window", "linear_ramp"])
def test_contract_grid_honours_bound(method, quench):
    g = GammaSchedule(8.0, (0.1, 0.95), quench, 0.05)
    grid = contract_time_grid(0.0, 1.0, g, 200, 0.1, method)
    assert grid[0] == 0.0 and grid[-1] == 1.0
    dts = np.diff(grid)
    assert np.all(dts > 0)
    for t, dt in zip(grid[:-1], dts):
        gam = step_gamma(g, t, dt, method)
        assert gam * gam * dt <= 0.1 * (1 + 1e-9)
    assert dts.max() <= 1.0 / 200 + 1e-15


def test_contract_grid_zero_gamma_is_uniform():
    grid = contract_time_grid(0.0, 1.0, GammaSchedule(), 50)
    np.testing.assert_allclose(grid, np.linspace(0, 1, 51))


# -- ODE ---------------------------------------------------------------------


def test_zero_field_constant_trajectory():
    traj = integrate_ode(zero_oracle(), [1.0, 2.0], StepperConfig("heun", 10))
    assert len(traj) == 11
    assert np.all(traj.states == np.array([1.0, 2.0]))
    assert traj.times[0] == 0.0


def test_origin_fixed_for_centered_gaussian():
    o = analytic_fields(make_schedule("linear"), standard_normal_mixture(2))
    traj = integrate_ode(o, np.zeros(2), StepperConfig("heun", 50))
    assert np.all(traj.states == 0.0)


def test_round_trip_appendix_c(oracle2):
    x0 = np.array([0.7, -0.4])
    fwd = integrate_ode(oracle2, x0, StepperConfig("heun", 400, 0.0, 1.0)).final
    back = integrate_ode(oracle2, fwd, StepperConfig("heun", 400, 1.0, 0.0)).final
    assert np.linalg.norm(back - x0) <= 1e-4 * np.linalg.norm(x0)


def test_divergence_error_reports_time():
    blow = FieldOracle(velocity=lambda t, x: np.where(t > 0.5, np.inf, 1.0) * np.ones_like(x),
                       score=lambda t, x: x)
    with pytest.raises(DivergenceError) as info:
        integrate_ode(blow, [0.0], StepperConfig("euler", 10))
    assert info.value.t > 0.5
    assert np.all(np.isfinite(info.value.last_state))


def _gaussian_flow_error(method, n):
    # 1-d N(m, s^2) target: the flow map is affine, x_t = mean_t + sd_t / sd_0 * (x_0 - mean_0)
    m, s = 2.0, 0.5
    o = analytic_fields(make_schedule("linear"), GaussianMixture([1.0], [[m]], [[[s * s]]]))
    x0 = np.array([0.8])
    exact = m + s * x0[0]
    x1 = integrate_ode(o, x0, StepperConfig(method, n), keep_path=False).final
    return abs(x1[0] - exact)


@pytest.mark.parametrize("method,order", [("euler", 1.0), ("heun", 2.0)])
def test_convergence_order(method, order):
    ns = np.array([50, 100, 200, 400])
    errs = np.array([_gaussian_flow_error(method, n) for n in ns])
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert abs(slope - order) <= 0.3


# -- SDE ---------------------------------------------------------------------


def test_sde_without_gamma_is_euler_ode(oracle2):
    x0 = np.array([[0.3, 0.1], [-1.0, 2.0]])
    cfg = StepperConfig("euler", 100)
    ode = integrate_ode(oracle2, x0, cfg).states
    sde = integrate_sde(oracle2, x0, GammaSchedule(), 1.0, StepperConfig("euler_maruyama", 100)).states
    assert np.array_equal(ode, sde)


def test_sde_zero_temperature_deterministic(oracle2):
    x0 = np.array([0.3, 0.1])
    cfg = StepperConfig("euler_maruyama", 100, seed=1)
    a = integrate_sde(oracle2, x0, GammaSchedule.constant(1.0), 0.0, cfg).final
    b = integrate_sde(oracle2, x0, GammaSchedule.constant(1.0), 0.0, StepperConfig("euler_maruyama", 100, seed=2)).final
    assert np.array_equal(a, b)


def test_sde_seeded_determinism(oracle2):
    x0 = np.zeros((5, 2))
    cfg = StepperConfig("euler_maruyama", 50, seed=9)
    a = integrate_sde(oracle2, x0, GammaSchedule.constant(1.0), 1.0, cfg).final
    b = integrate_sde(oracle2, x0, GammaSchedule.constant(1.0), 1.0, cfg).final
    assert np.array_equal(a, b)


def test_sde_backward_rejected(oracle2):
    with pytest.raises(ConfigurationError):
        integrate_sde(oracle2, np.zeros(2), GammaSchedule(), 1.0, StepperConfig("euler_maruyama", 5, 1.0, 0.0))


def test_langevin_stationary_variance():
    # frozen standard-normal landscape, no transport: Langevin for rho^(1/T)
    frozen = FieldOracle(velocity=lambda t, x: np.zeros_like(x), score=lambda t, x: -x)
    x0 = np.zeros((4000, 1))
    cfg = StepperConfig("euler_maruyama", 1000, 0.0, 1.0, seed=5)
    # gamma=2 over unit time with dt=1e-3: gamma^2 dt = 0.004, 4 relaxation units
    xs = integrate_sde(frozen, x0, GammaSchedule.constant(2.0), 0.5, cfg).final
    assert np.var(xs) == pytest.approx(0.5, rel=0.05)


# -- likelihood --------------------------------------------------------------


def test_likelihood_single_gaussian_1d():
    o = analytic_fields(make_schedule("linear"), GaussianMixture([1.0], [[3.0]], [[[1.0]]]))
    res = log_likelihood(o, np.array([3.0]), StepperConfig("heun", 1000))
    assert res.logp == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-3)


def test_likelihood_mixture_at_mean(oracle2, mix2):
    x = mix2.means[:1]
    res = log_likelihood(oracle2, x, StepperConfig("heun", 1000))
    assert res.logp[0] == pytest.approx(mix2.log_density(x)[0], abs=1e-3)


def test_likelihood_zero_field_is_standard_normal():
    x = np.array([[0.5, -1.5]])
    res = log_likelihood(zero_oracle(), x, StepperConfig("heun", 10))
    assert res.logp[0] == pytest.approx(standard_normal_logpdf(x)[0], abs=1e-15)
    np.testing.assert_array_equal(res.x0, x)


def test_likelihood_capability():
    bare = FieldOracle(velocity=lambda t, x: x, score=lambda t, x: x)
    with pytest.raises(CapabilityError):
        log_likelihood(bare, np.zeros((1, 2)))


def test_hutchinson_likelihood_close_to_exact(oracle2, mix2):
    x = np.array([[1.0, 0.5], [-2.0, -1.0]])
    res = log_likelihood(oracle2, x, StepperConfig("heun", 400, seed=3), "hutchinson", n_probes=64)
    np.testing.assert_allclose(res.logp, mix2.log_density(x), atol=0.05)


@settings(max_examples=5, deadline=None)
@given(t=st.floats(0.05, 0.95), x=st.lists(st.floats(-4, 4), min_size=2, max_size=2))
def test_hutchinson_unbiased(oracle2, t, x):
    x = np.array(x)
    mean, se = hutchinson_divergence(oracle2, t, x, 10_000, np.random.default_rng(0))
    exact = oracle2.divergence_of_velocity(t, x)
    assert abs(mean - exact) <= 3 * se + 1e-9


def test_hutchinson_finite_difference_fallback(oracle2):
    no_jvp = FieldOracle(velocity=oracle2.velocity, score=oracle2.score)
    x = np.array([0.5, 0.5])
    mean, se = hutchinson_divergence(no_jvp, 0.5, x, 10_000, np.random.default_rng(1))
    assert abs(mean - oracle2.divergence_of_velocity(0.5, x)) <= 3 * se + 1e-6
