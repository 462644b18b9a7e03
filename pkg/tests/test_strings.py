import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorestring.errors import ConfigurationError, DegenerateTangentError, DivergenceError
from scorestring.fields import FieldOracle, analytic_fields, make_schedule
from scorestring.integrators import GammaSchedule, StepperConfig, flow
from scorestring.strings import (
    RegimeConfig,
    StringState,
    encode_endpoints,
    geodesic_images,
    init_string_geodesic,
    mep_residual,
    reparametrize,
    reparametrize_pass,
    run_string,
    segment_lengths,
    spacing_ratio,
    string_step,
)


def bowl_oracle(center=(0.0, 0.0)):
    """Frozen V = |x - c|^2 / 2: score -(x - c), no transport."""
    c = np.asarray(center, dtype=float)
    return FieldOracle(velocity=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
                       score=lambda t, x: -(np.asarray(x, dtype=float) - c))


def zero_oracle():
    return FieldOracle(velocity=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
                       score=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)))


curves = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 4)),
                elements=st.floats(-10, 10, allow_nan=False, width=64))


# -- regime config -----------------------------------------------------------


def test_regime_constraints():
    with pytest.raises(ConfigurationError):
        RegimeConfig("transport", GammaSchedule.constant(1.0))
    with pytest.raises(ConfigurationError):
        RegimeConfig("mep", GammaSchedule.constant(1.0), temperature=0.5)
    with pytest.raises(ConfigurationError):
        RegimeConfig("principal_curve", GammaSchedule.constant(1.0), temperature=0.0)
    with pytest.raises(ConfigurationError):
        RegimeConfig("mep", ema_rate=0.0)
    with pytest.raises(ConfigurationError):
        StringState(np.zeros((2, 2)), 0.0)


# -- initialization ----------------------------------------------------------


def test_geodesic_endpoints_exact():
    z0, z1 = np.array([1.3, -0.2, 0.4]), np.array([0.1, 2.0, -1.0])
    imgs = init_string_geodesic(z0, z1, 9).images
    assert np.array_equal(imgs[0], z0) and np.array_equal(imgs[-1], z1)


def test_geodesic_stays_on_sphere():
    r = 2.5
    z0, z1 = np.array([r, 0.0, 0.0]), np.array([0.0, 0.0, r])
    norms = np.linalg.norm(geodesic_images(z0, z1, 17), axis=1)
    np.testing.assert_allclose(norms, r, atol=1e-12)


def test_geodesic_middle_image():
    imgs = init_string_geodesic(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 2).images
    np.testing.assert_allclose(imgs[1], [math.cos(math.pi / 4), math.sin(math.pi / 4)], atol=1e-15)


def test_identical_endpoints_warn():
    z = np.array([1.0, 2.0])
    with pytest.warns(RuntimeWarning):
        s = init_string_geodesic(z, z, 5)
    assert np.all(s.images == z)


def test_encode_fixed_point():
    from scorestring.fields import standard_normal_mixture

    o = analytic_fields(make_schedule("linear"), standard_normal_mixture(2))
    z0, _ = encode_endpoints(o, np.zeros(2), np.ones(2))
    assert np.all(z0 == 0.0)


def test_encode_zero_field_exact():
    xa, xb = np.array([0.3, -1.0]), np.array([2.0, 5.0])
    z0, z1 = encode_endpoints(zero_oracle(), xa, xb)
    assert np.array_equal(z0, xa) and np.array_equal(z1, xb)


def test_encode_round_trip(oracle2):
    xa, xb = np.array([-3.0, 0.0]), np.array([3.0, 0.0])
    z0, z1 = encode_endpoints(oracle2, xa, xb)
    back = flow(oracle2, np.stack([z0, z1]), np.linspace(0, 1, 401), "heun", keep_path=False).final
    assert np.linalg.norm(back[0] - xa) <= 1e-4 * np.linalg.norm(xa)
    assert np.linalg.norm(back[1] - xb) <= 1e-4 * np.linalg.norm(xb)


# -- reparametrization -------------------------------------------------------


def _nondegenerate(c):
    return np.all(segment_lengths(c) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(c=curves)
def test_reparametrize_idempotent_and_endpoints(c):
    if not _nondegenerate(c):
        return
    once = reparametrize(c)
    assert np.array_equal(once[0], c[0]) and np.array_equal(once[-1], c[-1])
    twice = reparametrize(once)
    np.testing.assert_allclose(twice, once, atol=1e-10 * max(1.0, np.abs(once).max()))
    assert spacing_ratio(once) <= 1 + 1e-6


smooth_curves = st.tuples(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=10, unique=True),
    arrays(np.float64, (3, 2), elements=st.floats(-3, 3, width=64)),
)


@settings(max_examples=30, deadline=None)
@given(curve=smooth_curves)
def test_cubic_reparametrize_spacing(curve):
    # unevenly sampled smooth arcs; cubic resampling of zigzags can loop
    us, coef = curve
    u = np.sort(np.concatenate([[0.0, 1.0], us]))
    u = u[np.concatenate([[True], np.diff(u) > 1e-3])]
    if len(u) < 3:
        return
    c = np.stack([u * (1 + abs(coef[0, 0])) + coef[1, 0] * np.sin(np.pi * u),
                  coef[0, 1] * u + coef[1, 1] * np.sin(np.pi * u)], axis=1)
    out = reparametrize(c, "cubic", tol=1e-6)
    assert np.array_equal(out[0], c[0]) and np.array_equal(out[-1], c[-1])
    assert spacing_ratio(out) <= 1 + 1e-4


def test_single_pass_points_on_polyline():
    c = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 3.0]])
    out = reparametrize_pass(c)
    np.testing.assert_allclose(out[1], [1.0, 1.0])


def test_cubic_pass_reproduces_straight_line():
    c = np.stack([np.array([0.0, 0.1, 0.5, 1.0]) * 3, np.zeros(4)], axis=1)
    out = reparametrize_pass(c, "cubic")
    np.testing.assert_allclose(out[:, 0], [0.0, 1.0, 2.0, 3.0], atol=1e-12)


# -- stepping ----------------------------------------------------------------


def test_transport_zero_field_only_time_changes():
    s = init_string_geodesic(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 6)
    new = string_step(s, zero_oracle(), 0.1)
    assert np.array_equal(new.images, s.images)
    assert new.t == pytest.approx(0.1)


def test_transport_step_is_euler_then_reparametrize(oracle2):
    s = init_string_geodesic(np.array([1.0, 0.0]), np.array([-0.5, 1.0]), 8, 0.3)
    new = string_step(s, oracle2, 0.01)
    ref = reparametrize(s.images + 0.01 * oracle2.velocity(0.3, s.images), tol=1e-8)
    np.testing.assert_allclose(new.images, ref, atol=1e-12)


def test_mep_quadratic_bowl_straightens():
    reg = RegimeConfig("mep", GammaSchedule.constant(5.0))
    e1 = np.array([1.0, 0.0])
    start = np.array([[-1.0, 0.0], [-0.5, 0.8], [0.0, 1.0], [0.5, 0.8], [1.0, 0.0]])
    # the bowl is frozen and b = 0: endpoints stay pinned at +-e1
    s = StringState(reparametrize(start), 0.0, reg)
    final, _ = run_string(s, bowl_oracle(), StepperConfig("euler", 20), contract=0.1)
    assert np.abs(final.images[:, 1]).max() < 1e-6
    np.testing.assert_array_equal(final.images[0], -e1)
    np.testing.assert_allclose(final.images[:, 0], np.linspace(-1, 1, 5), atol=1e-6)


def test_contract_violation():
    reg = RegimeConfig("mep", GammaSchedule.constant(10.0))
    s = StringState(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 0.0]]), 0.0, reg)
    with pytest.raises(ConfigurationError):
        string_step(s, bowl_oracle(), 0.01)
    string_step(s, bowl_oracle(), 0.001)


def test_nonfinite_image_index():
    def vel(t, x):
        out = np.zeros_like(x)
        out[np.abs(x[:, 1] - 0.5) < 1e-9] = np.nan
        return out

    bad = FieldOracle(velocity=vel, score=vel)
    s = StringState(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 0.0]]), 0.0)
    with pytest.raises(DivergenceError) as info:
        string_step(s, bad, 0.1)
    assert info.value.index == 1


def test_step_rejects_principal_curve():
    reg = RegimeConfig("principal_curve", GammaSchedule.constant(1.0), 1.0)
    s = StringState(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 0.0]]), 0.0, reg)
    with pytest.raises(ConfigurationError):
        string_step(s, bowl_oracle(), 0.01)


# -- full runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def encoded(oracle2):
    return encode_endpoints(oracle2, np.array([-3.0, 0.0]), np.array([3.0, 0.0]))


def test_transport_string_continuous(oracle2, encoded):
    s = init_string_geodesic(*encoded, 30)
    final, diag = run_string(s, oracle2, StepperConfig("heun", 200))
    seg = final.segment_lengths()
    assert seg.max() < 3 * seg.mean()
    assert final.t == 1.0
    assert len(diag.steps) == 201 and diag.final_logp.shape == (31,)


def test_endpoint_fidelity(oracle2, encoded):
    reg = RegimeConfig("mep", GammaSchedule(8.0, (0.1, 0.95)))
    s = init_string_geodesic(*encoded, 20, 0.0, reg)
    from scorestring.strings import string_time_grid

    cfg = StepperConfig("heun", 200)
    times = string_time_grid(s, cfg, 0.1)
    final, _ = run_string(s, oracle2, cfg, times=times)
    direct = flow(oracle2, np.stack(encoded), times, "heun", keep_path=False).final
    np.testing.assert_allclose(final.images[[0, -1]], direct, atol=1e-10)
    np.testing.assert_allclose(final.images[0], [-3.0, 0.0], atol=1e-3)


def test_smallest_string_endpoints_are_independent_flows(oracle2, encoded):
    # N=2: the endpoint pair evolves exactly as two separate probability-flow integrations
    s = init_string_geodesic(*encoded, 2)
    cfg = StepperConfig("euler", 100)
    final, _ = run_string(s, oracle2, cfg)
    for z, x in zip(encoded, final.images[[0, -1]]):
        one = flow(oracle2, z[None], cfg.grid(), "euler", keep_path=False).final[0]
        assert np.array_equal(one, x)


def test_transport_converges_first_order_in_dt(oracle2, encoded):
    s = init_string_geodesic(*encoded, 20)
    F = {n: run_string(s, oracle2, StepperConfig("euler", n))[0].images for n in (50, 100, 200)}
    d1 = np.abs(F[50] - F[100]).max()
    d2 = np.abs(F[100] - F[200]).max()
    assert 1.6 < d1 / d2 < 2.5


def test_transport_matches_flow_image_of_curve(oracle2, encoded):
    # gap to the densely sampled flow image of the initial curve shrinks with N
    gaps = []
    for N in (20, 71):
        s = init_string_geodesic(*encoded, N)
        final, _ = run_string(s, oracle2, StepperConfig("euler", 100))
        dense = flow(oracle2, geodesic_images(*encoded, 50 * N), np.linspace(0, 1, 101), "euler",
                     keep_path=False).final
        ref = reparametrize_pass(reparametrize(dense), n_out=N)
        gaps.append(np.abs(final.images - ref).max())
    assert gaps[1] < 0.5 * gaps[0]
    assert gaps[1] < 0.02


def test_spacing_after_every_step(oracle2, encoded):
    for spline, bound in (("linear", 1e-6), ("cubic", 1e-4)):
        reg = RegimeConfig("mep", GammaSchedule(4.0, (0.1, 0.95)), spline=spline)
        s = init_string_geodesic(*encoded, 15, 0.0, reg)
        ratios = []
        run_string(s, oracle2, StepperConfig("euler", 100),
                   on_step=lambda k, st_: ratios.append(spacing_ratio(st_.images)))
        assert max(ratios) <= 1 + bound


def test_mep_interior_exceeds_transported_endpoints(oracle2, encoded):
    reg = RegimeConfig("mep", GammaSchedule(8.0, (0.1, 0.95)))
    s = init_string_geodesic(*encoded, 30, 0.0, reg)
    _, diag = run_string(s, oracle2, StepperConfig("heun", 200))
    L = np.stack(diag.logp)
    assert np.any(L[:, 1:-1].max(axis=1) > L[:, [0, -1]].max(axis=1))


def test_run_string_rejects_finished_state(oracle2):
    s = StringState(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 0.0]]), 1.0)
    with pytest.raises(ConfigurationError):
        run_string(s, oracle2)


# -- MEP residual ------------------------------------------------------------


def test_residual_zero_on_straight_bowl_string():
    imgs = np.stack([np.linspace(-1, 1, 7), np.zeros(7)], axis=1)
    r = mep_residual(StringState(imgs, 0.5), bowl_oracle(), 0.5)
    assert r.shape == (5,) and np.all(r < 1e-10)


def test_residual_full_gradient_when_perpendicular():
    g = np.array([0.0, 2.0])
    tilted = FieldOracle(velocity=lambda t, x: np.zeros_like(x), score=lambda t, x: np.broadcast_to(g, np.shape(x)))
    imgs = np.stack([np.linspace(-1, 1, 5), np.zeros(5)], axis=1)
    np.testing.assert_allclose(mep_residual(StringState(imgs, 0.5), tilted), 2.0)


def test_residual_degenerate_tangent():
    imgs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DegenerateTangentError):
        mep_residual(StringState(imgs, 0.5), bowl_oracle())
