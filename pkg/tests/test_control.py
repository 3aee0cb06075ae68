import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphsoar.control import (ControlInputs, ControllerGains, Estimator, EstimatorState,
                               LinearFlightModel, PoleTargets, Target, AttitudePositionController,
                               allocate, attitude_position_controller, build_autopilot,
                               closed_loop_matrices, control_envelope, deallocate, forward_predict,
                               hover_vector, is_stabilizing, id_preset, saturate_with_priority,
                               synthesize_gains, AxisGains, N_STATE)
from morphsoar.dynamics import AirflowField, Disturbance, SensorNoise, SimulationSetup, simulate
from morphsoar.linearization import ALLOCATION, build_decoupled
from morphsoar.rotations import yaw_matrix

TH = math.radians(25.0)
LIMITS = (-math.pi / 3, math.pi / 3)
U = st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=4, max_size=4).map(np.array)


# ---- allocation

def test_allocate_zero_is_hover():
    assert np.array_equal(allocate(np.zeros(4), TH), [TH, -TH, TH, -TH])


def test_allocate_vertical_pattern():
    d = 0.1
    assert np.allclose(allocate([0, 0, 0, -d], TH), [TH + d, -TH - d, TH + d, -TH - d])


def test_allocate_roll_pattern():
    d = 0.1
    assert np.allclose(allocate([d, 0, 0, 0], TH), [TH + d, -TH + d, TH - d, -TH - d])


def test_allocation_columns_orthogonal():
    M = ALLOCATION
    assert M.dtype.kind == "i"
    assert np.array_equal(M.T @ M, 4 * np.eye(4, dtype=int))


@settings(max_examples=50, deadline=None)
@given(U, U)
def test_allocation_linear(u, v):
    lhs = allocate(u + v, TH) - allocate(np.zeros(4), TH)
    rhs = (allocate(u, TH) - allocate(np.zeros(4), TH)) + (allocate(v, TH) - allocate(np.zeros(4), TH))
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(U)
def test_deallocate_inverts(u):
    assert np.allclose(deallocate(allocate(u, TH), TH), u, atol=1e-14)


def test_control_inputs_validation():
    with pytest.raises(ValueError):
        ControlInputs.from_array([0.0, np.nan, 0.0, 0.0])
    assert ControlInputs.from_array([1, 2, 3, 4]).as_array().tolist() == [1, 2, 3, 4]


# ---- saturation

def test_feasible_input_unchanged():
    u = np.array([0.05, -0.02, 0.03, 0.01])
    out, reduced = saturate_with_priority(u, TH, LIMITS)
    assert not reduced and np.array_equal(out.as_array(), u)


def test_huge_height_clipped_first():
    out, reduced = saturate_with_priority([0.05, 0, 0, 5.0], TH, LIMITS)
    assert reduced
    assert out.u1 == 0.05
    assert 0.0 < out.u4 < 5.0
    assert np.all(np.abs(allocate(out, TH)) <= math.pi / 3 + 1e-12)


def test_huge_roll_scaled_to_boundary():
    out, reduced = saturate_with_priority([5.0, 0, 0, 0], TH, LIMITS)
    theta = allocate(out, TH)
    assert reduced and out.u1 > 0.0
    assert np.max(np.abs(theta)) == pytest.approx(math.pi / 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4))
def test_saturation_keeps_signs_and_limits(u):
    u = np.array(u)
    lo, hi = control_envelope(TH, LIMITS, math.radians(10), math.radians(30))
    out, _ = saturate_with_priority(u, TH, (lo, hi)).__iter__().__next__().as_array(), None
    assert np.all(out * u >= 0.0)
    assert np.all(np.abs(out) <= np.abs(u) + 1e-15)
    theta = allocate(out, TH)
    assert np.all(theta >= lo - 1e-12) and np.all(theta <= hi + 1e-12)


def test_envelope_bounds_each_flap():
    lo, hi = control_envelope(TH, LIMITS, math.radians(10), math.radians(30))
    h = hover_vector(TH)
    assert np.all(lo < h) and np.all(h < hi)
    assert np.allclose(np.abs(lo - h) + np.abs(hi - h), math.radians(40))


# ---- controller

def test_on_target_zero_output(constants):
    g = synthesize_gains(constants)
    x = np.zeros(N_STATE)
    x[12:16] = hover_vector(TH)
    assert np.allclose(attitude_position_controller(x, Target(), g, TH).as_array(), 0.0)


def test_roll_angle_gain_example():
    g = ControllerGains(roll=AxisGains(0.0, -0.2, 0.0, 0.0), pitch=AxisGains())
    x = np.zeros(N_STATE)
    x[6] = 0.1
    assert attitude_position_controller(x, Target(), g, TH).u1 == pytest.approx(-0.02)


def test_integrator_ramps_to_clamp():
    g = ControllerGains(roll=AxisGains(), pitch=AxisGains(), z_i=-0.1, integrator_clamp=0.05)
    c = AttitudePositionController(g, TH, LIMITS)
    x = np.zeros(N_STATE)
    x[2] = 0.1
    outs = [c(x, Target(), 0.01).u4 for _ in range(200)]
    assert np.all(np.diff(outs) <= 0.0)
    assert c.integral == pytest.approx(0.05)
    assert outs[-1] == pytest.approx(-0.1 * 0.05)


def test_integrator_freezes_on_saturation():
    g = ControllerGains(roll=AxisGains(), pitch=AxisGains(), z_p=-100.0, z_i=-1.0)
    c = AttitudePositionController(g, TH, LIMITS)
    x = np.zeros(N_STATE)
    x[2] = 1.0
    c(x, Target(), 0.01)
    assert c.saturated and c.integral == 0.0


def test_yaw_error_wraps():
    g = ControllerGains(roll=AxisGains(), pitch=AxisGains(), yaw_p=-1.0)
    x = np.zeros(N_STATE)
    x[8] = math.radians(170)
    u = attitude_position_controller(x, Target(yaw=math.radians(-170)), g, TH)
    assert u.u3 == pytest.approx(-math.radians(-20))


def test_gains_mapping_round_trip(constants):
    g = synthesize_gains(constants)
    assert ControllerGains.from_mapping(g.to_mapping()) == g


def test_pole_placement_hits_targets(constants):
    t = PoleTargets()
    g = synthesize_gains(constants, t)
    cl = closed_loop_matrices(constants, g)
    wn, z = t.attitude_wn, t.zeta
    want = complex(-z * wn, wn * math.sqrt(1 - z * z))
    ev = np.linalg.eigvals(cl["roll"])
    assert np.min(np.abs(ev - want)) < 1e-6
    assert is_stabilizing(constants, g)


def test_pole_placement_rejects_low_damping(constants):
    with pytest.raises(ValueError):
        synthesize_gains(constants, PoleTargets(zeta=0.5))


def test_id_presets(constants):
    for v, c in ((1, -0.2), (2, -0.15)):
        g = id_preset(constants, v)
        assert g.roll.angle == c
        assert is_stabilizing(constants, g)
    with pytest.raises(ValueError):
        id_preset(constants, 3)


# ---- linear model and prediction

@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3, allow_nan=False), min_size=16, max_size=16),
       st.floats(-3.0, 3.0))
def test_linear_model_matches_direct_formula(constants, xs, yaw):
    c = constants
    m = LinearFlightModel(c, TH, 0.03)
    x = np.array(xs)
    x[8] = yaw
    x[12:16] += hover_vector(TH)
    cmd = hover_vector(TH) + 0.01
    Ry = yaw_matrix(yaw)
    vh = Ry.T @ x[3:6]
    u = deallocate(x[12:16], TH)
    a, b = x[6], x[7]
    wa, wb, wg = x[9:12]
    acc_h = np.array([c.f_x_xdot * vh[0] + c.f_x_beta * b + c.f_x_u2 * u[1],
                      c.f_y_ydot * vh[1] + c.f_y_alpha * a + c.f_y_u1 * u[0],
                      c.f_z_zdot * vh[2] + c.f_z_u4 * u[3]])
    want = np.concatenate((x[3:6], Ry @ acc_h, x[9:12], [
        c.f_alpha_alpha * a + c.f_alpha_alphadot * wa + c.f_alpha_ydot * vh[1] + c.f_alpha_u1 * u[0],
        c.f_beta_beta * b + c.f_beta_betadot * wb + c.f_beta_xdot * vh[0] + c.f_beta_u2 * u[1],
        c.f_gamma_gammadot * wg + c.f_gamma_u3 * u[2]], (cmd - x[12:16]) / 0.03))
    assert np.allclose(m.f(x, cmd), want, rtol=1e-12, atol=1e-12)


def _state(constants):
    m = LinearFlightModel(constants, TH)
    x = np.zeros(N_STATE)
    x[12:16] = hover_vector(TH)
    return m, EstimatorState(x, np.eye(N_STATE) * 1e-4, 0.0, hover_vector(TH))


def test_forward_predict_zero_horizon_identity(constants):
    m, s = _state(constants)
    s.x[3] = 0.3
    out = forward_predict(s, 0.0, m)
    assert np.array_equal(out.x, s.x)


def test_forward_predict_constant_velocity(constants):
    m, s = _state(constants)
    s.x[5] = 0.5  # vertical velocity, decays through f_z_zdot only
    out = forward_predict(s, 0.04, m)
    z_exact = 0.5 * (math.exp(constants.f_z_zdot * 0.04) - 1.0) / constants.f_z_zdot
    assert out.x[2] == pytest.approx(z_exact, rel=1e-8)
    assert out.x[2] == pytest.approx(0.5 * 0.04, rel=0.05)
    assert out.time == pytest.approx(0.04)


def test_forward_predict_rejects_long_horizon(constants):
    m, s = _state(constants)
    with pytest.raises(ValueError):
        forward_predict(s, 0.2, m)
    with pytest.raises(ValueError):
        forward_predict(s, -0.01, m)


# ---- estimator

def _estimator(constants, **kw):
    est = Estimator(LinearFlightModel(constants, TH), **kw)
    est.reset(0.0, np.zeros(6), np.zeros(3), hover_vector(TH))
    return est


def test_pure_prediction_follows_model(constants):
    est = _estimator(constants)
    est.state.x[9] = 0.2
    x0 = est.state.x.copy()
    est.predict(0.05, hover_vector(TH))
    ref = est.model.step(x0, hover_vector(TH), 0.05)
    assert np.allclose(est.state.x, ref, atol=1e-12)


def test_noiseless_pose_stream_converges(constants):
    est = _estimator(constants)
    truth = np.array([0.05, -0.03, 0.02, 0.0, 0.0, 0.0])
    for k in range(1, 101):
        t = k * 0.01
        est.predict(t, hover_vector(TH))
        est.update_gyro(t, np.zeros(3))
        if k % 2 == 0 and t >= 0.04:
            est.update_pose(t, t - 0.04, truth)
    assert np.linalg.norm(est.state.x[0:3] - truth[0:3]) < 1e-3


def test_stale_and_out_of_order_poses_rejected(constants):
    est = _estimator(constants)
    est.predict(0.5, hover_vector(TH))
    assert not est.update_pose(0.5, 0.35, np.zeros(6))
    assert "old" in est.diagnostics[-1]
    assert est.update_pose(0.5, 0.46, np.zeros(6))
    assert not est.update_pose(0.5, 0.44, np.zeros(6))
    assert "out of order" in est.diagnostics[-1]


def test_covariance_stays_symmetric_psd(constants):
    est = _estimator(constants)
    rng = np.random.default_rng(0)
    for k in range(1, 60):
        t = k * 0.01
        est.predict(t, hover_vector(TH))
        est.update_gyro(t, 0.01 * rng.standard_normal(3))
        if k % 2 == 0 and t >= 0.04:
            est.update_pose(t, t - 0.04, 0.001 * rng.standard_normal(6))
    P = est.state.P
    assert np.allclose(P, P.T)
    assert np.linalg.eigvalsh(P).min() > -1e-12


def _estimation_rmse(design, constants, compensate):
    ap = build_autopilot(design, constants, synthesize_gains(constants), delay_compensation=compensate)
    ap.trace = []
    push = (Disturbance.impulse(1.0, (0.05, 0.1, 0.0)),)
    log = simulate(SimulationSetup(design, AirflowField(turbulence_intensity=0.0), ap,
                                   lambda t: Target(), 6.0, disturbances=push,
                                   noise=SensorNoise(0.0, 0.0, 0.0)))
    est = np.array([x[0:3] for _, x in ap.trace])
    return np.sqrt(np.mean((est - log.data[:, 1:4]) ** 2))


def test_delay_compensation_improves_estimate(hover_design, constants):
    on = _estimation_rmse(hover_design, constants, True)
    off = _estimation_rmse(hover_design, constants, False)
    assert on < off
