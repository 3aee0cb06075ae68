"""Control allocation, the attitude/position controller, the 16-state
estimator and delay compensation.

Controller convention: every compound input is a weighted sum of errors,
``u1 = b*alphadot + c*alpha + d*ydot_h + e*(y_h - y_target)`` and likewise
for the other axes, with positions and velocities expressed in the heading
(yaw-only) frame.  Stabilizing gains are therefore mostly negative.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import place_poles

from .linearization import ALLOCATION, DecoupledModel, DynamicsConstants, build_decoupled
from .rotations import wrap_angle, yaw_matrix

N_STATE = 16
IDX_POS, IDX_VEL, IDX_RPY, IDX_RATE, IDX_FLAP = (slice(0, 3), slice(3, 6), slice(6, 9),
                                                slice(9, 12), slice(12, 16))


@dataclass(frozen=True)
class ControlInputs:
    u1: float = 0.0
    u2: float = 0.0
    u3: float = 0.0
    u4: float = 0.0

    def as_array(self):
        return np.array([self.u1, self.u2, self.u3, self.u4], dtype=float)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (4,) or not np.all(np.isfinite(a)):
            raise ValueError("control inputs must be four finite numbers")
        return cls(*map(float, a))


def _as_u(u):
    return u.as_array() if isinstance(u, ControlInputs) else np.asarray(u, dtype=float)


def hover_vector(theta_h):
    return np.array([theta_h, -theta_h, theta_h, -theta_h], dtype=float)


def allocate(u, theta_h):
    """Flap commands ``theta_hover + M u``."""
    return hover_vector(theta_h) + ALLOCATION @ _as_u(u)


def deallocate(flap_angles, theta_h):
    """Inverse of :func:`allocate` (``M`` is orthogonal with ``M^T M = 4 I``)."""
    return ALLOCATION.T @ (np.asarray(flap_angles, dtype=float) - hover_vector(theta_h)) / 4.0


def _max_scale(fixed, direction, lo, hi):
    """Largest s in [0, 1] with lo <= fixed + s*direction <= hi, or None."""
    if np.any(fixed < lo - 1e-12) or np.any(fixed > hi + 1e-12):
        return None
    s = 1.0
    for f, d, a, b in zip(fixed, direction, lo, hi):
        if d > 0.0:
            s = min(s, (b - f) / d)
        elif d < 0.0:
            s = min(s, (a - f) / d)
    return max(0.0, s)


def saturate_with_priority(u, theta_h, limits):
    """Reduce ``u`` until its allocation respects ``limits``.

    Height (u4) is reduced first, then yaw (u3), then roll and pitch are
    scaled together.  ``limits`` is ``(lo, hi)`` with scalars or per-flap
    arrays.  Returns ``(ControlInputs, reduced)``.
    """
    lo = np.broadcast_to(np.asarray(limits[0], dtype=float), (4,))
    hi = np.broadcast_to(np.asarray(limits[1], dtype=float), (4,))
    u = _as_u(u).copy()
    base = hover_vector(theta_h)
    M = ALLOCATION.astype(float)
    theta = base + M @ u
    if np.all(theta >= lo) and np.all(theta <= hi):
        return ControlInputs.from_array(u), False
    # z first, then yaw: each shrinks toward zero with the higher-priority
    # components held.
    for j, keep in ((3, [0, 1, 2]), (2, [0, 1])):
        fixed = base + M[:, keep] @ u[keep]
        s = _max_scale(fixed, M[:, j] * u[j], lo, hi)
        if s is not None:
            u[j] *= s
            return ControlInputs.from_array(u), True
        u[j] = 0.0
    s = _max_scale(base, M[:, :2] @ u[:2], lo, hi)
    u[:2] *= 0.0 if s is None else s
    return ControlInputs.from_array(u), True


def control_envelope(theta_h, limits, inward, outward):
    """Per-flap ``(lo, hi)`` allowing each flap to close toward the flat
    position by at most ``inward`` and open by at most ``outward`` from
    hover, clipped to the mechanical ``limits``."""
    sign = np.sign(hover_vector(1.0))
    a = sign * (theta_h - inward)
    b = sign * (theta_h + outward)
    lo = np.maximum(np.minimum(a, b), limits[0])
    hi = np.minimum(np.maximum(a, b), limits[1])
    return lo, hi


# ------------------------------------------------------------------ gains

@dataclass(frozen=True)
class AxisGains:
    """``u = rate*angle_rate + angle*angle + vel*v_h + pos*(p_h - p_target)``."""

    rate: float = 0.0
    angle: float = 0.0
    vel: float = 0.0
    pos: float = 0.0


@dataclass(frozen=True)
class ControllerGains:
    roll: AxisGains = AxisGains()
    pitch: AxisGains = AxisGains()
    yaw_p: float = 0.0
    yaw_d: float = 0.0
    z_p: float = 0.0
    z_d: float = 0.0
    z_i: float = 0.0
    integrator_clamp: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        vals = [self.yaw_p, self.yaw_d, self.z_p, self.z_d, self.z_i, self.integrator_clamp]
        vals += list(dataclasses.astuple(self.roll)) + list(dataclasses.astuple(self.pitch))
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("gains must be finite")
        if self.integrator_clamp <= 0.0:
            raise ValueError("integrator clamp must be positive")

    def with_roll_angle(self, c, name=None):
        return dataclasses.replace(self, roll=dataclasses.replace(self.roll, angle=c),
                                   name=name or self.name)

    def to_mapping(self):
        m = {"name": self.name}
        for ax in ("roll", "pitch"):
            for k, v in dataclasses.asdict(getattr(self, ax)).items():
                m[f"{ax}_{k}"] = repr(float(v))
        for k in ("yaw_p", "yaw_d", "z_p", "z_d", "z_i", "integrator_clamp"):
            m[k] = repr(float(getattr(self, k)))
        return m

    @classmethod
    def from_mapping(cls, m):
        m = dict(m)
        name = m.pop("name", "custom")
        axes = {}
        for ax in ("roll", "pitch"):
            axes[ax] = AxisGains(**{k: float(m.pop(f"{ax}_{k}", 0.0))
                                    for k in ("rate", "angle", "vel", "pos")})
        rest = {k: float(v) for k, v in m.items()}
        return cls(axes["roll"], axes["pitch"], name=name, **rest)


def _pair(wn, zeta):
    re = -zeta * wn
    im = wn * math.sqrt(max(1.0 - zeta * zeta, 0.0))
    if im == 0.0:
        return [re, re * 1.0001]
    return [complex(re, im), complex(re, -im)]


def _place(A, B, poles):
    K = place_poles(A, B.reshape(-1, 1), poles).gain_matrix
    return -K.ravel()  # u = -K x  ->  controller gains


@dataclass(frozen=True)
class PoleTargets:
    attitude_wn: float = 6.0
    lateral_wn: float = 2.0
    yaw_wn: float = 6.0
    z_wn: float = 4.0
    z_integrator: float = 2.0
    zeta: float = 0.8


def synthesize_gains(constants: DynamicsConstants, targets: PoleTargets = PoleTargets(),
                     name="pole-placement") -> ControllerGains:
    """Pole placement on each decoupled block; every target pair has damping
    ratio ``targets.zeta``."""
    if targets.zeta < 0.7:
        raise ValueError("damping ratio below 0.7")
    m = build_decoupled(constants)
    z = targets.zeta
    att = _pair(targets.attitude_wn, z) + _pair(targets.lateral_wn, z)
    kr = _place(m.roll.A, m.roll.B, att)      # (alpha, alphadot, y, ydot)
    kp = _place(m.pitch.A, m.pitch.B, att)
    ky = _place(m.yaw.A, m.yaw.B, _pair(targets.yaw_wn, z))
    # Vertical block augmented with the integral of the z error.
    Av = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, constants.f_z_zdot]])
    Bv = np.array([0.0, 0.0, constants.f_z_u4])
    kz = _place(Av, Bv, _pair(targets.z_wn, z) + [-targets.z_integrator])
    return ControllerGains(
        roll=AxisGains(rate=kr[1], angle=kr[0], vel=kr[3], pos=kr[2]),
        pitch=AxisGains(rate=kp[1], angle=kp[0], vel=kp[3], pos=kp[2]),
        yaw_p=ky[0], yaw_d=ky[1], z_i=kz[0], z_p=kz[1], z_d=kz[2], name=name)


ID_ROLL_ANGLE_GAINS = {1: -0.2, 2: -0.15}


def id_preset(constants: DynamicsConstants, variant: int, base: ControllerGains | None = None):
    """Identification controller: synthesized gains with the fixed roll
    angle gain of ``variant`` (1 or 2) substituted."""
    if variant not in ID_ROLL_ANGLE_GAINS:
        raise ValueError("variant must be 1 or 2")
    base = base or synthesize_gains(constants)
    return base.with_roll_angle(ID_ROLL_ANGLE_GAINS[variant], name=f"id-variant{variant}")


def closed_loop_matrices(constants: DynamicsConstants, gains: ControllerGains):
    """Closed-loop state matrices of the decoupled blocks (vertical block
    augmented with the integrator state)."""
    m = build_decoupled(constants)
    r, p = gains.roll, gains.pitch
    out = {
        "roll": m.roll.A + np.outer(m.roll.B, [r.angle, r.rate, r.pos, r.vel]),
        "pitch": m.pitch.A + np.outer(m.pitch.B, [p.angle, p.rate, p.pos, p.vel]),
        "yaw": m.yaw.A + np.outer(m.yaw.B, [gains.yaw_p, gains.yaw_d]),
    }
    Av = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, constants.f_z_zdot]])
    Bv = np.array([0.0, 0.0, constants.f_z_u4])
    out["vertical"] = Av + np.outer(Bv, [gains.z_i, gains.z_p, gains.z_d])
    return out


def is_stabilizing(constants: DynamicsConstants, gains: ControllerGains):
    return all(np.all(np.linalg.eigvals(A).real < 0.0)
               for A in closed_loop_matrices(constants, gains).values())


# ------------------------------------------------------------- controller

@dataclass(frozen=True)
class Target:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    yaw_rate: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))


class AttitudePositionController:
    """Proportional controller with a clamped z integrator.

    The integrator freezes while the output is being reduced by
    :func:`saturate_with_priority`.
    """

    def __init__(self, gains: ControllerGains, theta_h, limits):
        self.gains = gains
        self.theta_h = float(theta_h)
        self.limits = tuple(limits)
        self.integral = 0.0
        self.saturated = False

    def reset(self):
        self.integral = 0.0
        self.saturated = False

    def raw(self, x, target: Target):
        g = self.gains
        p, v, rpy, w = x[IDX_POS], x[IDX_VEL], x[IDX_RPY], x[IDX_RATE]
        Ry = yaw_matrix(rpy[2])
        e_h = Ry.T @ (p - np.asarray(target.position, dtype=float))
        v_h = Ry.T @ (v - np.asarray(target.velocity, dtype=float))
        u1 = g.roll.rate * w[0] + g.roll.angle * rpy[0] + g.roll.vel * v_h[1] + g.roll.pos * e_h[1]
        u2 = g.pitch.rate * w[1] + g.pitch.angle * rpy[1] + g.pitch.vel * v_h[0] + g.pitch.pos * e_h[0]
        u3 = g.yaw_p * wrap_angle(rpy[2] - target.yaw) + g.yaw_d * (w[2] - target.yaw_rate)
        u4 = g.z_p * e_h[2] + g.z_d * v_h[2] + g.z_i * self.integral
        return np.array([u1, u2, u3, u4])

    def __call__(self, x, target: Target, dt=0.0):
        """Compound inputs for estimate ``x`` (16-vector or EstimatorState)."""
        x = x.x if isinstance(x, EstimatorState) else np.asarray(x, dtype=float)
        u = self.raw(x, target)
        out, reduced = saturate_with_priority(u, self.theta_h, self.limits)
        self.saturated = reduced
        if dt > 0.0 and not reduced:
            ez = x[2] - float(np.asarray(target.position)[2])
            clamp = self.gains.integrator_clamp
            self.integral = min(max(self.integral + ez * dt, -clamp), clamp)
        return out


def attitude_position_controller(estimate, target: Target, gains: ControllerGains, theta_h,
                                 limits=(-math.pi / 3, math.pi / 3), integral=0.0):
    """Stateless form: compound inputs for one estimate."""
    c = AttitudePositionController(gains, theta_h, limits)
    c.integral = integral
    return c(estimate, target)


# -------------------------------------------------------------- estimator

@dataclass
class EstimatorState:
    x: np.ndarray
    P: np.ndarray
    time: float = 0.0
    commands: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).copy()
        self.P = np.asarray(self.P, dtype=float).copy()
        if self.x.shape != (N_STATE,) or self.P.shape != (N_STATE, N_STATE):
            raise ValueError("estimator state must be 16-dimensional")
        if self.commands is not None:
            self.commands = np.asarray(self.commands, dtype=float).copy()

    @property
    def position(self):
        return self.x[IDX_POS]

    @property
    def velocity(self):
        return self.x[IDX_VEL]

    @property
    def rpy(self):
        return self.x[IDX_RPY]

    @property
    def rates(self):
        return self.x[IDX_RATE]

    @property
    def flaps(self):
        return self.x[IDX_FLAP]

    def copy(self):
        return EstimatorState(self.x, self.P, self.time, self.commands)


class LinearFlightModel:
    """Decoupled hover model in the heading frame, rotated to the world by
    the estimated yaw; flap states follow the servo lag."""

    def __init__(self, model: DecoupledModel | DynamicsConstants, theta_h, servo_tau=0.03):
        if isinstance(model, DynamicsConstants):
            model = build_decoupled(model)
        self.model = model
        self.c = model.constants
        self.theta_h = float(theta_h)
        self.tau = float(servo_tau)
        c = self.c
        D = ALLOCATION.T / 4.0
        self._Kv = np.diag([c.f_x_xdot, c.f_y_ydot, c.f_z_zdot])
        self._Kr = np.array([[0.0, c.f_x_beta, 0.0], [c.f_y_alpha, 0.0, 0.0], [0.0, 0.0, 0.0]])
        self._Ku = np.array([[0.0, c.f_x_u2, 0.0, 0.0], [c.f_y_u1, 0.0, 0.0, 0.0],
                             [0.0, 0.0, 0.0, c.f_z_u4]]) @ D
        self._Wv = np.array([[0.0, c.f_alpha_ydot, 0.0], [c.f_beta_xdot, 0.0, 0.0], [0.0, 0.0, 0.0]])
        base = np.zeros((N_STATE, N_STATE))
        base[IDX_POS, IDX_VEL] = np.eye(3)
        base[IDX_RPY, IDX_RATE] = np.eye(3)
        base[IDX_RATE, IDX_RPY] = np.diag([c.f_alpha_alpha, c.f_beta_beta, 0.0])
        base[IDX_RATE, IDX_RATE] = np.diag([c.f_alpha_alphadot, c.f_beta_betadot, c.f_gamma_gammadot])
        base[IDX_RATE, IDX_FLAP] = np.diag([c.f_alpha_u1, c.f_beta_u2, c.f_gamma_u3]) @ D[:3]
        if self.tau > 0.0:
            base[IDX_FLAP, IDX_FLAP] = -np.eye(4) / self.tau
        self._base = base
        self._hover = hover_vector(self.theta_h)

    def matrices(self, yaw):
        """State matrix and flap-offset vector at heading ``yaw``."""
        Ry = yaw_matrix(yaw)
        A = self._base.copy()
        A[IDX_VEL, IDX_VEL] = Ry @ self._Kv @ Ry.T
        A[IDX_VEL, IDX_RPY] = Ry @ self._Kr
        A[IDX_VEL, IDX_FLAP] = Ry @ self._Ku
        A[IDX_RATE, IDX_VEL] = self._Wv @ Ry.T
        off = -A[:, IDX_FLAP] @ self._hover
        off[IDX_FLAP] = 0.0
        return A, off

    def f(self, x, commands):
        A, off = self.matrices(x[8])
        out = A @ x + off
        if self.tau > 0.0 and commands is not None:
            out[IDX_FLAP] += np.asarray(commands, dtype=float) / self.tau
        elif commands is None:
            out[IDX_FLAP] = 0.0
        return out

    def step(self, x, commands, dt):
        """RK4 step with the heading frozen at its initial value."""
        A, off = self.matrices(x[8])
        if commands is None:
            A[IDX_FLAP] = 0.0
            off[IDX_FLAP] = 0.0
        elif self.tau > 0.0:
            off[IDX_FLAP] += np.asarray(commands, dtype=float) / self.tau
        k1 = A @ x + off
        k2 = A @ (x + 0.5 * dt * k1) + off
        k3 = A @ (x + 0.5 * dt * k2) + off
        k4 = A @ (x + dt * k3) + off
        out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[8] = wrap_angle(out[8])
        return out

    def jacobian(self, x, commands, eps=1e-6):
        """Exact in every state but yaw, which is differenced numerically."""
        A, _ = self.matrices(x[8])
        J = A.copy()
        if commands is None:
            J[IDX_FLAP] = 0.0
        xp = x.copy()
        xp[8] += eps
        J[:, 8] = (self.f(xp, commands) - self.f(x, commands)) / eps
        return J


MAX_HORIZON = 0.1


def forward_predict(estimate: EstimatorState, horizon, linear_model: LinearFlightModel,
                    max_step=0.01) -> EstimatorState:
    """Propagate the estimate by ``horizon`` seconds through the linear model
    (covariance unchanged)."""
    if not 0.0 <= horizon <= MAX_HORIZON + 1e-12:
        raise ValueError(f"prediction horizon must lie in [0, {MAX_HORIZON}] s")
    out = estimate.copy()
    if horizon == 0.0:
        return out
    n = max(1, int(math.ceil(horizon / max_step - 1e-9)))
    h = horizon / n
    for _ in range(n):
        out.x = linear_model.step(out.x, out.commands, h)
    out.time = estimate.time + horizon
    return out


@dataclass(frozen=True)
class EstimatorNoise:
    """Process noise spectral densities and measurement standard deviations."""

    accel: float = 1.0          # m/s^2 / sqrt(Hz) on velocity
    ang_accel: float = 20.0     # rad/s^2 / sqrt(Hz) on body rates
    flap: float = 0.05          # rad / sqrt(s) on flap states
    pose_position: float = 0.001
    pose_angle: float = math.radians(0.2)
    gyro: float = 0.01


class Estimator:
    """Extended Kalman filter on the 16-value state.

    ``predict`` runs at the control rate; ``update_gyro`` fuses body rates and
    ``update_pose`` fuses delayed position/attitude.  With
    ``delay_compensation`` the delayed pose is carried forward to the current
    time through :func:`forward_predict` before fusion; otherwise it is fused
    as if it were current.
    """

    def __init__(self, linear_model: LinearFlightModel, noise: EstimatorNoise = EstimatorNoise(),
                 delay_compensation=True, stale_after=0.1, history=64):
        self.model = linear_model
        self.noise = noise
        self.delay_compensation = delay_compensation
        self.stale_after = stale_after
        self.history = deque(maxlen=history)
        self.state = None
        self.last_pose_time = -math.inf
        self.last_gyro_time = -math.inf
        self.diagnostics = []

    def reset(self, time, pose, rates, flap_angles):
        x = np.zeros(N_STATE)
        x[IDX_POS] = pose[0:3]
        x[IDX_RPY] = pose[3:6]
        x[IDX_RATE] = rates
        x[IDX_FLAP] = flap_angles
        P = np.diag(np.r_[np.full(3, 1e-4), np.full(3, 1e-2), np.full(3, 1e-4),
                          np.full(3, 1e-2), np.full(4, 1e-4)])
        self.state = EstimatorState(x, P, time, np.asarray(flap_angles, dtype=float))
        self.history.clear()
        self.history.append((time, self.state.x.copy(), self.state.P.copy()))
        self.last_pose_time = -math.inf
        self.last_gyro_time = -math.inf

    def _Q(self, dt):
        n = self.noise
        q = np.zeros(N_STATE)
        q[IDX_POS] = 1e-8
        q[IDX_VEL] = n.accel ** 2 * dt
        q[IDX_RPY] = 1e-8
        q[IDX_RATE] = n.ang_accel ** 2 * dt
        q[IDX_FLAP] = n.flap ** 2 * dt
        return np.diag(q)

    def predict(self, time, commands=None):
        s = self.state
        dt = time - s.time
        if dt < 0.0:
            raise ValueError("estimator time must not go backwards")
        if commands is not None:
            s.commands = np.asarray(commands, dtype=float).copy()
        if dt > 0.0:
            J = self.model.jacobian(s.x, s.commands)
            F = np.eye(N_STATE) + J * dt + 0.5 * (J @ J) * dt * dt
            s.x = self.model.step(s.x, s.commands, dt)
            s.P = F @ s.P @ F.T + self._Q(dt)
            s.P = 0.5 * (s.P + s.P.T)
            s.time = time
        self._record()
        return s

    def _fuse(self, H, z, R, angle_rows=()):
        s = self.state
        r = z - H @ s.x
        for i in angle_rows:
            r[i] = wrap_angle(r[i])
        S = H @ s.P @ H.T + R
        K = np.linalg.solve(S, H @ s.P).T
        s.x = s.x + K @ r
        s.x[8] = wrap_angle(s.x[8])
        IKH = np.eye(N_STATE) - K @ H
        s.P = IKH @ s.P @ IKH.T + K @ R @ K.T
        s.P = 0.5 * (s.P + s.P.T)

    def update_gyro(self, time, omega):
        if time < self.last_gyro_time:
            self.diagnostics.append(f"gyro sample at t={time:.3f} out of order; rejected")
            return False
        self.last_gyro_time = time
        H = np.zeros((3, N_STATE))
        H[:, IDX_RATE] = np.eye(3)
        self._fuse(H, np.asarray(omega, dtype=float), np.eye(3) * self.noise.gyro ** 2)
        self._record()
        return True

    def _record(self):
        s = self.state
        item = (s.time, s.x.copy(), s.P.copy())
        if self.history and self.history[-1][0] >= s.time:
            self.history[-1] = item
        else:
            self.history.append(item)

    def _history_at(self, t):
        best = None
        for item in self.history:
            if item[0] <= t + 1e-9:
                best = item
            else:
                break
        return best

    def update_pose(self, time_now, time_measured, pose):
        """Fuse a pose ``(x, y, z, roll, pitch, yaw)`` measured at
        ``time_measured``.  Returns False when rejected."""
        if time_measured <= self.last_pose_time:
            self.diagnostics.append(f"pose at t={time_measured:.3f} out of order; rejected")
            return False
        age = time_now - time_measured
        if age > self.stale_after + 1e-9:
            self.diagnostics.append(f"pose at t={time_measured:.3f} is {age * 1e3:.0f} ms old; rejected")
            return False
        self.last_pose_time = time_measured
        pose = np.asarray(pose, dtype=float)
        n = self.noise
        R = np.diag(np.r_[np.full(3, n.pose_position ** 2), np.full(3, n.pose_angle ** 2)])
        H = np.zeros((6, N_STATE))
        H[0:3, IDX_POS] = np.eye(3)
        H[3:6, IDX_RPY] = np.eye(3)
        if not (self.delay_compensation and age > 0.0):
            self._fuse(H, pose, R, angle_rows=(5,))
            self._record()
            return True
        # Correct the buffered estimate at the measurement time, then carry
        # the correction forward to the present through the model.
        past = self._history_at(time_measured)
        if past is None:
            self._fuse(H, pose, R, angle_rows=(5,))
            self._record()
            return True
        _, x_then, P_then = past
        r = pose - H @ x_then
        r[5] = wrap_angle(r[5])
        S = H @ P_then @ H.T + R
        K = np.linalg.solve(S, H @ P_then).T
        delta = K @ r
        # Push the correction through every buffered estimate after the
        # measurement time so later delayed poses see it too.
        items = list(self.history)
        start = next(i for i, it in enumerate(items) if it[0] >= past[0] - 1e-12)
        cmds = self.state.commands
        for i in range(start, len(items)):
            t_i, x_i, P_i = items[i]
            if i > start:
                t_prev, x_prev, _ = items[i - 1]
                h = t_i - t_prev
                if h > 0.0:
                    base = EstimatorState(x_prev, P_i, t_prev, cmds)
                    moved = base.copy()
                    moved.x = x_prev + delta
                    delta = (forward_predict(moved, min(h, MAX_HORIZON), self.model).x
                             - forward_predict(base, min(h, MAX_HORIZON), self.model).x)
            items[i] = (t_i, x_i + delta, P_i)
        self.history.clear()
        self.history.extend(items)
        s = self.state
        s.x = items[-1][1].copy()
        s.x[8] = wrap_angle(s.x[8])
        S_now = H @ s.P @ H.T + R
        K_now = np.linalg.solve(S_now, H @ s.P).T
        IKH = np.eye(N_STATE) - K_now @ H
        s.P = IKH @ s.P @ IKH.T + K_now @ R @ K_now.T
        s.P = 0.5 * (s.P + s.P.T)
        self._record()
        return True


class Autopilot:
    """Estimator plus controller, driven by :func:`morphsoar.dynamics.simulate`."""

    def __init__(self, estimator: Estimator, controller: AttitudePositionController,
                 control_dt=0.01):
        self.estimator = estimator
        self.controller = controller
        self.control_dt = control_dt
        self.commands = None
        # Set to a list to collect (time, estimate) at every control tick.
        self.trace = None

    def reset(self, time, pose, rates, flap_angles):
        self.estimator.reset(time, pose, rates, flap_angles)
        self.controller.reset()
        self.commands = np.asarray(flap_angles, dtype=float).copy()

    def on_gyro(self, time, omega):
        self.estimator.predict(time, self.commands)
        self.estimator.update_gyro(time, omega)

    def on_pose(self, time_now, time_measured, pose):
        self.estimator.predict(time_now, self.commands)
        self.estimator.update_pose(time_now, time_measured, pose)

    def command(self, time, target):
        self.estimator.predict(time, self.commands)
        u = self.controller(self.estimator.state, target, self.control_dt)
        if self.trace is not None:
            self.trace.append((time, self.estimator.state.x.copy()))
        self.commands = allocate(u, self.controller.theta_h)
        return self.commands.copy(), u.as_array()


# Flaps may close toward flat by at most 10 deg and open by at most 30 deg
# from hover; beyond that the pitch and roll torque of a single flap turns
# over and the linear allocation stops being trustworthy.
DEFAULT_ENVELOPE = (math.radians(10.0), math.radians(30.0))


def build_autopilot(design, constants: DynamicsConstants, gains: ControllerGains,
                    delay_compensation=True, servo_tau=0.03, noise: EstimatorNoise = EstimatorNoise(),
                    control_dt=0.01, envelope=DEFAULT_ENVELOPE):
    """Estimator and controller for ``design``.  ``envelope`` is
    ``(inward, outward)`` in rad, or None for the mechanical limits only."""
    lin = LinearFlightModel(constants, design.hover_angle, servo_tau)
    est = Estimator(lin, noise, delay_compensation=delay_compensation)
    limits = design.flap_angle_limits
    if envelope is not None:
        limits = control_envelope(design.hover_angle, limits, *envelope)
    ctl = AttitudePositionController(gains, design.hover_angle, limits)
    return Autopilot(est, ctl, control_dt)
