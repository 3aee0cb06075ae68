"""Rigid-body propagation, servo model, airflow field and the multirate
simulation loop.

The rigid state is position and velocity in the world frame, a body->world
unit quaternion ``(w, x, y, z)`` and the body angular velocity.  Flap angles
are held constant over each physics step and then advanced by the servo
model.  :func:`state_derivative` is the reference implementation; the
simulation loop runs the same equations through a compiled kernel.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .aerodynamics import STANDARD_AIR, drag_wrench, posed_panels
from .morphology import G, RobotDesign
from .rotations import quat_derivative, quat_to_euler, quat_to_matrix

MAX_DT = 0.002
DIVERGENCE_RADIUS = 10.0


class DivergenceError(RuntimeError):
    """The simulated robot left the flight volume or the state went bad.

    ``log`` holds the rows recorded up to the failure.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass
class RigidState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self):
        return np.concatenate((self.position, self.velocity, self.orientation,
                               self.angular_velocity)).astype(float)

    @classmethod
    def from_vector(cls, y):
        y = np.asarray(y, dtype=float)
        return cls(y[0:3].copy(), y[3:6].copy(), y[6:10].copy(), y[10:13].copy())

    def copy(self):
        return RigidState.from_vector(self.as_vector())

    def euler(self):
        return quat_to_euler(self.orientation)


@dataclass
class FlapState:
    angles: np.ndarray
    rates: np.ndarray = field(default_factory=lambda: np.zeros(4))
    commands: np.ndarray = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).copy()
        self.rates = np.asarray(self.rates, dtype=float).copy()
        if self.commands is None:
            self.commands = self.angles.copy()
        else:
            self.commands = np.asarray(self.commands, dtype=float).copy()

    @classmethod
    def at_hover(cls, design: RobotDesign):
        return cls(design.hover_angles())


@dataclass(frozen=True)
class ServoModel:
    """First-order lag with a rate limit.  ``rate_limit=None`` disables it."""

    time_constant: float = 0.03
    rate_limit: float | None = 10.0

    def __post_init__(self):
        if self.time_constant < 0.0:
            raise ValueError("servo time constant must be >= 0")
        if self.rate_limit is not None and self.rate_limit <= 0.0:
            raise ValueError("servo rate limit must be positive")


# ----------------------------------------------------------------- airflow

_TURB_STEP = 0.005
_TURB_CHUNK = 2048


@dataclass
class AirflowField:
    """Uniform vertical stream plus crosswind and Gauss-Markov turbulence.

    Turbulence is spatially uniform.  Each axis is a first-order
    Gauss-Markov process with standard deviation
    ``turbulence_intensity * mean_vertical``, generated on a 5 ms grid from
    ``rng_seed`` and interpolated linearly, so samples depend only on the
    seed and the query time.
    """

    mean_vertical: float = 10.0
    crosswind: np.ndarray = field(default_factory=lambda: np.zeros(3))
    turbulence_intensity: float = 0.05
    turbulence_correlation_time: float = 0.2
    rng_seed: int = 0
    axis_signs: tuple = (1.0, 1.0, 1.0)
    _series: np.ndarray = field(default=None, init=False, repr=False, compare=False)
    _rng: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.crosswind = np.asarray(self.crosswind, dtype=float).reshape(3)
        if self.mean_vertical < 0.0:
            raise ValueError("mean vertical airflow must be >= 0")
        if not 0.0 <= self.turbulence_intensity <= 0.5:
            raise ValueError("turbulence intensity must lie in [0, 0.5]")
        if self.turbulence_correlation_time <= 0.0:
            raise ValueError("turbulence correlation time must be positive")

    @property
    def sigma(self):
        return self.turbulence_intensity * self.mean_vertical

    def mean(self):
        return self.crosswind + np.array([0.0, 0.0, self.mean_vertical])

    def _extend(self, n):
        if self._series is None:
            self._rng = np.random.default_rng(self.rng_seed)
            first = self.sigma * self._rng.standard_normal(3)
            self._series = first[None, :]
        phi = math.exp(-_TURB_STEP / self.turbulence_correlation_time)
        kick = self.sigma * math.sqrt(1.0 - phi * phi)
        while len(self._series) < n:
            w = self._rng.standard_normal((_TURB_CHUNK, 3))
            out = np.empty((_TURB_CHUNK, 3))
            x = self._series[-1]
            for i in range(_TURB_CHUNK):
                x = phi * x + kick * w[i]
                out[i] = x
            self._series = np.vstack((self._series, out))

    def turbulence(self, times):
        """Turbulence velocity at each time in ``times`` (shape (n, 3))."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if self.sigma == 0.0:
            return np.zeros((len(t), 3))
        if np.any(t < 0.0):
            raise ValueError("airflow is defined for t >= 0")
        u = t / _TURB_STEP
        i = np.floor(u).astype(int)
        self._extend(int(i.max()) + 2)
        f = (u - i)[:, None]
        out = self._series[i] * (1.0 - f) + self._series[i + 1] * f
        return out * np.asarray(self.axis_signs, dtype=float)

    def sample(self, position, time):
        return self.mean() + self.turbulence([time])[0]

    def samples(self, times):
        return self.mean()[None, :] + self.turbulence(times)

    def mirrored_yz(self):
        """Field mirrored through the yz-plane (x components negated).  The
        turbulence draw is mirrored too."""
        S = np.array([-1.0, 1.0, 1.0])
        return dataclasses.replace(self, crosswind=self.crosswind * S,
                                   axis_signs=tuple(np.asarray(self.axis_signs) * S))


def sample_airflow(airflow: AirflowField, position, time):
    """Air velocity (world frame) at ``position`` and ``time``."""
    return airflow.sample(position, time)


def _wind(airflow, position, time):
    if airflow is None:
        return np.zeros(3)
    if hasattr(airflow, "sample"):
        return np.asarray(airflow.sample(position, time), dtype=float)
    return np.asarray(airflow, dtype=float)


# -------------------------------------------------------------------- servo

def servo_step(flap_state: FlapState, commands, dt, limits=(-math.pi / 3, math.pi / 3),
               servo: ServoModel = ServoModel()):
    """Advance the flap angles toward ``commands`` over ``dt``."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    cmd = np.clip(np.asarray(commands, dtype=float), limits[0], limits[1])
    a = flap_state.angles
    if servo.time_constant > 0.0:
        target = cmd + (a - cmd) * math.exp(-dt / servo.time_constant)
    else:
        target = cmd
    rate = (target - a) / dt
    if servo.rate_limit is not None:
        rate = np.clip(rate, -servo.rate_limit, servo.rate_limit)
    new = np.clip(a + rate * dt, limits[0], limits[1])
    return FlapState(new, (new - a) / dt, cmd)


# ------------------------------------------------------------ rigid body

def state_derivative(design: RobotDesign, rigid_state: RigidState, flap_state: FlapState,
                     airflow, time=0.0, air=STANDARD_AIR, gravity=True,
                     external_force=None, external_torque=None, aerodynamics=True):
    """Time derivative of the rigid state.

    Returns a :class:`RigidState` whose fields hold the derivatives:
    velocity, world acceleration, quaternion rate and body angular
    acceleration.  ``airflow`` may be ``None`` (still air), a vector or an
    :class:`AirflowField`.  ``aerodynamics=False`` drops the drag wrench
    entirely (rigid body in vacuum).
    """
    R = quat_to_matrix(rigid_state.orientation)
    if aerodynamics:
        wind = _wind(airflow, rigid_state.position, time)
        panels = posed_panels(design, flap_state.angles)
        F, T = drag_wrench(design, panels, R, rigid_state.velocity,
                           rigid_state.angular_velocity, wind, air, gravity=False)
    else:
        F, T = np.zeros(3), np.zeros(3)
    acc = R @ F / design.total_mass
    if gravity:
        acc = acc + np.array([0.0, 0.0, -G])
    if external_force is not None:
        acc = acc + np.asarray(external_force, dtype=float) / design.total_mass
    if external_torque is not None:
        T = T + np.asarray(external_torque, dtype=float)
    w = np.asarray(rigid_state.angular_velocity, dtype=float)
    I = design.inertia
    wdot = np.linalg.solve(I, T - np.cross(w, I @ w))
    qdot = quat_derivative(rigid_state.orientation, w)
    return RigidState(np.array(rigid_state.velocity, dtype=float), acc, qdot, wdot)


def integrate(design: RobotDesign, state: RigidState, flap_state: FlapState, airflow, dt,
              time=0.0, commands=None, servo: ServoModel = ServoModel(), air=STANDARD_AIR,
              gravity=True, external_force=None, external_torque=None, aerodynamics=True):
    """One RK4 step with flap angles held, then a servo step.

    Returns ``(RigidState, FlapState)``.  ``commands`` defaults to the flap
    state's stored commands.
    """
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}] s")
    y = state.as_vector()

    def f(yv, t):
        d = state_derivative(design, RigidState.from_vector(yv), flap_state, airflow, t, air,
                             gravity, external_force, external_torque, aerodynamics)
        return d.as_vector()

    k1 = f(y, time)
    k2 = f(y + 0.5 * dt * k1, time + 0.5 * dt)
    k3 = f(y + 0.5 * dt * k2, time + 0.5 * dt)
    k4 = f(y + dt * k3, time + dt)
    y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    y[6:10] /= np.linalg.norm(y[6:10])
    cmd = flap_state.commands if commands is None else commands
    flaps = servo_step(flap_state, cmd, dt, design.flap_angle_limits, servo)
    return RigidState.from_vector(y), flaps


# ------------------------------------------------------- compiled kernel

@numba.njit(cache=True)
def _k_deriv(y, wind, normals, lever, karea, mass, I, Iinv, grav, fext, text):
    w0, x, yy, z = y[6], y[7], y[8], y[9]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (yy * yy + z * z)
    R[0, 1] = 2 * (x * yy - w0 * z)
    R[0, 2] = 2 * (x * z + w0 * yy)
    R[1, 0] = 2 * (x * yy + w0 * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (yy * z - w0 * x)
    R[2, 0] = 2 * (x * z - w0 * yy)
    R[2, 1] = 2 * (yy * z + w0 * x)
    R[2, 2] = 1 - 2 * (x * x + yy * yy)
    rel = wind - y[3:6]
    vb = R.T @ rel
    om = y[10:13]
    F = np.zeros(3)
    T = np.zeros(3)
    for i in range(normals.shape[0]):
        vn = normals[i, 0] * vb[0] + normals[i, 1] * vb[1] + normals[i, 2] * vb[2] \
            - (lever[i, 0] * om[0] + lever[i, 1] * om[1] + lever[i, 2] * om[2])
        m = karea[i] * vn * abs(vn)
        for k in range(3):
            F[k] += m * normals[i, k]
            T[k] += m * lever[i, k]
    out = np.empty(13)
    out[0:3] = y[3:6]
    acc = R @ F / mass + fext / mass
    acc[2] -= grav
    out[3:6] = acc
    Iw = I @ om
    gyro = np.array([om[1] * Iw[2] - om[2] * Iw[1],
                     om[2] * Iw[0] - om[0] * Iw[2],
                     om[0] * Iw[1] - om[1] * Iw[0]])
    out[10:13] = Iinv @ (T + text - gyro)
    out[6] = 0.5 * (-x * om[0] - yy * om[1] - z * om[2])
    out[7] = 0.5 * (w0 * om[0] + yy * om[2] - z * om[1])
    out[8] = 0.5 * (w0 * om[1] - x * om[2] + z * om[0])
    out[9] = 0.5 * (w0 * om[2] + x * om[1] - yy * om[0])
    return out


@numba.njit(cache=True)
def _k_rk4(y, dt, winds, normals, lever, karea, mass, I, Iinv, grav, fext, text):
    k1 = _k_deriv(y, winds[0], normals, lever, karea, mass, I, Iinv, grav, fext, text)
    k2 = _k_deriv(y + 0.5 * dt * k1, winds[1], normals, lever, karea, mass, I, Iinv, grav, fext, text)
    k3 = _k_deriv(y + 0.5 * dt * k2, winds[1], normals, lever, karea, mass, I, Iinv, grav, fext, text)
    k4 = _k_deriv(y + dt * k3, winds[2], normals, lever, karea, mass, I, Iinv, grav, fext, text)
    out = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[6:10] /= np.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    return out


@numba.njit(cache=True)
def _k_pose(angles, owner, n0, n1, n2, r0, r1, r2, offset):
    n = np.empty_like(n0)
    r = np.empty_like(r0)
    lever = np.empty_like(r0)
    for i in range(n0.shape[0]):
        a = 0.0 if owner[i] == 0 else angles[owner[i] - 1]
        c, s = math.cos(a), math.sin(a)
        for k in range(3):
            n[i, k] = n0[i, k] * c + n1[i, k] * s + n2[i, k]
            r[i, k] = r0[i, k] * c + r1[i, k] * s + r2[i, k] + offset[i, k]
        lever[i, 0] = r[i, 1] * n[i, 2] - r[i, 2] * n[i, 1]
        lever[i, 1] = r[i, 2] * n[i, 0] - r[i, 0] * n[i, 2]
        lever[i, 2] = r[i, 0] * n[i, 1] - r[i, 1] * n[i, 0]
    return n, lever


@numba.njit(cache=True)
def _k_servo(angles, cmd, dt, decay, rate_limit, lo, hi):
    new = np.empty(4)
    for k in range(4):
        c = min(max(cmd[k], lo), hi)
        target = c + (angles[k] - c) * decay
        rate = (target - angles[k]) / dt
        if rate_limit > 0.0:
            rate = min(max(rate, -rate_limit), rate_limit)
        new[k] = min(max(angles[k] + rate * dt, lo), hi)
    return new


class PhysicsKernel:
    """Compiled physics for one design; used by :func:`simulate`."""

    def __init__(self, design: RobotDesign, air=STANDARD_AIR, servo: ServoModel = ServoModel(),
                 gravity=True):
        from .aerodynamics import _template
        t = _template(design)
        self.design = design
        self.owner = t.owner.astype(np.int64)
        self.n_parts = [np.ascontiguousarray(a) for a in t._n]
        self.r_parts = [np.ascontiguousarray(a) for a in t._r]
        self.offset = np.ascontiguousarray(t._offset)
        self.karea = 0.5 * air.air_density * design.cd_perp * t.areas
        self.mass = float(design.total_mass)
        self.I = np.ascontiguousarray(design.inertia)
        self.Iinv = np.linalg.inv(self.I)
        self.grav = G if gravity else 0.0
        self.servo = servo
        self.lo, self.hi = design.flap_angle_limits

    def step(self, y, angles, commands, dt, winds, fext, text):
        n, lever = _k_pose(angles, self.owner, *self.n_parts, *self.r_parts, self.offset)
        y = _k_rk4(y, dt, winds, n, lever, self.karea, self.mass, self.I, self.Iinv,
                   self.grav, fext, text)
        tc = self.servo.time_constant
        decay = math.exp(-dt / tc) if tc > 0.0 else 0.0
        rl = self.servo.rate_limit or 0.0
        new = _k_servo(angles, commands, dt, decay, rl, self.lo, self.hi)
        return y, new


# ------------------------------------------------------------- flight log

LOG_VERSION = 1
LOG_COLUMNS = ("t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "wx", "wy", "wz",
               "theta1", "theta2", "theta3", "theta4", "u1", "u2", "u3", "u4",
               "x_t", "y_t", "z_t", "yaw_t", "air_x", "air_y", "air_z")


class FlightLog:
    """Rows of the fixed column set :data:`LOG_COLUMNS` at the control rate."""

    def __init__(self, rows=None, meta=None):
        self.rows = [] if rows is None else list(rows)
        self.meta = dict(meta or {})

    def append(self, row):
        if len(row) != len(LOG_COLUMNS):
            raise ValueError("log row has the wrong number of columns")
        self.rows.append(np.asarray(row, dtype=float))

    def __len__(self):
        return len(self.rows)

    @property
    def data(self):
        if not self.rows:
            return np.zeros((0, len(LOG_COLUMNS)))
        return np.vstack(self.rows)

    def column(self, name):
        return self.data[:, LOG_COLUMNS.index(name)]

    def __getitem__(self, name):
        return self.column(name)

    def to_csv(self, path=None):
        lines = [f"# morphsoar flightlog v{LOG_VERSION}", ",".join(LOG_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(float(v)) for v in r))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text):
        text = path_or_text
        if "\n" not in str(path_or_text):
            with open(path_or_text) as fh:
                text = fh.read()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# morphsoar flightlog v"):
            raise ValueError("not a flight log (missing version header)")
        version = int(lines[0].rsplit("v", 1)[1])
        if version != LOG_VERSION:
            raise ValueError(f"unsupported flight log version {version}")
        header = tuple(lines[1].split(","))
        if header != LOG_COLUMNS:
            raise ValueError("flight log columns do not match the schema")
        rows = [np.array([float(v) for v in ln.split(",")]) for ln in lines[2:]]
        return cls(rows)


# ------------------------------------------------------------- simulation

@dataclass(frozen=True)
class Disturbance:
    """Constant world-frame force (and optional body torque) applied from
    ``time`` for ``duration`` seconds."""

    time: float
    force: tuple = (0.0, 0.0, 0.0)
    duration: float = 0.05
    torque: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def impulse(cls, time, impulse, duration=0.05):
        return cls(time, tuple(np.asarray(impulse, dtype=float) / duration), duration)


@dataclass(frozen=True)
class LoopTiming:
    """Loop periods in integer milliseconds of the 1 kHz physics clock."""

    physics_dt: float = 0.001
    control_every: int = 10
    gyro_every: int = 10
    pose_every: int = 5
    pose_decimation: int = 4
    pose_delay: float = 0.040

    @property
    def delay_ticks(self):
        return int(round(self.pose_delay / self.physics_dt))


@dataclass(frozen=True)
class SensorNoise:
    position: float = 0.001
    angle: float = math.radians(0.2)
    gyro: float = 0.01


@dataclass
class SimulationSetup:
    """Everything :func:`simulate` needs.

    ``autopilot`` must provide ``reset(time, pose, rates, flap_angles)``,
    ``on_gyro(time, omega)``, ``on_pose(time_now, time_measured, pose)`` and
    ``command(time, target) -> (flap_commands, u)``.  ``targets`` maps a time
    to an object with ``position`` and ``yaw``.
    """

    design: RobotDesign
    airflow: AirflowField
    autopilot: object
    targets: object
    duration: float
    initial_state: RigidState = None
    disturbances: tuple = ()
    timing: LoopTiming = LoopTiming()
    noise: SensorNoise = SensorNoise()
    servo: ServoModel = ServoModel()
    air: object = STANDARD_AIR
    seed: int = 0


def simulate(setup: SimulationSetup) -> FlightLog:
    """Run the multirate closed loop and return the log (rows at the
    control rate, first row at t = 0)."""
    if setup.duration < 0.0:
        raise ValueError("duration must be >= 0")
    d = setup.design
    tm = setup.timing
    dt = tm.physics_dt
    kernel = PhysicsKernel(d, setup.air, setup.servo)
    n_steps = int(round(setup.duration / dt))
    state = setup.initial_state.copy() if setup.initial_state is not None else RigidState()
    y = state.as_vector()
    angles = d.hover_angles().astype(float)
    commands = angles.copy()
    rng = np.random.default_rng(np.random.SeedSequence([setup.seed, 7]))
    noise = setup.noise

    # Airflow at every half step, sampled once.
    half = np.arange(2 * n_steps + 1) * (0.5 * dt)
    winds = setup.airflow.samples(half) if setup.airflow is not None else np.zeros((len(half), 3))

    force_t = np.zeros((max(n_steps, 1), 3))
    torque_t = np.zeros((max(n_steps, 1), 3))
    for dist in setup.disturbances:
        k0 = int(round(dist.time / dt))
        k1 = int(round((dist.time + dist.duration) / dt))
        force_t[max(k0, 0):max(k1, 0)] += np.asarray(dist.force, dtype=float)
        torque_t[max(k0, 0):max(k1, 0)] += np.asarray(dist.torque, dtype=float)

    ap = setup.autopilot
    pose0 = np.concatenate((y[0:3], quat_to_euler(y[6:10])))
    ap.reset(0.0, pose0, y[10:13].copy(), angles.copy())

    log = FlightLog(meta={"pose_ages": []})
    pending = []  # (delivery tick, measured time, pose)
    u = np.zeros(4)
    pose_count = 0

    def measure_pose(yv):
        p = yv[0:3] + noise.position * rng.standard_normal(3)
        e = quat_to_euler(yv[6:10]) + noise.angle * rng.standard_normal(3)
        return np.concatenate((p, e))

    last_pose_time = None
    for k in range(n_steps + 1):
        t = k * dt
        if k % tm.pose_every == 0:
            if pose_count % tm.pose_decimation == 0:
                pending.append((k + tm.delay_ticks, t, measure_pose(y)))
            pose_count += 1
        while pending and pending[0][0] <= k:
            _, tmeas, pose = pending.pop(0)
            ap.on_pose(t, tmeas, pose)
            last_pose_time = tmeas
        if k % tm.gyro_every == 0:
            ap.on_gyro(t, y[10:13] + noise.gyro * rng.standard_normal(3))
        if k % tm.control_every == 0:
            target = setup.targets(t)
            commands, u = ap.command(t, target)
            commands = np.asarray(commands, dtype=float)
            if last_pose_time is not None:
                log.meta["pose_ages"].append(t - last_pose_time)
            rpy = quat_to_euler(y[6:10])
            log.append(np.concatenate((
                [t], y[0:3], y[3:6], rpy, y[10:13], angles, u,
                np.asarray(target.position, dtype=float), [target.yaw], winds[2 * k])))
        if k == n_steps:
            break
        y, angles = kernel.step(y, angles, commands, dt, winds[2 * k:2 * k + 3],
                                force_t[k], torque_t[k])
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at t={t + dt:.3f} s", log)
        if np.linalg.norm(y[0:3]) > DIVERGENCE_RADIUS:
            raise DivergenceError(
                f"position left the {DIVERGENCE_RADIUS:.0f} m flight volume at t={t + dt:.3f} s", log)
    return log
