"""Hover linearization: dynamics constants, decoupled LTI blocks and poles.

Constants follow the naming ``f_<output>_<input>``, e.g. ``f_alpha_u1`` is
the roll acceleration per unit of the roll compound input and
``f_alpha_alphadot`` the roll rate damping.  Roll is ``alpha``, pitch
``beta``, yaw ``gamma``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass

import numpy as np

from .aerodynamics import STANDARD_AIR, drag_wrench, posed_panels
from .morphology import G, RobotDesign
from .rotations import euler_to_quat, quat_to_matrix

# Allocation matrix: rows are flaps 1..4, columns the compound inputs.
ALLOCATION = np.array([[1, 1, -1, -1],
                       [1, -1, -1, 1],
                       [-1, -1, -1, -1],
                       [-1, 1, -1, 1]], dtype=int)


class EquilibriumError(ValueError):
    """Linearization requested away from a force/torque equilibrium."""


UNITS = {
    "f_alpha_u1": "1/s^2", "f_beta_u2": "1/s^2", "f_gamma_u3": "1/s^2", "f_z_u4": "m/(s^2 rad)",
    "f_alpha_alpha": "1/s^2", "f_alpha_alphadot": "1/s", "f_alpha_ydot": "1/(m s)",
    "f_y_u1": "m/(s^2 rad)", "f_y_alpha": "m/(s^2 rad)",
    "f_beta_beta": "1/s^2", "f_beta_betadot": "1/s", "f_beta_xdot": "1/(m s)",
    "f_x_u2": "m/(s^2 rad)", "f_x_beta": "m/(s^2 rad)",
    "f_gamma_gammadot": "1/s", "f_z_zdot": "1/s",
    "f_y_ydot": "1/s", "f_x_xdot": "1/s",
}


@dataclass(frozen=True)
class DynamicsConstants:
    f_alpha_u1: float
    f_beta_u2: float
    f_gamma_u3: float
    f_z_u4: float
    f_alpha_alpha: float
    f_alpha_alphadot: float
    f_alpha_ydot: float
    f_y_u1: float
    f_y_alpha: float
    f_beta_beta: float
    f_beta_betadot: float
    f_beta_xdot: float
    f_x_u2: float
    f_x_beta: float
    f_gamma_gammadot: float
    f_z_zdot: float
    # Lateral drag damping; absent from the reference set, zero there.
    f_y_ydot: float = 0.0
    f_x_xdot: float = 0.0

    def as_dict(self):
        return dataclasses.asdict(self)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["constant", "value", "units"])
        for k, v in self.as_dict().items():
            w.writerow([k, repr(float(v)), UNITS[k]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:2] != ["constant", "value"]:
            raise ValueError("not a constants table")
        return cls(**{r[0]: float(r[1]) for r in rows[1:] if r})


# Reference constants estimated from real flight data.  The lateral coupling terms f_alpha_ydot and
# f_beta_xdot are unavailable and are set to zero.
REFERENCE_CONSTANTS = DynamicsConstants(
    f_alpha_u1=230.0, f_beta_u2=1100.0, f_gamma_u3=110.0, f_z_u4=2.3,
    f_alpha_alpha=-16.0, f_alpha_alphadot=-40.0, f_alpha_ydot=0.0,
    f_y_u1=-4.8, f_y_alpha=-6.5,
    f_beta_beta=-1560.0, f_beta_betadot=-29.0, f_beta_xdot=0.0,
    f_x_u2=-0.8, f_x_beta=2.5,
    f_gamma_gammadot=-7.7, f_z_zdot=-2.0,
)


# ---------------------------------------------------------------- extraction

def hover_accelerations(design: RobotDesign, v_air, rpy=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0),
                        angular_velocity=(0.0, 0.0, 0.0), u=(0.0, 0.0, 0.0, 0.0), air=STANDARD_AIR):
    """World linear acceleration and body angular acceleration of the robot
    at the origin in a vertical stream ``v_air``, flaps at hover plus
    ``ALLOCATION @ u``."""
    angles = design.hover_angles() + ALLOCATION @ np.asarray(u, dtype=float)
    R = quat_to_matrix(euler_to_quat(*rpy))
    w = np.asarray(angular_velocity, dtype=float)
    F, T = drag_wrench(design, posed_panels(design, angles), R, np.asarray(velocity, dtype=float),
                       w, np.array([0.0, 0.0, v_air]), air, gravity=True)
    acc = R @ F / design.total_mass
    I = design.inertia
    wdot = np.linalg.solve(I, T - np.cross(w, I @ w))
    return acc, wdot


def _derivative(fun, h):
    """Central difference with a half-step check; Richardson extrapolation
    when the two disagree by more than 1 %."""
    d1 = (fun(h) - fun(-h)) / (2.0 * h)
    d2 = (fun(h / 2) - fun(-h / 2)) / h
    scale = max(abs(d2), 1e-9)
    if abs(d1 - d2) > 0.01 * scale:
        return (4.0 * d2 - d1) / 3.0
    return d2


def hover_residual(design: RobotDesign, v_air, air=STANDARD_AIR):
    """Net force (N) and torque (N m) at the hover configuration, at rest."""
    R = np.eye(3)
    F, T = drag_wrench(design, posed_panels(design, design.hover_angles()), R, np.zeros(3),
                       np.zeros(3), np.array([0.0, 0.0, v_air]), air, gravity=True)
    return F, T


def extract_constants(design: RobotDesign, v_air, air=STANDARD_AIR, angle_step=1e-3,
                      velocity_step=1e-3, force_tol=1e-6, torque_tol=1e-8) -> DynamicsConstants:
    """Finite-difference dynamics constants at hover."""
    F, T = hover_residual(design, v_air, air)
    if np.linalg.norm(F) > force_tol or np.linalg.norm(T) > torque_tol:
        raise EquilibriumError(
            f"hover is not an equilibrium (|F|={np.linalg.norm(F):.2e} N, "
            f"|T|={np.linalg.norm(T):.2e} N m); calibrate first")

    def acc(**kw):
        return hover_accelerations(design, v_air, air=air, **kw)

    def unit(i, n=3):
        e = np.zeros(n)
        e[i] = 1.0
        return e

    def d_rpy(i, out, comp, h=angle_step):
        return _derivative(lambda e: acc(rpy=e * unit(i))[out][comp], h)

    def d_vel(i, out, comp, h=velocity_step):
        return _derivative(lambda e: acc(velocity=e * unit(i))[out][comp], h)

    def d_w(i, out, comp, h=angle_step):
        return _derivative(lambda e: acc(angular_velocity=e * unit(i))[out][comp], h)

    def d_u(i, out, comp, h=angle_step):
        return _derivative(lambda e: acc(u=e * unit(i, 4))[out][comp], h)

    LIN, ANG = 0, 1
    return DynamicsConstants(
        f_alpha_u1=d_u(0, ANG, 0), f_beta_u2=d_u(1, ANG, 1),
        f_gamma_u3=d_u(2, ANG, 2), f_z_u4=d_u(3, LIN, 2),
        f_alpha_alpha=d_rpy(0, ANG, 0), f_alpha_alphadot=d_w(0, ANG, 0),
        f_alpha_ydot=d_vel(1, ANG, 0),
        f_y_u1=d_u(0, LIN, 1), f_y_alpha=d_rpy(0, LIN, 1),
        f_beta_beta=d_rpy(1, ANG, 1), f_beta_betadot=d_w(1, ANG, 1),
        f_beta_xdot=d_vel(0, ANG, 1),
        f_x_u2=d_u(1, LIN, 0), f_x_beta=d_rpy(1, LIN, 0),
        f_gamma_gammadot=d_w(2, ANG, 2), f_z_zdot=d_vel(2, LIN, 2),
        f_y_ydot=d_vel(1, LIN, 1), f_x_xdot=d_vel(0, LIN, 0),
    )


def input_jacobian(design: RobotDesign, v_air, air=STANDARD_AIR, step=1e-3):
    """4x4 Jacobian of (roll acc, pitch acc, yaw acc, z acc) w.r.t. u1..u4."""
    J = np.zeros((4, 4))
    for j in range(4):
        def out(e, j=j):
            u = np.zeros(4)
            u[j] = e
            a, wd = hover_accelerations(design, v_air, u=u, air=air)
            return np.array([wd[0], wd[1], wd[2], a[2]])
        J[:, j] = (out(step) - out(-step)) / (2 * step)
    return J


def off_diagonal_leakage(J):
    """Largest off-diagonal entry of each row relative to its diagonal entry."""
    J = np.asarray(J, dtype=float)
    diag = np.abs(np.diag(J))
    off = np.abs(J - np.diag(np.diag(J))).max(axis=1)
    return off / diag


# ------------------------------------------------------------ decoupled model

BLOCK_STATES = {
    "roll": ("alpha", "alphadot", "y", "ydot"),
    "pitch": ("beta", "betadot", "x", "xdot"),
    "yaw": ("gamma", "gammadot"),
    "vertical": ("z", "zdot"),
}
POSITION_STATES = {"y", "x", "gamma", "z"}


@dataclass(frozen=True)
class LTIBlock:
    name: str
    states: tuple
    A: np.ndarray
    B: np.ndarray

    def reduced(self):
        """State matrix with the pure-integrator position state removed."""
        keep = [i for i, s in enumerate(self.states) if s not in POSITION_STATES]
        return self.A[np.ix_(keep, keep)]


@dataclass(frozen=True)
class DecoupledModel:
    constants: DynamicsConstants
    roll: LTIBlock
    pitch: LTIBlock
    yaw: LTIBlock
    vertical: LTIBlock

    @property
    def blocks(self):
        return {"roll": self.roll, "pitch": self.pitch, "yaw": self.yaw, "vertical": self.vertical}


def build_decoupled(constants: DynamicsConstants) -> DecoupledModel:
    vals = constants.as_dict()
    for k, v in vals.items():
        if v is None or not math.isfinite(v):
            raise ValueError(f"constant {k} is missing")
    c = constants
    roll_A = np.array([[0.0, 1.0, 0.0, 0.0],
                       [c.f_alpha_alpha, c.f_alpha_alphadot, 0.0, c.f_alpha_ydot],
                       [0.0, 0.0, 0.0, 1.0],
                       [c.f_y_alpha, 0.0, 0.0, c.f_y_ydot]])
    roll_B = np.array([0.0, c.f_alpha_u1, 0.0, c.f_y_u1])
    pitch_A = np.array([[0.0, 1.0, 0.0, 0.0],
                        [c.f_beta_beta, c.f_beta_betadot, 0.0, c.f_beta_xdot],
                        [0.0, 0.0, 0.0, 1.0],
                        [c.f_x_beta, 0.0, 0.0, c.f_x_xdot]])
    pitch_B = np.array([0.0, c.f_beta_u2, 0.0, c.f_x_u2])
    yaw_A = np.array([[0.0, 1.0], [0.0, c.f_gamma_gammadot]])
    yaw_B = np.array([0.0, c.f_gamma_u3])
    vert_A = np.array([[0.0, 1.0], [0.0, c.f_z_zdot]])
    vert_B = np.array([0.0, c.f_z_u4])
    return DecoupledModel(
        constants,
        LTIBlock("roll", BLOCK_STATES["roll"], roll_A, roll_B),
        LTIBlock("pitch", BLOCK_STATES["pitch"], pitch_A, pitch_B),
        LTIBlock("yaw", BLOCK_STATES["yaw"], yaw_A, yaw_B),
        LTIBlock("vertical", BLOCK_STATES["vertical"], vert_A, vert_B),
    )


def poles(model):
    """Eigenvalues per block.  ``model`` may be a :class:`DecoupledModel`, a
    single :class:`LTIBlock` or a plain square matrix."""
    if isinstance(model, DecoupledModel):
        return {k: np.linalg.eigvals(b.A) for k, b in model.blocks.items()}
    if isinstance(model, LTIBlock):
        return np.linalg.eigvals(model.A)
    return np.linalg.eigvals(np.asarray(model, dtype=float))


@dataclass(frozen=True)
class StabilityReport:
    poles: dict
    integrator_poles: dict
    stable: dict

    @property
    def all_stable(self):
        return all(self.stable.values())


def stability(model: DecoupledModel) -> StabilityReport:
    """Per-block verdict on the poles left after removing the position
    integrators (those are reported separately)."""
    p, integ, ok = {}, {}, {}
    for k, b in model.blocks.items():
        red = np.linalg.eigvals(b.reduced())
        p[k] = red
        integ[k] = len(b.states) - len(red)
        ok[k] = bool(np.all(red.real < 0.0))
    return StabilityReport(p, integ, ok)


def discretize(A, B, dt):
    """Zero-order-hold discretization via the augmented matrix exponential."""
    from scipy.linalg import expm
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    M = np.zeros((n + B.shape[1], n + B.shape[1]))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]
