"""Perpendicular-projection drag model and wrench composition.

Every plate only feels the component of the relative airflow along its
normal; area and drag coefficient are constants.  Forces are signed, so a
plate moving into the flow from behind is pushed the other way.
"""

from __future__ import annotations

import dataclasses
import weakref
from dataclasses import dataclass

import numpy as np

from .morphology import G, RobotDesign, plate_frames
from .rotations import quat_to_matrix


class CalibrationError(ValueError):
    """Hover calibration needs a drag coefficient outside the plausible range."""


@dataclass(frozen=True)
class AirState:
    air_density: float = 1.225
    dynamic_viscosity: float = 1.81e-5

    def __post_init__(self):
        if self.air_density <= 0.0 or self.dynamic_viscosity <= 0.0:
            raise ValueError("air density and viscosity must be positive")


STANDARD_AIR = AirState()


@dataclass(frozen=True)
class Wrench:
    """Force (N) in the body frame and torque (N m) about the CoM."""

    force: np.ndarray
    torque: np.ndarray

    def __add__(self, other):
        return Wrench(self.force + other.force, self.torque + other.torque)


def panel_drag(v_rel, normal, area, cd_perp, rho=STANDARD_AIR.air_density):
    """Drag on one flat plate.

    ``F = 1/2 rho cd A (v.n)|v.n| n`` where ``v_rel`` is the air velocity
    relative to the plate.  Components of ``v_rel`` parallel to the plate do
    not contribute.
    """
    n = np.asarray(normal, dtype=float)
    if abs(np.dot(n, n) - 1.0) > 1e-9:
        raise ValueError("panel normal must be a unit vector")
    if area < 0.0:
        raise ValueError("panel area must be non-negative")
    vn = float(np.dot(v_rel, n))
    return 0.5 * rho * cd_perp * area * vn * abs(vn) * n


@dataclass(frozen=True)
class BodyMotion:
    """Kinematic state needed by the drag model.

    ``velocity`` is the CoM velocity in the world frame, ``orientation`` a
    unit quaternion (w, x, y, z) body->world, ``angular_velocity`` in body axes.
    """

    velocity: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = dataclasses.field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    angular_velocity: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))


def _relative_air_body(R, motion, airflow_world, r_from_com):
    v_air_b = R.T @ airflow_world
    v_com_b = R.T @ motion.velocity
    v_panel = v_com_b + np.cross(motion.angular_velocity, r_from_com)
    return v_air_b - v_panel


def base_force(design: RobotDesign, motion: BodyMotion, airflow_velocity, air=STANDARD_AIR):
    """Drag on the base plate: ``(force_body, application_point_body)``."""
    R = quat_to_matrix(motion.orientation)
    panel = design.base_panel
    r = panel.centroid - design.com
    v_rel = _relative_air_body(R, motion, np.asarray(airflow_velocity, float), r)
    F = panel_drag(v_rel, panel.normal, panel.area, design.cd_perp, air.air_density)
    return F, panel.centroid.copy()


def flap_force(design: RobotDesign, flap_index, flap_angle, motion: BodyMotion,
               airflow_velocity, air=STANDARD_AIR):
    """Per-panel drag on flap ``flap_index`` (1..4).

    Returns a list of ``(force_body, application_point_body)``; the centre of
    pressure of each panel is its centroid.
    """
    if flap_index not in (1, 2, 3, 4):
        raise ValueError("flap index must be 1..4")
    angles = design.hover_angles()
    angles[flap_index - 1] = flap_angle
    R = quat_to_matrix(motion.orientation)
    wind = np.asarray(airflow_velocity, float)
    out = []
    for panel, owner in plate_frames(design, angles):
        if owner != flap_index:
            continue
        r = panel.centroid - design.com
        v_rel = _relative_air_body(R, motion, wind, r)
        F = panel_drag(v_rel, panel.normal, panel.area, design.cd_perp, air.air_density)
        out.append((F, panel.centroid.copy()))
    return out


class PanelCache:
    """Posed panel arrays for a fixed flap configuration (vectorised drag).

    ``arms`` run from the CoM to each panel centroid; ``lever`` holds
    ``arm x normal`` so that torques and the rotational part of the panel
    velocity reduce to matrix-vector products.
    """

    __slots__ = ("angles", "normals", "areas", "arms", "lever")

    def __init__(self, design: RobotDesign, flap_angles, normals=None, arms=None, lever=None):
        self.angles = np.array(flap_angles, dtype=float)
        if normals is None:
            posed = plate_frames(design, flap_angles)
            normals = np.array([p.normal for p, _ in posed])
            arms = np.array([p.centroid for p, _ in posed]) - design.com
            self.areas = np.array([p.area for p, _ in posed])
        else:
            self.areas = _template(design).areas
        self.normals = normals
        self.arms = arms
        self.lever = np.cross(arms, normals) if lever is None else lever


class _PanelTemplate:
    """Zero-angle panel data relative to each hinge, for fast posing."""

    def __init__(self, design):
        posed = plate_frames(design, np.zeros(4))
        self.owner = np.array([o for _, o in posed])
        self.areas = np.array([p.area for p, _ in posed])
        self.normals = np.array([p.normal for p, _ in posed])
        pivots = np.zeros((len(posed), 3))
        axes = np.zeros((len(posed), 3))
        for i, o in enumerate(self.owner):
            if o > 0:
                pivots[i] = design.flaps[o - 1].hinge_axis_point
                axes[i] = design.flaps[o - 1].hinge_axis_dir
        rel = np.array([p.centroid for p, _ in posed]) - pivots
        # Rodrigues: v' = v cos + (k x v) sin + k (k.v) (1 - cos); the three
        # terms are fixed per panel, so posing is elementwise.
        def split(v):
            par = axes * np.einsum("ij,ij->i", axes, v)[:, None]
            return np.stack((v - par, np.cross(axes, v), par))
        self._n = split(self.normals)
        self._r = split(rel)
        self._offset = pivots - design.com

    def pose(self, design, angles):
        a = np.concatenate(([0.0], np.asarray(angles, dtype=float)))[self.owner]
        c = np.cos(a)[:, None]
        s = np.sin(a)[:, None]
        n = self._n[0] * c + self._n[1] * s + self._n[2]
        r = self._r[0] * c + self._r[1] * s + self._r[2] + self._offset
        lever = np.empty_like(r)
        lever[:, 0] = r[:, 1] * n[:, 2] - r[:, 2] * n[:, 1]
        lever[:, 1] = r[:, 2] * n[:, 0] - r[:, 0] * n[:, 2]
        lever[:, 2] = r[:, 0] * n[:, 1] - r[:, 1] * n[:, 0]
        return PanelCache(design, angles, normals=n, arms=r, lever=lever)


_TEMPLATES = weakref.WeakKeyDictionary()


def _template(design):
    t = _TEMPLATES.get(design)
    if t is None:
        t = _PanelTemplate(design)
        _TEMPLATES[design] = t
    return t


def posed_panels(design: RobotDesign, flap_angles):
    """Fast equivalent of ``PanelCache(design, flap_angles)`` without the
    flap-limit check (used inside the integrator)."""
    return _template(design).pose(design, flap_angles)


def drag_wrench(design: RobotDesign, panels: PanelCache, R, velocity_world,
                angular_velocity, airflow_world, air=STANDARD_AIR, gravity=True):
    """Vectorised total wrench for posed panels (body frame, about CoM)."""
    v_air_b = R.T @ (np.asarray(airflow_world, float) - np.asarray(velocity_world, float))
    # (v_air - w x r) . n  ==  v_air . n - w . (r x n)
    vn = panels.normals @ v_air_b - panels.lever @ np.asarray(angular_velocity, float)
    mag = 0.5 * air.air_density * design.cd_perp * panels.areas * vn * np.abs(vn)
    force = mag @ panels.normals
    torque = mag @ panels.lever
    if gravity:
        force = force + R.T @ np.array([0.0, 0.0, -design.total_mass * G])
    return force, torque


def total_wrench(design: RobotDesign, full_state, airflow, time=0.0, air=STANDARD_AIR,
                 servo_torque=False, flap_accelerations=None):
    """Total wrench on the robot (body frame, about the CoM).

    ``full_state`` needs ``position``, ``velocity``, ``orientation``,
    ``angular_velocity`` and ``flap_angles`` attributes.  ``airflow`` is either
    a fixed world-frame vector or an object with ``sample(position, time)``.
    The servo reaction torque is left out unless ``servo_torque`` is set, in
    which case ``flap_accelerations`` (rad/s^2) must be given.
    """
    if hasattr(airflow, "sample"):
        wind = airflow.sample(full_state.position, time)
    else:
        wind = np.asarray(airflow, dtype=float)
    R = quat_to_matrix(full_state.orientation)
    panels = PanelCache(design, full_state.flap_angles)
    force, torque = drag_wrench(design, panels, R, full_state.velocity,
                                full_state.angular_velocity, wind, air)
    if servo_torque:
        if flap_accelerations is None:
            raise ValueError("servo torque needs flap accelerations")
        torque = torque - servo_reaction_torque(design, flap_accelerations)
    return Wrench(force, torque)


def flap_axis_inertia(design: RobotDesign, index):
    """Moment of inertia of flap ``index`` (0-based) about its hinge axis."""
    flap = design.flaps[index]
    h, p0 = flap.hinge_axis_dir, flap.hinge_axis_point
    total = 0.0
    for panel in flap.panels:
        if panel is None or panel.mass == 0.0:
            continue
        shifted = panel.transformed(np.eye(3), translation=-p0)
        S = shifted.second_moment()
        total += np.trace(S) - h @ S @ h
    return total


def servo_reaction_torque(design: RobotDesign, flap_accelerations):
    """Torque the flaps exert on their servos, ``sum I_f * alpha_s * axis``."""
    acc = np.asarray(flap_accelerations, dtype=float)
    out = np.zeros(3)
    for k, flap in enumerate(design.flaps):
        out += flap_axis_inertia(design, k) * acc[k] * flap.hinge_axis_dir
    return out


@dataclass(frozen=True)
class _Pose:
    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray
    angular_velocity: np.ndarray
    flap_angles: np.ndarray


def hover_pose(design: RobotDesign, flap_angles=None):
    """Level, motionless robot at the origin in the given flap configuration."""
    angles = design.hover_angles() if flap_angles is None else np.asarray(flap_angles, float)
    return _Pose(position=np.zeros(3), velocity=np.zeros(3),
                 orientation=np.array([1.0, 0.0, 0.0, 0.0]),
                 angular_velocity=np.zeros(3), flap_angles=angles)


def vertical_drag_per_cd(design: RobotDesign, v_air, air=STANDARD_AIR, flap_angles=None):
    """Vertical drag at hover for ``cd_perp = 1`` (drag is linear in cd)."""
    unit = dataclasses.replace(design.params, cd_perp=1.0)
    from .morphology import build_design
    d1 = build_design(unit)
    w = total_wrench(d1, hover_pose(d1, flap_angles), np.array([0.0, 0.0, v_air]), air=air)
    return w.force[2] + d1.total_mass * G


def calibrate_hover(design: RobotDesign, v_air, air=STANDARD_AIR, cd_bounds=(0.5, 2.5)):
    """Return ``(design, cd_perp)`` with cd chosen so drag balances gravity at
    the hover configuration in a vertical flow of ``v_air``."""
    if not v_air > 0.0:
        raise CalibrationError("hover calibration needs a positive airflow speed")
    per_cd = vertical_drag_per_cd(design, v_air, air)
    if per_cd <= 0.0:
        raise CalibrationError("hover configuration produces no lift")
    cd = design.total_mass * G / per_cd
    if not cd_bounds[0] <= cd <= cd_bounds[1]:
        raise CalibrationError(
            f"required drag coefficient {cd:.3f} outside [{cd_bounds[0]}, {cd_bounds[1]}]")
    calibrated = design.with_params(cd_perp=cd)
    return calibrated, cd


def required_airflow(design: RobotDesign, air=STANDARD_AIR):
    """Airflow speed at which ``design`` (with its own cd) hovers."""
    per_cd_at_1 = vertical_drag_per_cd(design, 1.0, air)
    return float(np.sqrt(design.total_mass * G / (design.cd_perp * per_cd_at_1)))
