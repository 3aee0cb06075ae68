"""Parametric geometry and mass model of the four-flap morphing robot.

Body frame: origin at the centre of the base plate, ``x`` forward, ``y`` left,
``z`` up (into the oncoming vertical airflow).  The flaps sit in the four
quadrants, numbered 1: (+x, -y), 2: (+x, +y), 3: (-x, +y), 4: (-x, -y).
Flap 1 is built explicitly; flaps 2-4 are its images under the mirror through
the xz-plane, the half-turn about z, and the mirror through the yz-plane.

Each flap twists about a radial hinge rod.  Because flaps 2 and 4 are mirror
images, a physically symmetric configuration has alternating angle signs,
``(a, -a, a, -a)``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

G = 9.81

# Symmetry operations mapping flap 1 onto flaps 1..4.
FLAP_SYMMETRY = (
    np.diag([1.0, 1.0, 1.0]),
    np.diag([1.0, -1.0, 1.0]),
    np.diag([-1.0, -1.0, 1.0]),
    np.diag([-1.0, 1.0, 1.0]),
)


class DesignError(ValueError):
    """Raised for physically invalid or asymmetric designs."""


class SaturationError(ValueError):
    """Raised when flap angles leave the design limits.

    ``clamped`` carries the angles clipped into the allowed range.
    """

    def __init__(self, message, clamped):
        super().__init__(message)
        self.clamped = np.asarray(clamped, dtype=float)


@dataclass(frozen=True)
class PlatePanel:
    """Flat polygonal plate.

    ``vertices`` are 3D points in the frame the panel is expressed in;
    ``local_vertices`` are the same points in 2D in-plane coordinates.
    """

    vertices: np.ndarray
    normal: np.ndarray
    local_vertices: np.ndarray = field(repr=False)
    area: float = 0.0
    centroid: np.ndarray = field(default=None, repr=False)
    mass: float = 0.0

    @classmethod
    def from_vertices(cls, vertices, mass=0.0, normal_hint=(0.0, 0.0, 1.0)):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise DesignError("panel needs at least three 3D vertices")
        # Newell's method: robust normal and area for planar polygons.
        nxt = np.roll(v, -1, axis=0)
        cross_sum = np.cross(v, nxt).sum(axis=0)
        norm = np.linalg.norm(cross_sum)
        if norm <= 0.0:
            raise DesignError("degenerate panel (zero area)")
        normal = cross_sum / norm
        if np.dot(normal, normal_hint) < 0.0:
            normal = -normal
        area = 0.5 * norm
        # Area-weighted centroid through a fan triangulation.
        c = np.zeros(3)
        for i in range(1, len(v) - 1):
            tri_area = 0.5 * np.linalg.norm(np.cross(v[i] - v[0], v[i + 1] - v[0]))
            c += tri_area * (v[0] + v[i] + v[i + 1]) / 3.0
        centroid = c / area
        e1 = v[1] - v[0]
        e1 = e1 / np.linalg.norm(e1)
        e2 = np.cross(normal, e1)
        local = np.column_stack(((v - v[0]) @ e1, (v - v[0]) @ e2))
        return cls(vertices=v, normal=normal, local_vertices=local, area=area,
                   centroid=centroid, mass=float(mass))

    def transformed(self, rotation, translation=np.zeros(3), pivot=np.zeros(3)):
        """Apply ``x -> R (x - pivot) + pivot + translation`` (R may be improper)."""
        R = np.asarray(rotation, dtype=float)
        verts = (self.vertices - pivot) @ R.T + pivot + translation
        # Plate normals transform as plain vectors here: only the plate
        # orientation matters to the drag model, not a handedness.
        normal = R @ self.normal
        centroid = R @ (self.centroid - pivot) + pivot + translation
        return dataclasses.replace(self, vertices=verts, normal=normal,
                                   centroid=centroid)

    def second_moment(self):
        """``integral of x x^T dm`` about the frame origin, for uniform mass."""
        v = self.vertices
        total = np.zeros((3, 3))
        if self.mass == 0.0:
            return total
        sigma = self.mass / self.area
        for i in range(1, len(v) - 1):
            a, b, c = v[0], v[i], v[i + 1]
            tri_area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
            s = a + b + c
            cov = (np.outer(a, a) + np.outer(b, b) + np.outer(c, c) + np.outer(s, s)) / 12.0
            total += sigma * tri_area * cov
        return total


@dataclass(frozen=True)
class FlapGeometry:
    """One flap in its zero-angle pose: a main panel plus a kinked panel."""

    main_panel: PlatePanel
    kink_panel: PlatePanel
    kink_angle: float
    hinge_axis_point: np.ndarray
    hinge_axis_dir: np.ndarray
    mass: float
    rod_mass: float = 0.0
    rod_length: float = 0.0

    @property
    def panels(self):
        return (self.main_panel, self.kink_panel)

    def centre_of_mass(self):
        parts = [p for p in self.panels if p is not None]
        m = sum(p.mass for p in parts)
        if m == 0.0:
            return self.hinge_axis_point.copy()
        return sum(p.mass * p.centroid for p in parts) / m

    def distance_com_to_axis(self):
        d = self.centre_of_mass() - self.hinge_axis_point
        return float(np.linalg.norm(d - np.dot(d, self.hinge_axis_dir) * self.hinge_axis_dir))


@dataclass(frozen=True)
class DesignParams:
    """Flat parameter set describing a design.  Lengths in m, masses in kg,
    angles in rad."""

    side_length: float = 0.23
    base_side: float = 0.10
    flap_root_width: float = 0.18
    flap_tip_width: float = 0.035
    flap_tip_radius: float = 0.12
    flap_root_radius: float = 0.10 / math.sqrt(2.0)
    flap_azimuth: float = math.radians(45.0)
    kink_angle: float = math.radians(42.5)
    kink_fraction: float = 0.30
    total_mass: float = 0.340
    base_mass: float = 0.060
    flap_mass: float = 0.025
    battery_mass: float = 0.0144
    com_offset: float = 0.07
    pillar_spread: float = 0.04
    rod_diameter: float = 0.008
    rod_length: float = 0.096
    rod_wall: float = 0.0005
    rod_density: float = 1600.0
    cd_perp: float = 1.17
    hover_angle: float = math.radians(25.0)
    flap_min: float = math.radians(-60.0)
    flap_max: float = math.radians(60.0)

    def scaled(self, factor, total_mass=None):
        """Geometric copy scaled by ``factor``; component masses are rescaled so
        that the total becomes ``total_mass`` (unchanged when omitted)."""
        lengths = ("side_length", "base_side", "flap_root_width", "flap_tip_width",
                   "flap_tip_radius", "flap_root_radius", "com_offset", "pillar_spread", "rod_diameter",
                   "rod_length", "rod_wall")
        kw = {k: getattr(self, k) * factor for k in lengths}
        new_total = self.total_mass if total_mass is None else float(total_mass)
        # Rod mass follows geometry (tube volume ~ factor^3); keep the mass
        # budget proportional by rescaling the rod density as well.
        mass_ratio = new_total / self.total_mass
        kw.update(total_mass=new_total,
                  base_mass=self.base_mass * mass_ratio,
                  flap_mass=self.flap_mass * mass_ratio,
                  battery_mass=self.battery_mass * mass_ratio,
                  rod_density=self.rod_density * mass_ratio / factor ** 3)
        return dataclasses.replace(self, **kw)

    def to_config(self):
        cfg = configparser.ConfigParser()
        cfg["design"] = {f.name: repr(float(getattr(self, f.name)))
                         for f in dataclasses.fields(self)}
        buf = io.StringIO()
        cfg.write(buf)
        return buf.getvalue()

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise DesignError(f"unknown design keys: {sorted(unknown)}")
        kw = {}
        for k, v in mapping.items():
            if k.endswith("_deg"):
                raise DesignError("angles are given in rad")
            kw[k] = float(v)
        return cls(**kw)

    @classmethod
    def from_config(cls, text):
        cfg = configparser.ConfigParser()
        cfg.read_string(text)
        if "design" not in cfg:
            raise DesignError("config has no [design] section")
        return cls.from_mapping(dict(cfg["design"]))


def load_params(path):
    return DesignParams.from_config(Path(path).read_text())


def save_params(params, path):
    Path(path).write_text(params.to_config())


@dataclass(frozen=True, eq=False)
class RobotDesign:
    """Immutable design.  All positions are in the body frame (see module doc)."""

    params: DesignParams
    base_panel: PlatePanel
    flaps: tuple
    point_masses: tuple  # ((mass, position), ...) electronics and battery
    com: np.ndarray
    inertia: np.ndarray

    @property
    def side_length(self):
        return self.params.side_length

    @property
    def total_mass(self):
        return self.params.total_mass

    @property
    def com_offset(self):
        return self.params.com_offset

    @property
    def cd_perp(self):
        return self.params.cd_perp

    @property
    def hover_angle(self):
        return self.params.hover_angle

    @property
    def flap_angle_limits(self):
        return (self.params.flap_min, self.params.flap_max)

    def hover_angles(self):
        h = self.params.hover_angle
        return np.array([h, -h, h, -h])

    def with_params(self, **changes):
        return build_design(dataclasses.replace(self.params, **changes))


def _flap_one(p: DesignParams):
    """Build flap 1 (quadrant +x, -y) at zero flap angle."""
    psi = p.flap_azimuth
    s_hat = np.array([math.cos(psi), -math.sin(psi), 0.0])   # radial, hinge direction
    t_hat = np.array([-math.sin(psi), -math.cos(psi), 0.0])  # towards the kinked edge
    z_hat = np.array([0.0, 0.0, 1.0])
    r0, r1 = p.flap_root_radius, p.flap_tip_radius
    hw0, hw1 = 0.5 * p.flap_root_width, 0.5 * p.flap_tip_width
    if r1 <= r0 or hw0 <= 0.0 or hw1 <= 0.0:
        raise DesignError("flap planform must have positive span and widths")

    def pt(s, t):
        return s * s_hat + t * t_hat

    root_far, tip_far = pt(r0, -hw0), pt(r1, -hw1)
    f = p.kink_fraction
    root_fold = pt(r0, hw0 - 2.0 * hw0 * f)
    tip_fold = pt(r1, hw1 - 2.0 * hw1 * f)
    root_kink, tip_kink = pt(r0, hw0), pt(r1, hw1)

    # Kinked strip rotated upward about the fold line by the kink angle.
    axis = tip_fold - root_fold
    axis = axis / np.linalg.norm(axis)
    # Sign chosen so the outer (t > fold) edge rises.
    R = rotation_about_axis(axis, p.kink_angle)
    probe = R @ (root_kink - root_fold)
    if probe[2] < 0.0:
        R = rotation_about_axis(axis, -p.kink_angle)
    kink_pts = [root_fold, root_fold + R @ (root_kink - root_fold),
                root_fold + R @ (tip_kink - root_fold), tip_fold]
    main_pts = [root_far, root_fold, tip_fold, tip_far]

    area_main = PlatePanel.from_vertices(main_pts).area
    area_kink = PlatePanel.from_vertices(kink_pts).area if f > 0.0 else 0.0
    total_area = area_main + area_kink
    main = PlatePanel.from_vertices(main_pts, p.flap_mass * area_main / total_area, z_hat)
    if f > 0.0:
        kink = PlatePanel.from_vertices(kink_pts, p.flap_mass * area_kink / total_area, z_hat)
    else:
        kink = None

    m = main.mass + (kink.mass if kink else 0.0)
    com = (main.mass * main.centroid + (kink.mass * kink.centroid if kink else 0.0)) / m \
        if m > 0.0 else main.centroid
    # Hinge runs radially through the flap centre of mass.
    hinge_point = com.copy()

    rod_area = math.pi / 4.0 * (p.rod_diameter ** 2 - max(p.rod_diameter - 2.0 * p.rod_wall, 0.0) ** 2)
    rod_mass = p.rod_density * rod_area * p.rod_length
    return main, kink, hinge_point, s_hat, rod_mass


def rotation_about_axis(axis, angle):
    """Right-handed rotation matrix (Rodrigues)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def build_design(params: DesignParams | None = None, flaps=None) -> RobotDesign:
    """Validate ``params`` and derive panels, centre of mass and inertia.

    ``flaps`` may override the generated flap set; it must be the symmetric
    image of its first element.
    """
    p = params or DesignParams()
    if p.total_mass <= 0.0:
        raise DesignError("total mass must be positive")
    for name in ("base_mass", "flap_mass", "battery_mass", "rod_density"):
        if getattr(p, name) < 0.0:
            raise DesignError(f"{name} must be non-negative")
    for name in ("side_length", "base_side", "rod_length", "rod_diameter"):
        if getattr(p, name) <= 0.0:
            raise DesignError(f"{name} must be positive")
    if not 0.0 <= p.kink_angle < math.pi / 2.0:
        raise DesignError("kink angle must lie in [0, pi/2)")
    if not 0.0 <= p.kink_fraction < 1.0:
        raise DesignError("kink fraction must lie in [0, 1)")
    if p.com_offset < 0.0:
        raise DesignError("com offset is measured downwards and must be >= 0")
    if not p.flap_min < 0.0 < p.flap_max or not math.isclose(-p.flap_min, p.flap_max):
        raise DesignError("flap limits must be symmetric about zero")
    if not p.flap_min <= p.hover_angle <= p.flap_max:
        raise DesignError("hover angle outside flap limits")

    h = 0.5 * p.base_side
    base = PlatePanel.from_vertices([[h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]],
                                    p.base_mass)

    if flaps is None:
        main, kink, hinge_point, hinge_dir, rod_mass = _flap_one(p)
        flap1 = FlapGeometry(main_panel=main, kink_panel=kink, kink_angle=p.kink_angle,
                             hinge_axis_point=hinge_point, hinge_axis_dir=hinge_dir,
                             mass=p.flap_mass, rod_mass=rod_mass, rod_length=p.rod_length)
        flaps = tuple(_mirror_flap(flap1, S) for S in FLAP_SYMMETRY)
    else:
        flaps = tuple(flaps)
        _check_symmetric(flaps)

    rod_total = sum(f.rod_mass for f in flaps)
    structure = p.base_mass + sum(f.mass for f in flaps) + rod_total
    payload = p.total_mass - structure
    if payload < -1e-12:
        raise DesignError(f"component masses ({structure:.4f} kg) exceed total mass")
    payload = max(payload, 0.0)
    battery = min(p.battery_mass, payload)
    electronics = payload - battery

    # Centre of mass of the structure; flap CoMs lie on their hinges, so the
    # structure CoM does not depend on the flap angles.
    moment = base.mass * base.centroid
    for f in flaps:
        moment = moment + (f.mass + f.rod_mass) * f.hinge_axis_point
    target_z = -p.com_offset
    point_masses = []
    if payload > 0.0:
        z_mean = (p.total_mass * target_z - moment[2]) / payload
        z_elec = z_mean + p.pillar_spread * battery / payload
        z_batt = z_mean - p.pillar_spread * electronics / payload
        point_masses = [(electronics, np.array([0.0, 0.0, z_elec])),
                        (battery, np.array([0.0, 0.0, z_batt]))]
    total_moment = moment + sum((m * r for m, r in point_masses), np.zeros(3))
    com = total_moment / p.total_mass
    design = RobotDesign(params=p, base_panel=base, flaps=flaps,
                         point_masses=tuple(point_masses), com=com,
                         inertia=np.zeros((3, 3)))
    inertia = compute_inertia(design)
    object.__setattr__(design, "inertia", inertia)
    return design


def _mirror_flap(flap: FlapGeometry, S):
    def tf(panel):
        return None if panel is None else panel.transformed(S)

    return dataclasses.replace(
        flap, main_panel=tf(flap.main_panel), kink_panel=tf(flap.kink_panel),
        hinge_axis_point=S @ flap.hinge_axis_point, hinge_axis_dir=S @ flap.hinge_axis_dir)


def _check_symmetric(flaps, tol=1e-12):
    if len(flaps) != 4:
        raise DesignError("exactly four flaps are required")
    ref = flaps[0]
    for k, S in enumerate(FLAP_SYMMETRY):
        expect = _mirror_flap(ref, S)
        got = flaps[k]
        if (abs(expect.mass - got.mass) > tol
                or not np.allclose(expect.hinge_axis_point, got.hinge_axis_point, atol=tol)
                or not np.allclose(expect.hinge_axis_dir, got.hinge_axis_dir, atol=tol)):
            raise DesignError(f"flap {k + 1} is not the symmetric image of flap 1")
        for pe, pg in zip(expect.panels, got.panels):
            if (pe is None) != (pg is None):
                raise DesignError(f"flap {k + 1} panel set differs from flap 1")
            if pe is not None and not np.allclose(pe.vertices, pg.vertices, atol=tol):
                raise DesignError(f"flap {k + 1} is not the symmetric image of flap 1")


def flap_rotation(design: RobotDesign, index, angle):
    """Rotation matrix of flap ``index`` (0-based) about its hinge."""
    return rotation_about_axis(design.flaps[index].hinge_axis_dir, angle)


def check_flap_angles(design: RobotDesign, flap_angles):
    a = np.asarray(flap_angles, dtype=float)
    lo, hi = design.flap_angle_limits
    if np.any(a < lo - 1e-12) or np.any(a > hi + 1e-12):
        raise SaturationError("flap angle outside design limits", np.clip(a, lo, hi))
    return a


def plate_frames(design: RobotDesign, flap_angles):
    """Panels posed for the given flap angles, in the body frame.

    Returns a list of 9 ``(panel, owner)`` tuples: the base first (owner 0)
    followed by the main and kink panels of flaps 1..4 (owner 1..4).  Flaps
    without a kink contribute only their main panel.
    """
    angles = check_flap_angles(design, flap_angles)
    out = [(design.base_panel, 0)]
    for k, flap in enumerate(design.flaps):
        R = rotation_about_axis(flap.hinge_axis_dir, angles[k])
        for panel in flap.panels:
            if panel is None:
                continue
            out.append((panel.transformed(R, pivot=flap.hinge_axis_point), k + 1))
    return out


def compute_inertia(design: RobotDesign, flap_angles=None):
    """Inertia tensor about the robot CoM, flaps posed at ``flap_angles``
    (hover configuration by default)."""
    if flap_angles is None:
        flap_angles = design.hover_angles()
    c = design.com
    second = np.zeros((3, 3))   # integral of r r^T dm about body origin
    rod_extra = np.zeros((3, 3))
    for panel, _ in plate_frames(design, flap_angles):
        second += panel.second_moment()
    for flap in design.flaps:
        if flap.rod_mass > 0.0:
            r = flap.hinge_axis_point
            second += flap.rod_mass * np.outer(r, r)
            h = flap.hinge_axis_dir
            rod_extra += flap.rod_mass * flap.rod_length ** 2 / 12.0 * (np.eye(3) - np.outer(h, h))
    for m, r in design.point_masses:
        second += m * np.outer(r, r)
    mass = design.params.total_mass
    # Shift the second moment to the CoM, then convert to an inertia tensor.
    second_c = second - mass * np.outer(c, c)
    inertia = np.trace(second_c) * np.eye(3) - second_c + rod_extra
    return 0.5 * (inertia + inertia.T)


def mirror_panels_yz(panels):
    """Reflect a list of posed panels through the yz-plane."""
    S = np.diag([-1.0, 1.0, 1.0])
    return [(p.transformed(S), owner) for p, owner in panels]
