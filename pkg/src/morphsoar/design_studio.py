"""Design-space sweeps and closed-form analyses.

Kink-angle and hover-angle sweeps recalibrate the hover drag coefficient at
every grid point and extract the linear constants there.  Scaling and the
specific-power calculator are short formulas with a finite-difference check
of the agility laws on the rescaled nonlinear model.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aerodynamics import STANDARD_AIR, CalibrationError, calibrate_hover
from .linearization import DynamicsConstants, build_decoupled, extract_constants, stability
from .morphology import DesignError, RobotDesign, build_design

DEFAULT_MARGIN = -10.0
AUTHORITY_KEYS = ("f_alpha_u1", "f_beta_u2", "f_gamma_u3", "f_z_u4")


@dataclass(frozen=True)
class SweepPoint:
    value: float
    constants: DynamicsConstants | None
    stable: bool | None
    cd_perp: float | None = None
    error: str | None = None

    @property
    def feasible(self):
        return self.constants is not None


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    grid: tuple
    points: tuple
    optimum: float | None
    rule: str

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if len(g) > 1 and not (np.all(np.diff(g) > 0) or np.all(np.diff(g) < 0)):
            raise ValueError("sweep grid must be strictly monotone")
        if len(self.points) != len(self.grid):
            raise ValueError("one record per grid point")

    def series(self, key):
        """Constant ``key`` along the grid (nan at infeasible points)."""
        return np.array([getattr(p.constants, key) if p.feasible else np.nan for p in self.points])

    def to_csv(self, path=None):
        keys = list(DynamicsConstants.__dataclass_fields__)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.parameter + "_rad", "feasible", "stable", "cd_perp"] + keys)
        for p in self.points:
            if p.feasible:
                row = [repr(p.value), 1, int(bool(p.stable)), repr(p.cd_perp)]
                row += [repr(float(getattr(p.constants, k))) for k in keys]
            else:
                row = [repr(p.value), 0, "", ""] + [""] * len(keys)
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _evaluate(design: RobotDesign, changes, v_air, air):
    try:
        d = design.with_params(**changes)
        d, cd = calibrate_hover(d, v_air, air)
        c = extract_constants(d, v_air, air)
    except (CalibrationError, DesignError) as exc:
        return None, None, None, str(exc)
    verdict = stability(build_decoupled(c)).stable["roll"]
    return c, verdict, cd, None


def _run_grid(design, name, grid, v_air, air, workers):
    grid = tuple(float(g) for g in grid)

    def one(v):
        c, ok, cd, err = _evaluate(design, {name: v}, v_air, air)
        return SweepPoint(v, c, ok, cd, err)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return grid, tuple(pool.map(one, grid))


def sweep_kink(base_design: RobotDesign, kink_grid, v_air=10.0, margin=DEFAULT_MARGIN,
               air=STANDARD_AIR, workers=None) -> SweepResult:
    """Roll stiffness ``f_alpha_alpha`` across kink angles (rad).

    The optimum is the smallest kink whose ``f_alpha_alpha`` lies below
    ``margin`` with a stable roll block."""
    g = np.asarray(kink_grid, dtype=float)
    if np.any(g < 0.0) or np.any(g > math.radians(60.0) + 1e-12):
        raise ValueError("kink grid must lie within [0, 60] deg")
    grid, points = _run_grid(base_design, "kink_angle", g, v_air, air, workers)
    ok = [p.value for p in points
          if p.feasible and p.stable and p.constants.f_alpha_alpha < margin]
    return SweepResult("kink_angle", grid, points, min(ok) if ok else None,
                       f"smallest kink with f_alpha_alpha < {margin:g} and stable roll")


def authority_scores(result: SweepResult):
    """Minimum over the four input constants, each normalized by its
    maximum over the feasible grid points."""
    mags = np.abs(np.column_stack([result.series(k) for k in AUTHORITY_KEYS]))
    peak = np.nanmax(mags, axis=0)
    return np.min(mags / peak, axis=1)


def sweep_hover_angle(design: RobotDesign, theta_grid, v_air=10.0, air=STANDARD_AIR,
                      workers=None) -> SweepResult:
    """Input authorities across hover angles (rad); the optimum maximizes
    the normalized minimum authority."""
    g = np.asarray(theta_grid, dtype=float)
    if np.any(g <= math.radians(5.0)) or np.any(g >= math.radians(45.0)):
        raise ValueError("hover-angle grid must lie within (5, 45) deg")
    grid, points = _run_grid(design, "hover_angle", g, v_air, air, workers)
    res = SweepResult("hover_angle", grid, points, None, "max of min normalized input authority")
    scores = authority_scores(res)
    if np.all(np.isnan(scores)):
        return res
    return dataclasses.replace(res, optimum=grid[int(np.nanargmax(scores))])


# ------------------------------------------------------------------ scaling

@dataclass(frozen=True)
class ScaleReport:
    """Scaled design summary.  Agilities are finite-difference input
    constants: linear agility is the vertical acceleration per unit input in
    body lengths (1/(s^2 rad)), angular agility the roll acceleration per
    unit input (1/(s^2 rad))."""

    factor: float
    mass: float
    v_air: float
    reynolds: float
    linear_agility: float
    angular_agility: float
    linear_ratio: float = 1.0
    angular_ratio: float = 1.0
    base: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for k in ("factor", "mass", "v_air", "reynolds", "linear_agility", "angular_agility"):
            if not getattr(self, k) > 0.0:
                raise ValueError(f"{k} must be positive")


def reynolds_number(v_air, length, air=STANDARD_AIR):
    return air.air_density * v_air * length / air.dynamic_viscosity


def scaled_airflow(v_air, mass_ratio, factor):
    """Airflow that keeps the hover balance: ``v ~ sqrt(m / l^2)``."""
    if not (factor > 0.0 and mass_ratio > 0.0):
        raise ValueError("scale factor and mass ratio must be positive")
    return v_air * math.sqrt(mass_ratio / factor ** 2)


def _agility(design, v_air, air):
    c = extract_constants(design, v_air, air)
    return abs(c.f_z_u4) / design.side_length, abs(c.f_alpha_u1)


def scale_analysis(design: RobotDesign, factor, new_mass, v_air=10.0, air=STANDARD_AIR) -> ScaleReport:
    """Rescale lengths by ``factor`` and mass to ``new_mass`` (kg).

    ``design`` should already hover at ``v_air``.  The scaled airflow follows
    from the hover balance, the scaled design is recalibrated there and both
    agilities are compared against the unscaled design."""
    if not (factor > 0.0 and new_mass > 0.0):
        raise ValueError("scale factor and mass must be positive")
    v_new = scaled_airflow(v_air, new_mass / design.total_mass, factor)
    scaled = build_design(design.params.scaled(factor, new_mass))
    scaled, _ = calibrate_hover(scaled, v_new, air)
    lin0, ang0 = _agility(design, v_air, air)
    lin, ang = _agility(scaled, v_new, air)
    return ScaleReport(factor, float(new_mass), v_new, reynolds_number(v_new, scaled.side_length, air),
                       lin, ang, lin / lin0, ang / ang0,
                       {"v_air": v_air, "reynolds": reynolds_number(v_air, design.side_length, air),
                        "linear_agility": lin0, "angular_agility": ang0})


# -------------------------------------------------------------- specific power

def specific_power(energy_wh=None, time_h=None, mass_kg=None, power_w=None):
    """Hover power (W) and specific power (W/kg).

    Either ``energy_wh`` and ``time_h`` or a measured ``power_w`` must be
    given."""
    if mass_kg is None or not mass_kg > 0.0:
        raise ValueError("take-off mass must be positive")
    if power_w is None:
        if energy_wh is None or time_h is None:
            raise ValueError("need energy and flight time, or power")
        if not (energy_wh > 0.0 and time_h > 0.0):
            raise ValueError("energy and flight time must be positive")
        power_w = energy_wh / time_h
    elif not power_w > 0.0:
        raise ValueError("power must be positive")
    return float(power_w), float(power_w / mass_kg)
