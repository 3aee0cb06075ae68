"""Kink-angle and hover-angle sweeps plus the scaling and specific-power
calculators."""
import math

import numpy as np

from morphsoar import design_studio as ds
from morphsoar.aerodynamics import calibrate_hover
from morphsoar.harness import output_dir
from morphsoar.morphology import build_design

out = output_dir()
out.mkdir(parents=True, exist_ok=True)
base = build_design()

kinks = np.radians(np.arange(0.0, 60.01, 2.5))
ks = ds.sweep_kink(base, kinks)
ks.to_csv(out / "demo_sweep_kink.csv")
print("kink [deg]  f_aa [1/s^2]  roll stable")
for p in ks.points:
    print(f"{math.degrees(p.value):9.1f}  {p.constants.f_alpha_alpha:12.2f}  {p.stable}")
print(f"optimum kink {math.degrees(ks.optimum):.1f} deg ({ks.rule})\n")

hs = ds.sweep_hover_angle(base, np.radians(np.arange(8.0, 44.1, 2.0)))
hs.to_csv(out / "demo_sweep_hover.csv")
scores = ds.authority_scores(hs)
print("theta_H [deg]  " + "  ".join(f"{k:>10s}" for k in ds.AUTHORITY_KEYS) + "  score")
for i, p in enumerate(hs.points):
    if not p.feasible:
        print(f"{math.degrees(p.value):13.1f}  infeasible: {p.error}")
        continue
    vals = "  ".join(f"{getattr(p.constants, k):10.2f}" for k in ds.AUTHORITY_KEYS)
    print(f"{math.degrees(p.value):13.1f}  {vals}  {scores[i]:.3f}")
print(f"optimum hover angle {math.degrees(hs.optimum):.1f} deg\n")

design, _ = calibrate_hover(base, 10.0)
for s, q in ((0.5, 0.25), (1.0, 4.0), (2.0, 1.0)):
    r = ds.scale_analysis(design, s, q * design.total_mass)
    print(f"scale {s:3.1f}, mass x{q:4.2f}: v_air {r.v_air:5.2f} m/s, Re {r.reynolds:9.0f}, "
          f"agility x{r.linear_ratio:.3f} (linear) x{r.angular_ratio:.3f} (angular)")

p, spc = ds.specific_power(2 * 0.925, 33 / 60, 0.340)
print(f"\nhover power {p:.2f} W, specific power {spc:.3g} W/kg")
