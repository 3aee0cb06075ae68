"""Two-variant roll identification, first on a synthetic plant with known
constants and then on simulated flights of the robot."""
from morphsoar.aerodynamics import calibrate_hover
from morphsoar.harness import output_dir
from morphsoar.linearization import extract_constants
from morphsoar.morphology import build_design
from morphsoar.sysid import SyntheticPlant, identify, identify_robot, multisine_response, report_csv

plant = SyntheticPlant(a=230.0, b=-30.0, c=-60.0, d=5.0)
gains = ((-0.1, -0.3, 0.05, 0.03), (-0.1, -0.1, 0.05, 0.03))
data = [multisine_response(plant, g, noise=0.01, seed=k) for k, g in enumerate(gains)]
ol = identify(data, gains, window=None).open_loop
print("synthetic plant   true  identified")
for k in "abcd":
    print(f"  {k}           {getattr(plant, k):7.1f}  {getattr(ol, k):9.2f}")

design, _ = calibrate_hover(build_design(), 10.0)
constants = extract_constants(design, 10.0)
res = identify_robot(design, constants, duration=60.0, seed=0, turbulence=0.01, band=(0.3, 10.0),
                     excitation_amplitude=0.03)
text = report_csv(res, constants)
out = output_dir()
out.mkdir(parents=True, exist_ok=True)
(out / "demo_sysid.csv").write_text(text)
print()
print(text)
