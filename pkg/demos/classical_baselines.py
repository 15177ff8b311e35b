"""Fit one synthetic curve with every classical parameterization/knot pairing."""
import warnings

import numpy as np

from splinegen.classical import classical_fit
from splinegen.cli import render_svg
from splinegen.dataset import GenConfig, generate_record
from splinegen.kernel import IllConditionedWarning

warnings.simplefilter("ignore", IllConditionedWarning)

rec, _ = generate_record(GenConfig(), seed=11)
pts = rec.ordered_points
n_ctrl = rec.curve.n_ctrl
print(f"{len(pts)} points, ground truth has {n_ctrl} control points")

best = None
print(f"{'method':<26}{'max':>10}{'mse':>10}{'hausdorff':>11}")
for pm in ("uniform", "chord", "centripetal"):
    for km in ("uniform", "avg", "ktp", "nktp"):
        curve, u, rep = classical_fit(pts, 3, n_ctrl, pm, km, subsample_avg=True)
        print(f"{pm + '+' + km:<26}{rep.max_error:>10.2e}{rep.mse_error:>10.2e}{rep.hausdorff:>11.2e}")
        if best is None or rep.max_error < best[0]:
            best = (rep.max_error, pm, km, curve)

# more control points usually help, up to the point count
for extra in (0, 4, 8):
    _, _, rep = classical_fit(pts, 3, n_ctrl + extra, "centripetal", "ktp")
    print(f"centripetal+ktp with {n_ctrl + extra} control points: max error {rep.max_error:.2e}")

err, pm, km, curve = best
with open("classical_best.svg", "w") as fh:
    fh.write(render_svg(curve, pts, "xy"))
print(f"best pairing {pm}+{km} ({err:.2e}) written to classical_best.svg")
