"""Refinement sweeps on Brownian paths coupled across levels by bridge bisection.

The conditional derivative integrated directly and the variation-of-constants
sum J_T sum_i K_i sigma(X_i) hdot_i dt differ by a first-order term on the
Heisenberg group, so halving dt halves the distance.  On the circle both
are exact and agree to rounding.  The same table is produced by
``degdiff sweep calcul1 --model heisenberg --levels 64,128,256,512``.

Run:  python3 demos/convergence_sweep.py
"""

from degdiff import make_model
from degdiff.estimators import representation_sweep, jk_inverse_sweep

for name in ("heisenberg", "circle"):
    r = representation_sweep(make_model(name), [64, 128, 256, 512], 400, seed=0)
    print(f"{name}: relative L2 distance")
    for row in r["table"]:
        print(f"  steps {row['steps']:5d}  dt {row['dt']:.5f}  {row['relative_l2']:.3e}")

r = jk_inverse_sweep(make_model("circle"), [64, 512], 400)
print("\ncircle: median sup |J K - I| =", [row["median_sup_error"] for row in r["table"]])
