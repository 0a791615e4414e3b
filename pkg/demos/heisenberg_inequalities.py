"""Poincare and log-Sobolev inequalities for Brownian motion on the Heisenberg group.

The horizontal coordinate x1 is a plain Brownian motion, so its Poincare
inequality is an equality.  The vertical coordinate x3 (half the Levy
area) only sees the noise through the rotating fields, and the path-space
energy is twice its variance.  The exponential exp(x1/2) saturates the
log-Sobolev constant 2.

Run:  python3 demos/heisenberg_inequalities.py
"""

import math

from degdiff import TimeGrid, make_model, parse
from degdiff.estimators import check_logsob_path, check_poincare_path

H = make_model("heisenberg")
grid = TimeGrid(1.0, 128)
n_paths = 4000


def show(rep):
    print(f"  {rep.lhs.mean:.4f} +- {rep.lhs.stderr:.4f}  <=  {rep.rhs.mean:.4f} +- {rep.rhs.stderr:.4f}"
          f"   slack {rep.slack:+.4f}  ({rep.verdict})")


print("Var F <= E|P grad F|^2")
for text in ("x1", "x3", "x1*x3 + x2^2"):
    print(f" F = {text}")
    show(check_poincare_path(H, parse(text, 3), [1.0], grid, n_paths, seed=1))

print("\nEnt F^2 <= 2 E|P grad F|^2")
for text in ("exp(x1/2)", "x3 + 2"):
    print(f" F = {text}")
    show(check_logsob_path(H, parse(text, 3), [1.0], grid, n_paths, seed=1))
print(f" (exp(x1/2) has both sides equal to e^(1/2)/2 = {0.5 * math.exp(0.5):.4f})")

# a two-time cylinder: x_{1/2} and x_1 packed into arity 6
print("\nTwo-time cylinder F = x1(1/2) * x3(1) on the same paths")
show(check_poincare_path(H, parse("x1*x6", 6), [0.5, 1.0], grid, n_paths, seed=1))
