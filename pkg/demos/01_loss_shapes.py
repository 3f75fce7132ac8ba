"""How the exponent reshapes a log-metric loss.

Run:  python demos/01_loss_shapes.py [out.svg]

(-ln x)^gamma is flat near a good score when gamma < 1, yet it still rises
steeply as the score approaches zero.  The slope magnitude bottoms out at
x* = e^(gamma - 1); for gamma >= 1 there is no such dip and the slope only
shrinks as x grows.
"""
import sys

import numpy as np

from elseg.losses import nonlinearity, nonlinearity_slope, slope_stationary_point
from elseg.plotting import plot_loss_curves

gammas = (0.3, 0.5, 1.0, 2.0)
x = np.array([0.05, 0.2, 0.5, 0.8, 0.95])

print("loss value at a few scores")
print("gamma  " + "  ".join(f"x={v:<5}" for v in x))
for g in gammas:
    print(f"{g:<5}  " + "  ".join(f"{f:7.3f}" for f in nonlinearity(x, g)))
print("1 - x  " + "  ".join(f"{1 - v:7.3f}" for v in x))

print("\nwhere |slope| is smallest")
for g in gammas:
    if g < 1:
        xs = slope_stationary_point(g)
        print(f"gamma={g}: x* = {xs:.4f}, |f'(x*)| = {abs(nonlinearity_slope(xs, g)):.3f}")
    else:
        print(f"gamma={g}: no interior minimum, |f'| keeps falling toward x = 1")

out = sys.argv[1] if len(sys.argv) > 1 else "loss_shapes.svg"
print(f"\nplot written to {plot_loss_curves(gammas, out)}")
