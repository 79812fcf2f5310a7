"""
Telling a Ricci flow from a static metric
=========================================

The trace functional compares how fast squared distances grow with their
size.  On the shrinking sphere R(tau)^2 = 1 + 2 tau it tends to 1 on balls
and 2 on spheres.  Balancing it against the volume deficit gives a defect
that vanishes exactly on Ricci flows: zero for the shrinking sphere and the
flat torus, -1 for a static round sphere.
"""
# %%
import warnings

from weakflow.errors import VirtuallyPscWarning
from weakflow.spaces import RicciBackward, make_flat_torus, make_round_sphere, sample
from weakflow.verify import SaturationConfig, saturation_defect, trace_functional

warnings.simplefilter("ignore", VirtuallyPscWarning)

shrinking = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.5))
for eps in (0.4, 0.2, 0.1, 0.05):
    ball = trace_functional(shrinking, 0.0, None, eps, "ball")
    shell = trace_functional(shrinking, 0.0, None, eps, "sphere")
    print(f"eps = {eps:<5} ball {ball:.5f}  sphere {shell:.5f}")

# %% [markdown]
# The same defect on sampled point clouds of about two thousand points.

# %%
spaces = {
    "shrinking sphere": sample(shrinking, 2000, seed=0, strategy="quasi-uniform"),
    "static sphere": sample(make_round_sphere(2, 1.0, orientation="backward"), 2000, seed=0,
                            strategy="quasi-uniform"),
    "static torus": sample(make_flat_torus(2, 1.0, orientation="backward"), 2025, seed=0,
                           strategy="quasi-uniform"),
}
for name, space in spaces.items():
    fit = saturation_defect(space, 0.0, 0, SaturationConfig())
    print(f"{name:17s} defect {fit.c0:+.4f}")
