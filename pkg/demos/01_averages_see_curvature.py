"""
Averages see curvature
======================

On a round 2-sphere of radius 1 the normalised area of a small geodesic
sphere falls short of the Euclidean value, and the shortfall at order r^2 is
set by the scalar curvature.  We fit ``c0 + c2 r^2`` to the volume ratios and
to a ball average, and repeat the experiment on a flat torus where only the
Laplacian of the test function contributes.
"""
# %%
import numpy as np

from weakflow.averaging import expansion_fit
from weakflow.spaces import make_flat_torus, make_round_sphere

sphere = make_round_sphere(2, 1.0)
north = np.array([0.0, 0.0, 1.0])
one = lambda p: np.ones(len(np.atleast_2d(p)))  # noqa: E731

# %% [markdown]
# Sphere ratio (theta), ball ratio (eta) and the mixed ball operator (beta)
# acting on a constant.  Scalar curvature 2 predicts -1/6, -1/12 and -1/16.

# %%
for kind, target in [("theta", -1 / 6), ("eta", -1 / 12), ("beta", -1 / 16)]:
    fit = expansion_fit(kind, sphere, 0.0, north, one)
    print(f"{kind:6s} c0 = {fit.c0:.6f}  c2 = {fit.c2:+.5f}  (closed form {target:+.5f})")

# %% [markdown]
# On the flat torus the ball average of cos(2 pi x) at x = 0 has
# c2 = Laplacian / (2 (n + 2)) = -pi^2 / 2.

# %%
torus = make_flat_torus(2, 1.0)
cosx = lambda p: np.cos(2 * np.pi * np.atleast_2d(p)[:, 0])  # noqa: E731
fit = expansion_fit("nu", torus, 0.0, np.zeros(2), cosx)
print(f"nu     c2 = {fit.c2:+.4f}  (closed form {-np.pi**2 / 2:+.4f})")
print("ladder:", np.round(fit.ladder, 4))
