"""
Transport contraction and its failure
=====================================

Two point masses diffused by the conjugate heat flow on a static circle draw
closer in every convex transport cost.  On a torus whose distances grow
backwards in time the same experiment drives them apart, and the gradient
bound of the forward heat flow fails with it.
"""
# %%
import math

import numpy as np

from weakflow.propagators import ChernoffSchedule
from weakflow.spaces import CustomScale, make_flat_torus, sample
from weakflow.transport import CostSpec, Delta
from weakflow.verify import check_coupled_contraction, check_wsrf

circle = sample(make_flat_torus(1, 1.0, orientation="backward", time_interval=(0.0, 0.2)), 128, seed=0,
                strategy="quasi-uniform")
grid = np.linspace(0.0, 0.2, 5)
for cost in (CostSpec.distance(), CostSpec.distance_squared()):
    rep = check_coupled_contraction(circle, Delta(0), Delta(42), cost, grid, ChernoffSchedule(8, 8, "beta"),
                                    slack=1e-6)
    print(f"static circle, {cost.kind:17s} {rep.verdict:5s}", np.round(rep.details["costs"], 6))

# %%
law = CustomScale(lambda t: math.exp(-2 * t), lambda t: -2 * math.exp(-2 * t), label="exp(-2t)")
flow = sample(make_flat_torus(2, 10.0, law, time_interval=(0.0, 0.3)), 400, seed=0, strategy="quasi-uniform")
f0 = np.cos(2 * np.pi * flow.points[:, 0] / 10.0)
wsrf = check_wsrf(flow, f0, np.linspace(0.0, 0.3, 5), ChernoffSchedule(8, 8))
print("expanding torus, Lipschitz constants:", np.round(wsrf.details["lipschitz"], 4), wsrf.verdict)
back = flow.reversed()
rep = check_coupled_contraction(back, Delta(0), Delta(133), CostSpec.distance_squared(),
                                np.linspace(0.0, 0.3, 5), ChernoffSchedule(8, 8, "beta"), slack=1e-6)
print("expanding torus, W2^2 costs:", np.round(rep.details["costs"], 4), rep.verdict)
print("first witness:", rep.witnesses[0])
