"""Finite-sample verification of weak (super) Ricci flows on metric measure spaces.

Modules
-------
spaces       analytic model flows and sampled metric-measure snapshots
averaging    ball/sphere averaging and ratio operators, expansion fits
propagators  Trotter-Chernoff products for heat and conjugate heat flows
transport    diffusions, cost families and exact/entropic optimal transport
verify       WSRF, coupled contraction, trace and saturation verdicts
cli          scenario runner (``weakflow`` console script)
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .spaces import (  # noqa: F401
    CustomScale,
    FlatTorus,
    RicciBackward,
    RoundSphere,
    SampledSpace,
    Static,
    make_flat_torus,
    make_round_sphere,
    sample,
)
