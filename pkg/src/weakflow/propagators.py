"""Finite-stage Trotter-Chernoff products for heat and conjugate heat flows.

The heat propagator of a frozen slice is approximated by ``j`` iterations of
a ball (or sphere) average whose radius is tuned so that one step matches
``exp(dt * Laplacian)`` to first order; the conjugate propagator does the
same with the mixed operators ``beta``/``alpha`` whose generator is
``Laplacian - scal``. Dynamic propagators chain ``m`` frozen-time stages.

All products run on sampled spaces. Stage ``l`` of an ``m``-stage product
is frozen at ``s1 + l * (s2 - s1) / m``; stages are applied earliest time
first, so the rightmost factor of the written product ``l = m-1, ..., 0``
acts first.
"""
from __future__ import annotations

import csv
import math
import time as _time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .averaging import OperatorKind, ScalarField, as_field, operator_matrix
from .errors import UnsupportedBackendError, VirtuallyPscWarning

__all__ = [
    "ChernoffSchedule",
    "PropagationResult",
    "static_heat",
    "dynamic_heat",
    "static_conjugate",
    "dynamic_conjugate",
    "heat_kernel",
    "delta_density",
    "duality_gap",
    "RefinementStudy",
    "refinement_study",
]

HEAT_KERNELS = ("nu", "sigma")
CONJUGATE_KERNELS = ("beta", "alpha")


@dataclass(frozen=True)
class ChernoffSchedule:
    """Stage counts for a product formula.

    ``mode="double"`` uses ``m`` outer stages of ``j`` inner averages each;
    ``mode="single"`` uses ``m`` single averages. Radii follow from the
    kernel and the time increment and are never stored.
    """

    m: int = 1
    j: int = 1
    kernel: str = "nu"
    mode: str = "double"

    def __post_init__(self):
        if int(self.m) < 1 or int(self.j) < 1:
            raise ValueError("stage counts must be >= 1")
        if self.kernel not in HEAT_KERNELS + CONJUGATE_KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.mode not in ("double", "single"):
            raise ValueError("mode must be 'double' or 'single'")

    @property
    def conjugate(self):
        return self.kernel in CONJUGATE_KERNELS

    def radius(self, n, dt, steps):
        """Radius of one of ``steps`` averages sharing the increment ``dt``."""
        dim = n + 2 if self.kernel in ("nu", "beta") else n
        factor = 8.0 if self.conjugate else 2.0
        return math.sqrt(factor * dim * dt / steps)

    def refined(self, factor=2):
        return ChernoffSchedule(self.m * factor, self.j * factor if self.mode == "double" else self.j,
                                self.kernel, self.mode)

    def with_kernel(self, kernel):
        return ChernoffSchedule(self.m, self.j, kernel, self.mode)

    def to_json(self):
        return {"m": self.m, "j": self.j, "kernel": self.kernel, "mode": self.mode}


@dataclass
class PropagationResult:
    field: ScalarField
    stage_log: list
    converged_estimate: np.ndarray | None = None

    @property
    def values(self):
        return self.field.values

    def to_json(self):
        out = {"time": self.field.time, "values": self.field.values.tolist(), "stage_log": self.stage_log}
        if self.converged_estimate is not None:
            out["converged_estimate"] = np.asarray(self.converged_estimate).tolist()
        return out


def _require_sampled(space):
    if space.backend != "sampled":
        raise UnsupportedBackendError("product formulas run on sampled spaces; use sample() first")


def _check_interval(space, a, b):
    if a > b:
        raise ValueError(f"start time {a} exceeds end time {b}")
    space.check_time(a)
    space.check_time(b)


def _iterate(space, kind, t, r, values, steps, log, stage):
    A = operator_matrix(kind, space, t, r)
    for _ in range(steps):
        values = A @ values
        log.append({"stage": stage, "time": float(t), "radius": float(r), "sup": float(np.max(np.abs(values)))})
    return values


def _values(f, space, t):
    if isinstance(f, ScalarField):
        if f.is_callable:
            raise TypeError("propagators need sampled fields")
        return f.values.astype(float)
    return ScalarField(f, t, space).values


def _static(space, t_fixed, s1, s2, schedule, f, allowed):
    _require_sampled(space)
    if schedule.kernel not in allowed:
        raise ValueError(f"kernel must be one of {allowed}, got {schedule.kernel!r}")
    space.check_time(t_fixed)
    if s1 > s2:
        raise ValueError(f"start time {s1} exceeds end time {s2}")
    values = _values(f, space, t_fixed)
    log = []
    if s2 > s1:
        r = schedule.radius(space.n, s2 - s1, schedule.j)
        values = _iterate(space, schedule.kernel, t_fixed, r, values, schedule.j, log, 0)
    return PropagationResult(ScalarField(values, t_fixed, space), log)


def static_heat(space, t_fixed, s1, s2, schedule, f):
    """``(nu_r)^j f`` on the slice ``t_fixed`` with ``r = sqrt(2 (n+2) (s2 - s1) / j)``."""
    return _static(space, t_fixed, s1, s2, schedule, f, HEAT_KERNELS)


def _warn_psc(space):
    if not getattr(space, "virtually_psc", False):
        warnings.warn("space is not flagged virtually psc; norm bounds of the conjugate product are not "
                      "guaranteed", VirtuallyPscWarning, stacklevel=3)


def static_conjugate(space, tau_fixed, tau1, tau2, schedule, f):
    """``(beta_r)^j f`` on the slice ``tau_fixed`` with ``r = sqrt(8 (n+2) (tau2 - tau1) / j)``."""
    _warn_psc(space)
    return _static(space, tau_fixed, tau1, tau2, schedule, f, CONJUGATE_KERNELS)


def _dynamic(space, s1, s2, schedule, f, allowed):
    _require_sampled(space)
    if schedule.kernel not in allowed:
        raise ValueError(f"kernel must be one of {allowed}, got {schedule.kernel!r}")
    _check_interval(space, s1, s2)
    values = _values(f, space, s1)
    log = []
    m = schedule.m
    dt = (s2 - s1) / m
    if s2 > s1:
        steps = schedule.j if schedule.mode == "double" else 1
        r = schedule.radius(space.n, dt, steps)
        for ell in range(m):
            values = _iterate(space, schedule.kernel, s1 + ell * dt, r, values, steps, log, ell)
    return PropagationResult(ScalarField(values, s2, space), log)


def dynamic_heat(space, s1, s2, schedule, f):
    """Heat propagator ``P_{s1, s2}`` along a forward-oriented flow."""
    if space.orientation != "forward":
        raise ValueError("dynamic_heat needs a forward-oriented space; use space.reversed()")
    return _dynamic(space, s1, s2, schedule, f, HEAT_KERNELS)


def dynamic_conjugate(space, tau1, tau2, schedule, f):
    """Conjugate heat propagator ``P*_{tau1, tau2}`` along a backward-oriented flow."""
    if space.orientation != "backward":
        raise ValueError("dynamic_conjugate needs a backward-oriented space; use space.reversed()")
    _warn_psc(space)
    return _dynamic(space, tau1, tau2, schedule, f, CONJUGATE_KERNELS)


def delta_density(space, t, y):
    """Density of the unit mass at sample ``y``: ``1 / weight(y)`` there, 0 elsewhere."""
    w = space.weights(t)
    if w[y] <= 0:
        raise ValueError(f"point {y} carries no weight at time {t}")
    out = np.zeros(space.N)
    out[y] = 1.0 / w[y]
    return out


def heat_kernel(space, s1, s2, y, schedule):
    """Heat propagation of the discrete delta at ``y`` from ``s1`` to ``s2``."""
    _require_sampled(space)
    if schedule.kernel not in HEAT_KERNELS:
        schedule = schedule.with_kernel("nu")
    if space.orientation == "forward":
        return dynamic_heat(space, s1, s2, schedule, delta_density(space, s1, y)).field
    rev = space.reversed()
    total = sum(space.time_interval)
    return dynamic_heat(rev, total - s1, total - s2, schedule, delta_density(rev, total - s1, y)).field


def duality_gap(space, tau0, tau, g, y, schedule):
    """Residual of the pairing between conjugate and heat propagation.

    Compares ``(P*_{tau0, tau} g)(y)`` with the integral of ``g`` against the
    heat-propagated delta at ``y`` (released at ``tau``, observed at
    ``tau0``), integrated with the slice measure at ``tau0`` where both
    sides live.
    """
    _require_sampled(space)
    if space.orientation != "backward":
        raise ValueError("duality_gap needs a backward-oriented space")
    if tau0 > tau:
        raise ValueError("need tau0 <= tau")
    gv = _values(g, space, tau0)
    conj = dynamic_conjugate(space, tau0, tau, schedule, gv).values[y]
    rev = space.reversed()
    total = sum(space.time_interval)
    heat_sched = schedule.with_kernel("nu" if schedule.kernel == "beta" else "sigma")
    kernel = dynamic_heat(rev, total - tau, total - tau0, heat_sched, delta_density(rev, total - tau, y))
    pairing = float(np.sum(kernel.values * gv * space.weights(tau0)))
    return abs(float(conj) - pairing)


@dataclass
class RefinementStudy:
    rows: list
    final: PropagationResult
    converged: bool
    estimate: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_csv(self, path, timings=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "j", "sup_change"] + (["wall_time"] if timings else []))
            for row in self.rows:
                sc = "" if row["sup_change"] is None else f"{row['sup_change']:.17g}"
                w.writerow([row["m"], row["j"], sc] + ([f"{row['wall_time']:.6f}"] if timings else []))


def refinement_study(propagate, schedule, tol=1e-3, max_doublings=4):
    """Double ``(m, j)`` until successive results differ by less than ``tol`` in sup norm.

    ``propagate`` maps a schedule to a PropagationResult. The converged
    estimate is a Richardson extrapolation of the last two results using the
    observed contraction ratio ``q`` of successive sup changes,
    ``u_fine + (u_fine - u_coarse) / (q - 1)``; with only two levels, or no
    observed contraction, first order (``q = 2``) is assumed.
    """
    rows = []
    prev = None
    result = None
    converged = False
    estimate = None
    changes = []
    for _ in range(max_doublings + 1):
        start = _time.perf_counter()
        result = propagate(schedule)
        elapsed = _time.perf_counter() - start
        change = None if prev is None else float(np.max(np.abs(result.values - prev.values)))
        rows.append({"m": schedule.m, "j": schedule.j, "sup_change": change, "wall_time": elapsed})
        if prev is not None:
            changes.append(change)
            q = changes[-2] / changes[-1] if len(changes) >= 2 and changes[-1] > 0 else 2.0
            if not q > 1.0:
                q = 2.0
            estimate = result.values + (result.values - prev.values) / (q - 1.0)
            if change < tol:
                converged = True
                break
        prev = result
        schedule = schedule.refined()
    result.converged_estimate = estimate
    return RefinementStudy(rows, result, converged, estimate, {"ratios": [
        changes[k] / changes[k + 1] for k in range(len(changes) - 1) if changes[k + 1] > 0]})
