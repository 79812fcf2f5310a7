"""Formal dynamic diffusions and optimal transport costs between them.

A diffusion is a family of probability measures on the slices of a
backward-oriented sampled space, obtained by pushing an initial density
through the conjugate heat propagator. Transport costs between two such
families are computed exactly by the network simplex (POT's ``emd``) or
approximately by log-domain Sinkhorn, in which case the returned value is a
feasible upper bound certified by a dual lower bound.
"""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .errors import (  # noqa: E402
    ConvergenceError,
    InfeasibleMarginalsError,
    RenormalizationWarning,
    UnsupportedBackendError,
    WeakflowError,
)
from .propagators import ChernoffSchedule, delta_density, dynamic_conjugate  # noqa: E402

__all__ = [
    "CostSpec",
    "Delta",
    "Density",
    "Diffusion",
    "TransportPlan",
    "make_diffusion",
    "cost_matrix",
    "ot_cost",
    "wasserstein",
    "jensen_audit",
    "EXACT_MAX_N",
]

EXACT_MAX_N = 512
MASS_TOL = 1e-8
NEG_TOL = 1e-10


# --------------------------------------------------------------------------
# costs


class CostSpec:
    """Cost ``c(d)`` applied to distances.

    ``kind`` is ``"distance"``, ``"distance-squared"`` or ``"convex"``. A
    convex cost is given either as ``points`` (sorted ``(d, c)`` pairs of a
    piecewise-linear function, extended with its last slope) or as a
    vectorized callable ``func``; in both cases ``c(0) = 0``, monotonicity and
    convexity are checked on a probe grid. With ``time_dependent=True`` the
    callable takes ``(d, tau)``.
    """

    KINDS = ("distance", "distance-squared", "convex")

    def __init__(self, kind="distance-squared", points=None, func=None, time_dependent=False, label=None,
                 probe_max=10.0):
        if kind not in self.KINDS:
            raise ValueError(f"cost kind must be one of {self.KINDS}")
        self.kind = kind
        self.time_dependent = bool(time_dependent)
        self.points = None
        self.func = None
        if kind == "convex":
            if (points is None) == (func is None):
                raise ValueError("convex costs need exactly one of points or func")
            if points is not None:
                pts = np.asarray(points, float)
                if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2 or np.any(np.diff(pts[:, 0]) <= 0):
                    raise ValueError("points must be (d, c) pairs with increasing d")
                self.points = pts
            else:
                self.func = func
            self._validate(probe_max)
        self.label = label or kind

    @classmethod
    def distance(cls):
        return cls("distance")

    @classmethod
    def distance_squared(cls):
        return cls("distance-squared")

    def _piecewise(self, d):
        x, y = self.points[:, 0], self.points[:, 1]
        slope = (y[-1] - y[-2]) / (x[-1] - x[-2])
        return np.where(d <= x[-1], np.interp(d, x, y), y[-1] + slope * (d - x[-1]))

    def __call__(self, d, tau=None):
        d = np.asarray(d, float)
        if self.kind == "distance":
            return d.copy()
        if self.kind == "distance-squared":
            return d * d
        if self.points is not None:
            return self._piecewise(d)
        return np.asarray(self.func(d, tau) if self.time_dependent else self.func(d), float)

    def _validate(self, probe_max):
        grid = np.linspace(0.0, probe_max, 2001)
        taus = [0.0] if not self.time_dependent else [0.0, 0.5, 1.0]
        for tau in taus:
            c = self(grid, tau)
            if abs(c[0]) > 1e-12:
                raise ValueError("cost must vanish at distance zero")
            if np.any(np.diff(c) < -1e-12):
                raise ValueError("cost must be nondecreasing")
            scale = max(1.0, float(np.max(np.abs(c))))
            if np.any(np.diff(c, 2) < -1e-9 * scale):
                raise ValueError("cost must be convex")

    def to_json(self):
        return {"kind": self.kind, "label": self.label}


def cost_matrix(space, tau, cost):
    if space.backend != "sampled":
        raise UnsupportedBackendError("transport costs need a sampled space")
    return cost(space.distances(tau), tau)


# --------------------------------------------------------------------------
# diffusions


@dataclass(frozen=True)
class Delta:
    """Unit mass at a sample point."""

    point: int


@dataclass(frozen=True)
class Density:
    """Initial density against the slice measure (normalized on use)."""

    values: tuple

    def __init__(self, values):
        object.__setattr__(self, "values", tuple(np.asarray(values, float).tolist()))


@dataclass
class Diffusion:
    space: object
    tau_grid: np.ndarray
    densities: np.ndarray
    init: object
    renormalization: list = field(default_factory=list)

    def measure(self, k):
        """Probability masses of slice ``k``."""
        return self.densities[k] * self.space.weights(self.tau_grid[k])

    def masses(self):
        return np.array([self.measure(k).sum() for k in range(len(self.tau_grid))])

    def to_json(self):
        return {"tau_grid": self.tau_grid.tolist(), "densities": self.densities.tolist(),
                "renormalization": self.renormalization}


def _initial_density(space, tau0, init):
    w = space.weights(tau0)
    if isinstance(init, Delta):
        return delta_density(space, tau0, init.point)
    if isinstance(init, Density):
        v = np.asarray(init.values, float)
    else:
        v = np.asarray(init, float)
    if v.shape != (space.N,) or np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("initial density must be a finite nonnegative N-vector")
    mass = float(v @ w)
    if mass <= 0:
        raise ValueError("initial density has no mass")
    return v / mass


def _clip_negative(v, tau):
    low = float(v.min())
    if low < -NEG_TOL:
        raise WeakflowError(f"density became negative ({low:.3e}) at tau={tau}")
    if low < 0:
        warnings.warn(f"clipping negative density {low:.3e} at tau={tau}", RenormalizationWarning, stacklevel=3)
        v = np.clip(v, 0.0, None)
    return v


def make_diffusion(space, tau0, init, tau_grid, schedule=None):
    """Push ``init`` through the conjugate propagator along ``tau_grid``.

    Each slice is renormalized to a probability measure; the factors are
    kept in ``renormalization``.
    """
    if space.backend != "sampled":
        raise UnsupportedBackendError("diffusions need a sampled space")
    if space.orientation != "backward":
        raise ValueError("diffusions run along a backward-oriented space")
    grid = np.asarray(tau_grid, float)
    if grid.ndim != 1 or len(grid) < 1 or abs(grid[0] - tau0) > 1e-12 or np.any(np.diff(grid) <= 0):
        raise ValueError("tau_grid must increase strictly and start at tau0")
    schedule = schedule or ChernoffSchedule(8, 8, "beta")
    dens = [_initial_density(space, tau0, init)]
    factors = [1.0]
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*virtually psc.*")
        for a, b in zip(grid[:-1], grid[1:]):
            v = dynamic_conjugate(space, a, b, schedule, dens[-1]).values
            v = _clip_negative(v, b)
            mass = float(v @ space.weights(b))
            if mass <= 0:
                raise WeakflowError(f"diffusion lost all mass at tau={b}")
            dens.append(v / mass)
            factors.append(1.0 / mass)
    return Diffusion(space, grid, np.array(dens), init, factors)


# --------------------------------------------------------------------------
# transport


@dataclass
class TransportPlan:
    coupling: np.ndarray
    row_residual: float
    col_residual: float
    total_cost: float
    solver: str = "exact"
    lower_bound: float | None = None
    pseudo_metric: bool = False

    @property
    def gap(self):
        return None if self.lower_bound is None else self.total_cost - self.lower_bound

    def to_csv(self, path, tol=0.0):
        """Sparse triplets ``i, j, mass`` of the coupling."""
        i, j = np.nonzero(self.coupling > tol)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "mass"])
            for a, b in zip(i, j):
                w.writerow([int(a), int(b), f"{self.coupling[a, b]:.17g}"])

    def to_json(self):
        out = {"total_cost": self.total_cost, "solver": self.solver, "row_residual": self.row_residual,
               "col_residual": self.col_residual, "pseudo_metric": self.pseudo_metric}
        if self.lower_bound is not None:
            out["lower_bound"] = self.lower_bound
            out["gap"] = self.gap
        return out


def _check_measures(mu1, mu2, N):
    a = np.asarray(mu1, float)
    b = np.asarray(mu2, float)
    if a.shape != (N,) or b.shape != (N,):
        raise ValueError(f"measures must be {N}-vectors")
    if np.any(a < 0) or np.any(b < 0):
        raise InfeasibleMarginalsError("measures must be nonnegative")
    if abs(a.sum() - b.sum()) > MASS_TOL:
        raise InfeasibleMarginalsError(f"mass mismatch {a.sum() - b.sum():.3e}")
    return a, b


def _round_to_marginals(P, a, b):
    # Altschuler-Weed-Rigollet rounding onto the transport polytope
    x = np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)
    P = P * x[:, None]
    y = np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)
    P = P * y[None, :]
    ea = a - P.sum(axis=1)
    eb = b - P.sum(axis=0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


def _entropic(a, b, M, reg, max_iter, tol):
    P, log = ot.sinkhorn(a, b, M, reg, method="sinkhorn_log", numItermax=max_iter, stopThr=tol, log=True,
                         warn=False)
    err = log["err"][-1] if log.get("err") else np.inf
    if not np.isfinite(err) or err > tol:
        raise ConvergenceError(f"Sinkhorn stopped at marginal error {err:.3e} after {max_iter} iterations")
    P = _round_to_marginals(np.asarray(P), a, b)
    upper = float(np.sum(P * M))
    # dual certificate: potentials from the log scalings, c-transformed
    f = reg * np.asarray(log["log_u"])
    g = np.min(M - f[:, None], axis=0)
    f = np.min(M - g[None, :], axis=1)
    lower = float(a @ f + b @ g)
    return P, upper, lower


def ot_cost(space, tau, mu1, mu2, cost=None, solver="exact", reg=None, max_iter=20000, tol=1e-9):
    """Optimal total cost between two probability measures on the slice ``tau``.

    ``solver="exact"`` runs the network simplex (N <= EXACT_MAX_N).
    ``solver="entropic"`` with regularization ``reg`` returns the cost of a
    rounded feasible Sinkhorn plan and a dual lower bound in the plan.
    """
    cost = cost or CostSpec.distance_squared()
    space.check_time(tau)
    M = cost_matrix(space, tau, cost)
    a, b = _check_measures(mu1, mu2, space.N)
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    Ms = np.ascontiguousarray(M[np.ix_(ia, ib)])
    coupling = np.zeros((space.N, space.N))
    lower = None
    if solver == "exact":
        if max(len(ia), len(ib)) > EXACT_MAX_N:
            raise ValueError(f"exact transport is limited to {EXACT_MAX_N} support points; use solver='entropic'")
        sub = ot.emd(a[ia], b[ib], Ms, numItermax=10_000_000)
    elif solver == "entropic":
        if reg is None or reg <= 0:
            raise ValueError("entropic transport needs a positive reg")
        sub, _, lower = _entropic(a[ia], b[ib], Ms, reg, max_iter, tol)
    else:
        raise ValueError("solver must be 'exact' or 'entropic'")
    coupling[np.ix_(ia, ib)] = sub
    rres = float(np.max(np.abs(coupling.sum(axis=1) - a)))
    cres = float(np.max(np.abs(coupling.sum(axis=0) - b)))
    if solver == "exact" and max(rres, cres) > MASS_TOL:
        raise ConvergenceError(f"network simplex left marginal residual {max(rres, cres):.3e}")
    total = float(np.sum(sub * Ms))
    plan = TransportPlan(coupling, rres, cres, total, solver, lower, bool(space.pseudo_metric))
    return total, plan


def wasserstein(space, tau, mu1, mu2, p=2, solver="exact", reg=None):
    """``W_p`` on the slice ``tau`` for ``p`` in {1, 2}."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    cost = CostSpec.distance() if p == 1 else CostSpec.distance_squared()
    total, _ = ot_cost(space, tau, mu1, mu2, cost, solver=solver, reg=reg)
    return max(total, 0.0) ** (1.0 / p)


def jensen_audit(space, tau, pairs=100, seed=0, support=None):
    """Check ``W1 <= W2`` on random probability pairs; returns (ok, rows)."""
    rng = np.random.default_rng(seed)
    N = space.N
    k = N if support is None else min(support, N)
    rows = []
    ok = True
    for _ in range(pairs):
        mus = []
        for _ in range(2):
            idx = rng.choice(N, size=k, replace=False)
            m = np.zeros(N)
            m[idx] = rng.random(k)
            mus.append(m / m.sum())
        w1 = wasserstein(space, tau, *mus, p=1)
        w2 = wasserstein(space, tau, *mus, p=2)
        rows.append((w1, w2))
        ok &= w1 <= w2 + 1e-9
    return bool(ok), rows
