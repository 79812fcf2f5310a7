"""Markov averaging operators and their small-radius expansions.

Six operators act on scalar fields at a frozen time slice:

* ``nu``: average over the closed ball ``B_r(x)``;
* ``sigma``: average over the sphere ``{d = r}``;
* ``eta`` / ``theta``: multiplication by the ratio of ball volume / sphere
  area to the Euclidean normalizer ``omega_n r^n`` / ``a_{n-1} r^{n-1}``;
* ``beta = nu/4 + 3 eta/4`` and ``alpha = sigma/4 + 3 theta/4``.

On sampled spaces the averaging windows are sparse row-stochastic matrices.
Each sample point stands for a small cell of its own weight, so a point at
distance ``d`` from the center contributes the fraction of its cell that the
window covers. With ``membership="calibrated"`` the window edge is then moved
per row until the window's second moment equals the Euclidean value
(``n r^2 / (n + 2)`` for balls, ``r^2`` for spheres). This removes the
lattice aliasing that a raw indicator suffers on regular samples and keeps
Chernoff products convergent.
"""
from __future__ import annotations

import csv
import enum
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DegenerateSupportError, DegenerateSupportWarning, UnstableFitError
from .spaces import (
    cell_fraction,
    cell_radii,
    euclidean_ball_volume,
    euclidean_sphere_area,
)

__all__ = [
    "OperatorKind",
    "ScalarField",
    "LimitFit",
    "shell_halfwidth",
    "resolution_radius",
    "operator_matrix",
    "apply",
    "ratio",
    "default_ladder",
    "fit_even_powers",
    "expansion_fit",
    "expected_c2",
    "fits_to_csv",
]

CACHE_SIZE = 256
MIN_RUNG_SUPPORT = 30
COND_LIMIT = 1e8


class OperatorKind(str, enum.Enum):
    SIGMA = "sigma"
    NU = "nu"
    THETA = "theta"
    ETA = "eta"
    ALPHA = "alpha"
    BETA = "beta"

    @property
    def averaging(self):
        """The averaging operator inside a mixture (or itself)."""
        return {"alpha": OperatorKind.SIGMA, "beta": OperatorKind.NU}.get(self.value, self)

    @property
    def ratio(self):
        return {"alpha": OperatorKind.THETA, "beta": OperatorKind.ETA,
                "sigma": OperatorKind.THETA, "nu": OperatorKind.ETA}.get(self.value, self)

    @property
    def is_mixture(self):
        return self in (OperatorKind.ALPHA, OperatorKind.BETA)

    @property
    def is_ball(self):
        return self in (OperatorKind.NU, OperatorKind.ETA, OperatorKind.BETA)


MIX_AVERAGE = 0.25
MIX_RATIO = 0.75


# --------------------------------------------------------------------------
# fields


class ScalarField:
    """Values of a function on one time slice of a space.

    On sampled spaces ``values`` is an N-vector. On analytic spaces it is a
    callable mapping an array of points (last axis = ambient coordinates) to
    values; calling the field evaluates it.
    """

    def __init__(self, values, time, space):
        space.check_time(time)
        self.time = float(time)
        self.space = space
        if callable(values):
            if space.backend != "analytic":
                raise TypeError("callable fields are only supported on analytic spaces")
            self.values = values
        else:
            v = np.asarray(values, float)
            if space.backend == "sampled" and v.shape != (space.N,):
                raise ValueError(f"field needs {space.N} values, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValueError("field values must be finite")
            self.values = v

    @property
    def is_callable(self):
        return callable(self.values)

    def __call__(self, points):
        if self.is_callable:
            return np.asarray(self.values(np.asarray(points, float)), float)
        return self.values[np.asarray(points)]

    def at(self, time):
        """Same values re-tagged at another time on the same space."""
        return ScalarField(self.values, time, self.space)

    def sup(self):
        if self.is_callable:
            raise TypeError("sup norm of an analytic field needs evaluation points")
        return float(np.max(np.abs(self.values)))

    def to_json(self):
        if self.is_callable:
            raise TypeError("analytic fields are not serializable")
        return {"time": self.time, "values": self.values.tolist()}


def as_field(f, space, t):
    if isinstance(f, ScalarField):
        if f.space is not space and not _same_carrier(f.space, space):
            raise ValueError("field belongs to a different space")
        if abs(f.time - t) > 1e-12:
            raise ValueError(f"field is tagged at time {f.time}, operator acts at {t}")
        return f
    return ScalarField(f, t, space)


def _same_carrier(a, b):
    return a.backend == b.backend == "sampled" and a.N == b.N and a._cache is b._cache


@dataclass
class LimitFit:
    """Even-power fit ``c0 + c2 r^2 (+ c4 r^4)`` over a decreasing radius ladder."""

    c0: float
    c2: float
    residual: float
    ladder: np.ndarray
    values: np.ndarray
    c4: float | None = None
    kind: str = ""
    x: object = None
    extra: dict = field(default_factory=dict)

    def as_row(self):
        return {"kind": self.kind, "x": self.x, "c0": self.c0, "c2": self.c2, "residual": self.residual}

    def to_json(self):
        return {"kind": self.kind, "x": _jsonable(self.x), "c0": self.c0, "c2": self.c2, "c4": self.c4,
                "residual": self.residual, "ladder": list(map(float, self.ladder)),
                "values": list(map(float, self.values))}


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.integer):
        return int(x)
    return x


# --------------------------------------------------------------------------
# sampled windows


def shell_halfwidth(space, t, r):
    """Half-width of the discrete sphere: ``max(r / 10, 2 * spacing)``."""
    return max(r / 10.0, 2.0 * space.spacing(t))


def resolution_radius(space, t):
    """Smallest radius resolved by the sample: ``space.resolution * spacing``."""
    return space.resolution * space.spacing(t)


def _rows(space, t, rows):
    # distances and weights for the requested rows; model-backed spaces
    # work in base units since averages are invariant under uniform scaling
    if space.model is not None:
        return space.base_distances()[rows], space.base_weights, space.model.scale(t)
    return space.distance_rows(t, rows), space.weights(t), 1.0


def _fraction(s, n):
    out = (s >= 1.0).astype(float)
    inside = np.abs(s) < 1.0
    out[inside] = cell_fraction(s[inside], n)
    return out


def _window(d, rho, lo, hi, n):
    # cell-overlap weights of the annulus lo <= d <= hi (lo may be None)
    out = _fraction((hi[:, None] - d) / rho, n)
    if lo is not None:
        out -= _fraction((lo[:, None] - d) / rho, n)
    return np.clip(out, 0.0, None)


def _calibrate(d, w, rho, n, target, make, upper, iters=60):
    lo = np.zeros(len(d))
    hi = np.full(len(d), upper)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        W = w * make(mid)
        mass = W.sum(axis=1)
        m2 = np.divide((W * d * d).sum(axis=1), mass, out=np.zeros_like(mass), where=mass > 0)
        short = m2 < target
        lo = np.where(short, mid, lo)
        hi = np.where(short, hi, mid)
    return 0.5 * (lo + hi)


def window_weights(kind, space, t, r, rows, membership=None):
    """Unnormalized averaging-window weights for ``rows``, shape (len(rows), N)."""
    kind = OperatorKind(kind).averaging
    membership = membership or space.membership
    rows = np.atleast_1d(rows)
    d, w, s = _rows(space, t, rows)
    rb = r / s
    n = space.n
    rho = cell_radii(w, n)
    if kind == OperatorKind.NU:
        if membership == "hard":
            return w * (d <= rb * (1 + 1e-12))
        if membership == "cell":
            return w * _window(d, rho, None, np.full(len(rows), rb), n)
        target = n * rb * rb / (n + 2)
        R = _calibrate(d, w, rho, n, target, lambda R: _window(d, rho, None, R, n), rb + 3 * rho.max())
        return w * _window(d, rho, None, R, n)
    delta = shell_halfwidth(space, t, r) / s
    if membership == "hard":
        return w * ((d >= rb - delta) & (d <= rb + delta))
    if membership == "cell":
        c = np.full(len(rows), rb)
        return w * _window(d, rho, c - delta, c + delta, n)
    R = _calibrate(d, w, rho, n, rb * rb, lambda c: _window(d, rho, c - delta, c + delta, n),
                   rb + delta + 3 * rho.max())
    return w * _window(d, rho, R - delta, R + delta, n)


def _cache_get(space, key, build):
    cache = space._cache.setdefault("operators", OrderedDict())
    if key in cache:
        cache.move_to_end(key)
        return cache[key]
    val = build()
    cache[key] = val
    if len(cache) > CACHE_SIZE:
        cache.popitem(last=False)
    return val


def _balance(M, w, tol=1e-13, max_iter=500):
    # symmetric scaling u with u * (M u) = w, so diag(1/w) diag(u) M diag(u)
    # is row-stochastic and reversible with respect to w
    u = np.sqrt(w / M.sum(axis=1))
    for _ in range(max_iter):
        Mu = M @ u
        if np.max(np.abs(u * Mu / w - 1.0)) < tol:
            break
        u = np.sqrt(u * w / Mu)
    return (u[:, None] * M * u[None, :]) / w[:, None]


def _averaging_matrix(kind, space, t, r, chunk=512):
    N = space.N
    W = np.empty((N, N))
    for start in range(0, N, chunk):
        rows = np.arange(start, min(start + chunk, N))
        W[rows] = window_weights(kind, space, t, r, rows)
    mass = W.sum(axis=1)
    empty = mass <= 0
    if kind == OperatorKind.SIGMA and np.any(empty):
        bad = int(np.argmax(empty))
        raise DegenerateSupportError(f"empty shell of radius {r:g} at point {bad}", point=bad)
    only_center = (W > 0).sum(axis=1) <= 1
    if kind == OperatorKind.NU and np.any(only_center | empty):
        bad = np.flatnonzero(only_center | empty)
        warnings.warn(f"ball of radius {r:g} holds only its center at {len(bad)} point(s) "
                      f"(first {int(bad[0])}); using the identity there", DegenerateSupportWarning,
                      stacklevel=3)
        W[bad] = 0.0
        W[bad, bad] = 1.0
        mass = W.sum(axis=1)
    if not space.reversible:
        return sparse.csr_matrix(W / mass[:, None])
    w = _rows(space, t, [0])[1]
    M = w[:, None] * W
    M = 0.5 * (M + M.T)
    A = _balance(M, w)
    A /= A.sum(axis=1, keepdims=True)
    return sparse.csr_matrix(A)


def ratio(kind, space, t, r):
    """Ratio multiplier of ``eta``/``theta`` at time ``t``: scalar or N-vector."""
    kind = OperatorKind(kind).ratio
    if r == 0:
        return 1.0
    if space.backend == "analytic" or space.ratio_oracle:
        model = space if space.backend == "analytic" else space.model
        return model.eta_ratio(t, r) if kind == OperatorKind.ETA else model.theta_ratio(t, r)
    floor = resolution_radius(space, t)
    if r < floor:
        return 1.0 + (r / floor) ** 2 * (ratio(kind, space, t, floor) - 1.0)
    key = ("ratio", kind.value, float(t), float(r), space.membership)

    def build():
        n = space.n
        membership = "hard" if space.membership == "hard" else "cell"
        rows = np.arange(space.N)
        if kind == OperatorKind.ETA:
            mass = window_weights(OperatorKind.NU, space, t, r, rows, membership).sum(axis=1)
            return mass * _unit(space, t) / (euclidean_ball_volume(n) * r**n)
        delta = shell_halfwidth(space, t, r)
        mass = window_weights(OperatorKind.SIGMA, space, t, r, rows, membership).sum(axis=1)
        return mass * _unit(space, t) / (2 * delta) / (euclidean_sphere_area(n) * r ** (n - 1))

    return _cache_get(space, key, build)


def _unit(space, t):
    # window weights of model-backed spaces are in base units
    return space.model.scale(t) ** space.n if space.model is not None else 1.0


def operator_matrix(kind, space, t, r):
    """Sparse N x N matrix of ``kind`` at time ``t`` and radius ``r`` (sampled spaces)."""
    kind = OperatorKind(kind)
    if space.backend != "sampled":
        raise TypeError("operator matrices exist only on sampled spaces")
    space.check_time(t)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    N = space.N
    if r == 0:
        return sparse.identity(N, format="csr")
    if kind in (OperatorKind.THETA, OperatorKind.ETA):
        q = np.broadcast_to(ratio(kind, space, t, r), (N,))
        return sparse.diags(q, format="csr")
    if kind.is_mixture:
        avg = operator_matrix(kind.averaging, space, t, r)
        rat = operator_matrix(kind.ratio, space, t, r)
        return (MIX_AVERAGE * avg + MIX_RATIO * rat).tocsr()
    floor = resolution_radius(space, t)
    if r < floor:
        # below the sampling resolution no window is resolved; interpolate
        # between the identity and the resolved operator, linearly in r^2
        lam = (r / floor) ** 2
        A = operator_matrix(kind, space, t, floor)
        return ((1.0 - lam) * sparse.identity(N, format="csr") + lam * A).tocsr()
    if space.model is not None:
        key = ("avg", kind.value, float(r / space.model.scale(t)), space.membership, space.reversible)
    else:
        key = ("avg", kind.value, float(t), float(r), space.membership, space.reversible)
    return _cache_get(space, key, lambda: _averaging_matrix(kind, space, t, r))


# --------------------------------------------------------------------------
# analytic quadrature


def _directions(n):
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        a = np.arange(64) * (2 * math.pi / 64)
        return np.column_stack([np.cos(a), np.sin(a)])
    if n == 3:
        k = 512
        i = np.arange(k) + 0.5
        z = 1 - 2 * i / k
        phi = math.pi * (1 + math.sqrt(5)) * i
        rr = np.sqrt(1 - z * z)
        return np.column_stack([rr * np.cos(phi), rr * np.sin(phi), z])
    g = np.random.default_rng(12345).standard_normal((4096, n))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _sphere_average(space, f, x, rho_base):
    pts = space.exp_points(x, np.atleast_1d(rho_base), _directions(space.n))
    return np.mean(f(pts), axis=-1)


def _ball_average(space, f, x, r_base, nodes=24):
    u, wq = np.polynomial.legendre.leggauss(nodes)
    rho = 0.5 * r_base * (u + 1)
    dens = wq * space.radial_density(rho)
    return float(np.sum(dens * _sphere_average(space, f, x, rho)) / np.sum(dens))


def _analytic_apply(kind, space, t, r, f):
    s = space.scale(t)
    g = f.values

    def averaged(points):
        pts = np.asarray(points, float)
        flat = pts.reshape(-1, pts.shape[-1])
        if kind.averaging == OperatorKind.NU:
            vals = [_ball_average(space, g, p, r / s) for p in flat]
        else:
            vals = [float(_sphere_average(space, g, p, r / s)[0]) for p in flat]
        return np.asarray(vals).reshape(pts.shape[:-1])

    q = ratio(kind, space, t, r)
    if kind in (OperatorKind.NU, OperatorKind.SIGMA):
        return averaged
    if kind in (OperatorKind.ETA, OperatorKind.THETA):
        return lambda points: q * np.asarray(g(np.asarray(points, float)), float)
    return lambda points: (MIX_AVERAGE * averaged(points)
                           + MIX_RATIO * q * np.asarray(g(np.asarray(points, float)), float))


def apply(kind, space, t, r, f):
    """Apply operator ``kind`` with radius ``r`` at time ``t`` to field ``f``.

    ``r = 0`` is the identity. Analytic spaces return a lazily evaluated
    field computed by quadrature over the exact ball or sphere.
    """
    kind = OperatorKind(kind)
    space.check_time(t)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    f = as_field(f, space, t)
    if r == 0:
        return f
    if space.backend == "analytic":
        if not f.is_callable:
            c = np.asarray(f.values, float)
            f = ScalarField(lambda p, c=c: np.broadcast_to(c, np.shape(p)[:-1]), t, space)
        return ScalarField(_analytic_apply(kind, space, t, r, f), t, space)
    return ScalarField(operator_matrix(kind, space, t, r) @ f.values, t, space)


def _apply_at(kind, space, t, r, f, x):
    # value of (kind_r f)(x)
    if space.backend == "analytic":
        return float(apply(kind, space, t, r, f)(np.asarray(x, float)[None])[0])
    return float(apply(kind, space, t, r, f).values[int(x)])


# --------------------------------------------------------------------------
# expansions


def expected_c2(kind, n, laplacian, scal, value):
    """Leading coefficient predicted by the expansions for ``f`` at a point."""
    kind = OperatorKind(kind)
    return {
        OperatorKind.SIGMA: laplacian / (2 * n),
        OperatorKind.NU: laplacian / (2 * (n + 2)),
        OperatorKind.THETA: -scal * value / (6 * n),
        OperatorKind.ETA: -scal * value / (6 * (n + 2)),
        OperatorKind.ALPHA: (laplacian - scal * value) / (8 * n),
        OperatorKind.BETA: (laplacian - scal * value) / (8 * (n + 2)),
    }[kind]


def default_ladder(space, t, x=None, rungs=6, mass_fraction=0.2):
    """Radius ladder ``r_max 2^{-k}`` with the top ball holding ``mass_fraction`` of the mass.

    On sampled spaces the ladder is geometric between that radius and the
    radius whose ball holds ``MIN_RUNG_SUPPORT`` points around ``x``.
    """
    if space.backend == "analytic":
        r_max = space.base_ball_radius_for_fraction(mass_fraction) * space.scale(t)
        return r_max * 2.0 ** -np.arange(rungs)
    d = np.sort(space.distance_rows(t, 0 if x is None else x)[0])
    k_max = max(int(mass_fraction * space.N), MIN_RUNG_SUPPORT + 1)
    r_max = d[min(k_max, space.N - 1)]
    r_min = d[min(MIN_RUNG_SUPPORT, space.N - 1)]
    if not r_min < r_max:
        raise UnstableFitError("sample too small for a ladder with enough support per rung")
    return np.geomspace(r_max, r_min, rungs)


def fit_even_powers(ladder, values, quartic=None, kind="", x=None):
    """Least-squares ``c0 + c2 r^2 (+ c4 r^4)`` with a conditioning guard."""
    r = np.asarray(ladder, float)
    y = np.asarray(values, float)
    if r.ndim != 1 or len(r) < 4:
        raise ValueError("ladder needs at least four rungs")
    if np.any(np.diff(r) >= 0) or np.any(r <= 0):
        raise ValueError("ladder must be positive and strictly decreasing")
    if quartic is None:
        quartic = len(r) >= 6
    cols = [np.ones_like(r), r**2] + ([r**4] if quartic else [])
    A = np.column_stack(cols)
    norms = np.linalg.norm(A, axis=0)
    An = A / norms
    cond = np.linalg.cond(An)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise UnstableFitError(f"ill-conditioned expansion fit (condition number {cond:.3g})")
    coef, *_ = np.linalg.lstsq(An, y, rcond=None)
    coef = coef / norms
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return LimitFit(c0=float(coef[0]), c2=float(coef[1]), residual=resid, ladder=r, values=y,
                    c4=float(coef[2]) if quartic else None, kind=str(kind), x=x)


def expansion_fit(kind, space, t, x, f, ladder=None, quartic=None):
    """Fit ``(kind_r f)(x) ~ c0 + c2 r^2`` over a radius ladder."""
    kind = OperatorKind(kind)
    f = as_field(f, space, t)
    if ladder is None:
        ladder = default_ladder(space, t, x)
    ladder = np.asarray(ladder, float)
    values = np.array([_apply_at(kind, space, t, r, f, x) for r in ladder])
    return fit_even_powers(ladder, values, quartic=quartic, kind=kind.value,
                           x=x if space.backend == "sampled" else np.asarray(x, float))


def fits_to_csv(fits, path):
    """Write LimitFit rows ``kind, x, c0, c2, residual``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "x", "c0", "c2", "residual"])
        for fit in fits:
            x = fit.x
            if isinstance(x, np.ndarray):
                x = " ".join(f"{v:.17g}" for v in x)
            w.writerow([fit.kind, x, f"{fit.c0:.17g}", f"{fit.c2:.17g}", f"{fit.residual:.17g}"])
