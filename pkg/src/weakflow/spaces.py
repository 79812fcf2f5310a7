"""Time-dependent metric-measure spaces.

Two backends live here. Analytic spaces are the homogeneous model flows
(round spheres and flat tori) whose metric at time ``t`` is a constant
multiple ``scale(t)`` of a fixed base metric, so every ball volume, shell
area and curvature has a closed form. Sampled spaces carry a finite point
set with per-slice distance matrices and measure weights; they are either
drawn from an analytic model (and then keep it around as an oracle) or
built from external matrices.

Times are always expressed in the space's own parameter. ``orientation``
records whether that parameter runs forward (``t``) or backward (``tau``);
:meth:`reversed` produces the same flow in the opposite parameter.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .errors import UnsupportedOracleError

__all__ = [
    "euclidean_ball_volume",
    "euclidean_sphere_area",
    "Static",
    "RicciBackward",
    "CustomScale",
    "AnalyticSpace",
    "RoundSphere",
    "FlatTorus",
    "SampledSpace",
    "make_round_sphere",
    "make_flat_torus",
    "sample",
    "ball_measure",
    "d2_time_derivative",
    "scalar_curvature",
]

ORIENTATIONS = ("forward", "backward")
STRATEGIES = ("uniform-random", "quasi-uniform")
MEMBERSHIPS = ("calibrated", "cell", "hard")
METRIC_TOL = 1e-9


def euclidean_ball_volume(n):
    """Volume of the unit ball in R^n."""
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def euclidean_sphere_area(n):
    """Area of the unit sphere S^{n-1} bounding the unit ball of R^n."""
    return n * euclidean_ball_volume(n)


# --------------------------------------------------------------------------
# flow laws


class Static:
    """Time-independent metric."""

    def scale(self, t):
        return 1.0

    def scale_sq_rate(self, t):
        return 0.0

    def __repr__(self):
        return "Static()"


class RicciBackward:
    """Backward Ricci flow of the model; resolved by the model constructor."""

    def __repr__(self):
        return "RicciBackward()"


class CustomScale:
    """Metric ``phi(t) * d_base``; ``dphi`` defaults to a central difference."""

    def __init__(self, phi, dphi=None, label=None):
        self.phi = phi
        self.dphi = dphi
        self.label = label

    def scale(self, t):
        return float(self.phi(t))

    def scale_sq_rate(self, t):
        if self.dphi is not None:
            d = float(self.dphi(t))
        else:
            h = 1e-6 * (1.0 + abs(t))
            d = (float(self.phi(t + h)) - float(self.phi(t - h))) / (2 * h)
        return 2.0 * self.scale(t) * d

    def __repr__(self):
        return f"CustomScale({self.label or self.phi!r})"


class _LinearSquare:
    # scale(t)^2 = 1 + rate * t, the exact law of a round-sphere Ricci flow
    def __init__(self, rate):
        self.rate = float(rate)

    def scale(self, t):
        return math.sqrt(1.0 + self.rate * t)

    def scale_sq_rate(self, t):
        return self.rate


def _reverse_law(law, total):
    if isinstance(law, Static):
        return law
    return CustomScale(
        lambda t: law.scale(total - t),
        lambda t: -0.5 * law.scale_sq_rate(total - t) / law.scale(total - t),
        label=f"reversed {law!r}",
    )


# --------------------------------------------------------------------------
# analytic models


class AnalyticSpace:
    """Homogeneous model flow with metric ``scale(t) * d_base``."""

    backend = "analytic"
    virtually_psc = True
    pseudo_metric = False

    def __init__(self, n, flow, time_interval, orientation):
        n = int(n)
        if n < 1:
            raise ValueError(f"dimension must be >= 1, got {n}")
        t0, t1 = map(float, time_interval)
        if not t0 < t1:
            raise ValueError(f"time interval must be increasing, got {time_interval}")
        if orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}")
        self.n = n
        self.flow = flow
        self.time_interval = (t0, t1)
        self.orientation = orientation
        self._law = flow

    # time ---------------------------------------------------------------
    def check_time(self, t):
        t0, t1 = self.time_interval
        if not (t0 - 1e-12 <= t <= t1 + 1e-12):
            raise ValueError(f"time {t} outside interval {self.time_interval}")

    def scale(self, t):
        return self._law.scale(t)

    def scale_sq_rate(self, t):
        return self._law.scale_sq_rate(t)

    # geometry in base units, overridden by the models --------------------
    def base_distance(self, x, y):
        raise NotImplementedError

    def base_ball_volume(self, r):
        raise NotImplementedError

    def base_shell_area(self, r):
        raise NotImplementedError

    def base_total_volume(self):
        raise NotImplementedError

    # geometry at time t ---------------------------------------------------
    def distance(self, t, x, y):
        """Distance at time ``t`` between base-coordinate points ``x`` and ``y``."""
        return self.scale(t) * self.base_distance(np.asarray(x, float), np.asarray(y, float))

    def d2_rate(self, t, x, y):
        """Exact ``d/dt d_t(x, y)^2``."""
        return self.scale_sq_rate(t) * self.base_distance(np.asarray(x, float), np.asarray(y, float)) ** 2

    def total_volume(self, t):
        return self.base_total_volume() * self.scale(t) ** self.n

    def ball_volume(self, t, r):
        s = self.scale(t)
        return self.base_ball_volume(r / s) * s**self.n

    def shell_area(self, t, r):
        s = self.scale(t)
        return self.base_shell_area(r / s) * s ** (self.n - 1)

    def eta_ratio(self, t, r):
        if r == 0:
            return 1.0
        return self.ball_volume(t, r) / (euclidean_ball_volume(self.n) * r**self.n)

    def theta_ratio(self, t, r):
        if r == 0:
            return 1.0
        return self.shell_area(t, r) / (euclidean_sphere_area(self.n) * r ** (self.n - 1))

    def scalar_curvature(self, t):
        raise NotImplementedError

    def injectivity_radius(self, t):
        return self.scale(t) * self.base_injectivity_radius()

    def diameter(self, t):
        return self.scale(t) * self.base_diameter()

    def base_ball_radius_for_fraction(self, fraction):
        """Base radius whose ball holds ``fraction`` of the total volume."""
        total = self.base_total_volume()
        lo, hi = 0.0, self.base_diameter()
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.base_ball_volume(mid) < fraction * total:
                lo = mid
            else:
                hi = mid
        return lo

    def _with_law(self, law, orientation):
        raise NotImplementedError

    def reversed(self):
        """The same flow parameterized by ``t_min + t_max - t``."""
        t0, t1 = self.time_interval
        other = "backward" if self.orientation == "forward" else "forward"
        return self._with_law(_reverse_law(self._law, t0 + t1), other)

    def describe(self):
        return {
            "model": self.kind,
            "n": self.n,
            "flow": repr(self.flow),
            "time_interval": list(self.time_interval),
            "orientation": self.orientation,
        }


def _tangent_frame(x):
    # orthonormal basis of the complement of unit vector x
    q, _ = np.linalg.qr(np.column_stack([x, np.eye(len(x))]))
    return q[:, 1:]


class RoundSphere(AnalyticSpace):
    """Round n-sphere of base radius ``R0``; points are unit vectors in R^{n+1}."""

    kind = "sphere"

    def __init__(self, n, R0, flow=None, time_interval=(0.0, 1.0), orientation=None):
        flow = Static() if flow is None else flow
        if not R0 > 0:
            raise ValueError(f"R0 must be positive, got {R0}")
        if orientation is None:
            orientation = "backward" if isinstance(flow, RicciBackward) else "forward"
        super().__init__(n, flow, time_interval, orientation)
        self.R0 = float(R0)
        if isinstance(flow, RicciBackward):
            if orientation != "backward":
                raise ValueError("RicciBackward is parameterized by backward time; use .reversed()")
            rate = 2.0 * (self.n - 1) / self.R0**2
            if 1.0 + rate * self.time_interval[0] <= 0:
                raise ValueError("RicciBackward radius squared is nonpositive on the time interval")
            self._law = _LinearSquare(rate)

    def _with_law(self, law, orientation):
        out = RoundSphere(self.n, self.R0, Static(), self.time_interval, orientation)
        out.flow = law if not isinstance(law, Static) else self.flow
        out._law = law
        return out

    @property
    def ambient_dim(self):
        return self.n + 1

    def radius(self, t):
        return self.R0 * self.scale(t)

    def base_distance(self, x, y):
        # the half-angle form stays accurate for nearly equal and nearly antipodal points
        chord = np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)
        cochord = np.linalg.norm(np.asarray(x) + np.asarray(y), axis=-1)
        return self.R0 * 2.0 * np.arctan2(chord, cochord)

    def base_total_volume(self):
        return euclidean_sphere_area(self.n + 1) * self.R0**self.n

    def base_injectivity_radius(self):
        return math.pi * self.R0

    def base_diameter(self):
        return math.pi * self.R0

    def base_ball_volume(self, r):
        n, R = self.n, self.R0
        a = min(max(r, 0.0) / R, math.pi)
        if n == 1:
            return 2.0 * R * a
        if n == 2:
            return 2.0 * math.pi * R**2 * (1.0 - math.cos(a))
        # integral of sin^{n-1} over [0, a] through the regularized incomplete beta
        full = special.beta(n / 2, 0.5)
        half = 0.5 * full * special.betainc(n / 2, 0.5, math.sin(a) ** 2)
        integral = half if a <= math.pi / 2 else full - half
        return euclidean_sphere_area(n) * R**n * integral

    def base_shell_area(self, r):
        n, R = self.n, self.R0
        a = max(r, 0.0) / R
        if a > math.pi:
            return 0.0
        if n == 1:
            return 2.0 if a < math.pi else 1.0
        return euclidean_sphere_area(n) * (R * math.sin(a)) ** (n - 1)

    def scalar_curvature(self, t):
        return self.n * (self.n - 1) / self.radius(t) ** 2

    # quadrature support -------------------------------------------------
    def exp_points(self, x, rho, directions):
        """Points at base distance ``rho`` from ``x`` along tangent ``directions``.

        ``directions`` has shape (k, n) in the tangent frame of ``x``; the
        result has shape (len(rho), k, n + 1).
        """
        x = np.asarray(x, float)
        frame = _tangent_frame(x)
        v = directions @ frame.T
        ang = np.asarray(rho, float)[:, None, None] / self.R0
        return np.cos(ang) * x + np.sin(ang) * v[None]

    def radial_density(self, rho):
        return (self.R0 * np.sin(np.asarray(rho) / self.R0)) ** (self.n - 1)

    # sampling -------------------------------------------------------------
    def random_points(self, N, rng):
        g = rng.standard_normal((N, self.n + 1))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def quasi_uniform_points(self, N, rng):
        if self.n == 1:
            ang = (np.arange(N) + rng.random()) * (2 * math.pi / N)
            return np.column_stack([np.cos(ang), np.sin(ang)])
        if self.n == 2:
            i = np.arange(N) + 0.5
            z = 1.0 - 2.0 * i / N
            phi = math.pi * (1.0 + math.sqrt(5.0)) * i
            rr = np.sqrt(1.0 - z * z)
            pts = np.column_stack([rr * np.cos(phi), rr * np.sin(phi), z])
            q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            return pts @ q.T
        return _best_candidate(self, N, rng)


class FlatTorus(AnalyticSpace):
    """Flat torus R^n / (side Z)^n; points are coordinates in [0, side)^n."""

    kind = "torus"
    virtually_psc = True

    def __init__(self, n, side, flow=None, time_interval=(0.0, 1.0), orientation=None):
        flow = Static() if flow is None else flow
        if not side > 0:
            raise ValueError(f"side must be positive, got {side}")
        if orientation is None:
            orientation = "backward" if isinstance(flow, RicciBackward) else "forward"
        super().__init__(n, flow, time_interval, orientation)
        self.side = float(side)
        if isinstance(flow, RicciBackward):
            # Ric = 0: the Ricci flow of a flat torus is static
            self._law = Static()

    def _with_law(self, law, orientation):
        out = FlatTorus(self.n, self.side, Static(), self.time_interval, orientation)
        out.flow = law if not isinstance(law, Static) else self.flow
        out._law = law
        return out

    @property
    def ambient_dim(self):
        return self.n

    def base_distance(self, x, y):
        diff = np.abs(x - y) % self.side
        diff = np.minimum(diff, self.side - diff)
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def base_total_volume(self):
        return self.side**self.n

    def base_injectivity_radius(self):
        return 0.5 * self.side

    def base_diameter(self):
        return 0.5 * self.side * math.sqrt(self.n)

    def base_ball_volume(self, r):
        return _cube_ball_volume(self.n, max(r, 0.0), 0.5 * self.side)

    def base_shell_area(self, r):
        n, a = self.n, 0.5 * self.side
        r = max(r, 0.0)
        if r <= a:
            return euclidean_sphere_area(n) * r ** (n - 1)
        if n == 1:
            return 0.0
        if n == 2:
            if r >= a * math.sqrt(2.0):
                return 0.0
            return 2 * math.pi * r - 8 * r * math.acos(a / r)
        h = 1e-6 * r
        return (_cube_ball_volume(n, r + h, a) - _cube_ball_volume(n, r - h, a)) / (2 * h)

    def scalar_curvature(self, t):
        return 0.0

    def exp_points(self, x, rho, directions):
        x = np.asarray(x, float)
        pts = x + np.asarray(rho, float)[:, None, None] * directions[None]
        return pts % self.side

    def radial_density(self, rho):
        return np.asarray(rho, float) ** (self.n - 1)

    def random_points(self, N, rng):
        return rng.random((N, self.n)) * self.side

    def quasi_uniform_points(self, N, rng):
        k = round(N ** (1.0 / self.n))
        shift = rng.random(self.n)
        if k**self.n == N:
            axes = [(np.arange(k) + shift[i]) / k for i in range(self.n)]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)
            return (grid % 1.0) * self.side
        # Kronecker sequence with the generalized golden ratio
        g = 2.0
        for _ in range(50):
            g = (1.0 + g) ** (1.0 / (self.n + 1))
        alpha = (1.0 / g) ** np.arange(1, self.n + 1)
        pts = (shift + np.outer(np.arange(1, N + 1), alpha)) % 1.0
        return pts * self.side


def _cube_ball_volume(n, r, a):
    # volume of {u in [-a, a]^n : |u| <= r}
    if n == 1:
        return 2.0 * min(r, a)
    if n == 2:
        if r <= a:
            return math.pi * r * r
        if r >= a * math.sqrt(2.0):
            return 4.0 * a * a
        return math.pi * r * r - 4.0 * (r * r * math.acos(a / r) - a * math.sqrt(r * r - a * a))
    lim = min(r, a)
    val, _ = integrate.quad(lambda u: _cube_ball_volume(n - 1, math.sqrt(max(r * r - u * u, 0.0)), a), -lim, lim,
                            limit=200)
    return val


def _best_candidate(model, N, rng, k=12):
    pts = [model.random_points(1, rng)[0]]
    for _ in range(N - 1):
        cand = model.random_points(k, rng)
        dist = np.min(model.base_distance(cand[:, None, :], np.asarray(pts)[None]), axis=1)
        pts.append(cand[np.argmax(dist)])
    return np.asarray(pts)


def make_round_sphere(n, R0, flow=None, time_interval=(0.0, 1.0), orientation=None):
    """Round n-sphere of initial radius ``R0`` evolving under ``flow``.

    ``RicciBackward`` gives ``R(tau)^2 = R0^2 + 2 (n - 1) tau``.
    """
    return RoundSphere(n, R0, flow, time_interval, orientation)


def make_flat_torus(n, side, flow=None, time_interval=(0.0, 1.0), orientation=None):
    """Flat n-torus with period ``side``; scalar curvature vanishes identically."""
    return FlatTorus(n, side, flow, time_interval, orientation)


# --------------------------------------------------------------------------
# sampled spaces


class SampledSpace:
    """Finite metric-measure carrier with per-slice distances and weights.

    A sampled space either wraps an analytic ``model`` (distances and weights
    at any time follow the model's scale law exactly) or stores one distance
    matrix and weight vector per entry of ``time_grid``; between grid times
    the matrix-backed form interpolates linearly, which keeps every slice a
    (pseudo) metric.

    ``membership`` selects how averaging windows weigh their points:
    ``"calibrated"`` (default) uses fractional cell overlap with a per-point
    radius tuned so the window's second moment matches the Euclidean one,
    ``"cell"`` uses plain fractional overlap and ``"hard"`` the raw indicator.
    ``ratio_oracle`` lets the volume- and area-ratio operators read closed-form
    volumes from the model instead of counting sample weights.
    """

    backend = "sampled"

    def __init__(self, n, time_grid, *, distances=None, weights=None, points=None, model=None,
                 base_weights=None, pseudo_metric=False, orientation=None, provenance="external",
                 strategy=None, seed=None, membership="calibrated", reversible=True, resolution=2.0, ratio_oracle=None,
                 virtually_psc=None, validate=True):
        self.n = int(n)
        self.time_grid = np.asarray(time_grid, float)
        if self.time_grid.ndim != 1 or len(self.time_grid) < 1 or np.any(np.diff(self.time_grid) <= 0):
            raise ValueError("time_grid must be a strictly increasing 1-d array")
        if membership not in MEMBERSHIPS:
            raise ValueError(f"membership must be one of {MEMBERSHIPS}")
        self.model = model
        self.points = None if points is None else np.asarray(points, float)
        self.provenance = provenance
        self.strategy = strategy
        self.seed = seed
        self.membership = membership
        self.reversible = bool(reversible)
        self.resolution = float(resolution)
        self.pseudo_metric = bool(pseudo_metric)
        self._cache = {}
        if model is not None:
            if self.points is None or base_weights is None:
                raise ValueError("model-backed spaces need points and base_weights")
            self.base_weights = np.asarray(base_weights, float)
            self.N = len(self.points)
            self.time_interval = model.time_interval
            self.orientation = model.orientation
            self._dist_stack = None
            self._weight_stack = None
        else:
            d = np.asarray(distances, float)
            w = np.asarray(weights, float)
            if d.ndim == 2:
                d = d[None]
            if w.ndim == 1:
                w = w[None]
            if d.shape[0] != len(self.time_grid) or w.shape[0] != len(self.time_grid):
                raise ValueError("one distance matrix and weight vector required per grid time")
            if d.shape[1] != d.shape[2] or d.shape[1] != w.shape[1]:
                raise ValueError("distance matrices must be N x N with N weights")
            self.N = d.shape[1]
            self._dist_stack = d
            self._weight_stack = w
            self.time_interval = (float(self.time_grid[0]), float(self.time_grid[-1]))
            self.orientation = orientation or "forward"
            if validate:
                self._validate()
        if self.N < 2:
            raise ValueError("a sampled space needs at least two points")
        if ratio_oracle is None:
            ratio_oracle = model is not None
        if ratio_oracle and model is None:
            raise ValueError("ratio_oracle requires a model-backed space")
        self.ratio_oracle = bool(ratio_oracle)
        if virtually_psc is None:
            virtually_psc = bool(model is not None and model.virtually_psc)
        self.virtually_psc = bool(virtually_psc)

    # construction helpers -------------------------------------------------
    @classmethod
    def from_matrices(cls, n, time_grid, distances, weights, **kwargs):
        return cls(n, time_grid, distances=distances, weights=weights, **kwargs)

    def _validate(self):
        for k in range(len(self.time_grid)):
            check_metric(self._dist_stack[k], pseudo_metric=self.pseudo_metric)
            w = self._weight_stack[k]
            if not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError(f"weights on slice {k} must be finite, nonnegative with positive mass")

    # time -----------------------------------------------------------------
    def check_time(self, t):
        t0, t1 = self.time_interval
        if not (t0 - 1e-12 <= t <= t1 + 1e-12):
            raise ValueError(f"time {t} outside interval {self.time_interval}")

    def _bracket(self, t):
        g = self.time_grid
        if len(g) == 1:
            return 0, 0, 0.0
        k = int(np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2))
        lam = (t - g[k]) / (g[k + 1] - g[k])
        return k, k + 1, float(np.clip(lam, 0.0, 1.0))

    # slices -----------------------------------------------------------------
    def base_distances(self):
        if "base_d" not in self._cache:
            p = self.points
            self._cache["base_d"] = self.model.base_distance(p[:, None, :], p[None, :, :])
        return self._cache["base_d"]

    def distances(self, t):
        """Dense N x N distance matrix at time ``t``."""
        self.check_time(t)
        if self.model is not None:
            return self.model.scale(t) * self.base_distances()
        a, b, lam = self._bracket(t)
        if lam == 0.0:
            return self._dist_stack[a]
        return (1 - lam) * self._dist_stack[a] + lam * self._dist_stack[b]

    def distance_rows(self, t, rows):
        rows = np.atleast_1d(rows)
        if self.model is not None:
            self.check_time(t)
            return self.model.scale(t) * self.base_distances()[rows]
        return self.distances(t)[rows]

    def weights(self, t):
        """Measure weights of the sample points at time ``t``."""
        self.check_time(t)
        if self.model is not None:
            return self.base_weights * self.model.scale(t) ** self.n
        a, b, lam = self._bracket(t)
        return (1 - lam) * self._weight_stack[a] + lam * self._weight_stack[b]

    def total_weight(self, t):
        return float(self.weights(t).sum())

    def spacing(self, t):
        """Typical point spacing: side of a cube holding the mean weight."""
        return float(np.mean(self.weights(t)) ** (1.0 / self.n))

    def d2_rate(self, t, rows=None):
        """Exact ``d/dt d_t^2`` rows from the model oracle."""
        if self.model is None:
            raise UnsupportedOracleError("exact time derivatives need a model-backed space")
        base = self.base_distances() if rows is None else self.base_distances()[np.atleast_1d(rows)]
        return self.model.scale_sq_rate(t) * base**2

    # transformations ----------------------------------------------------------
    def reversed(self):
        """The same flow parameterized by ``t_min + t_max - t``."""
        t0, t1 = self.time_interval
        grid = (t0 + t1) - self.time_grid[::-1]
        common = dict(points=self.points, pseudo_metric=self.pseudo_metric, provenance=self.provenance,
                      strategy=self.strategy, seed=self.seed, membership=self.membership,
                      reversible=self.reversible, resolution=self.resolution,
                      ratio_oracle=self.ratio_oracle, virtually_psc=self.virtually_psc)
        if self.model is not None:
            out = SampledSpace(self.n, grid, model=self.model.reversed(), base_weights=self.base_weights,
                               **common)
            out._cache = self._cache
            return out
        other = "backward" if self.orientation == "forward" else "forward"
        return SampledSpace(self.n, grid, distances=self._dist_stack[::-1], weights=self._weight_stack[::-1],
                            orientation=other, validate=False, **common)

    def materialize(self, time_grid=None):
        """Matrix-backed copy holding explicit slices on ``time_grid``."""
        grid = self.time_grid if time_grid is None else np.asarray(time_grid, float)
        d = np.stack([self.distances(t) for t in grid])
        w = np.stack([self.weights(t) for t in grid])
        return SampledSpace(self.n, grid, distances=d, weights=w, points=self.points,
                            pseudo_metric=self.pseudo_metric, orientation=self.orientation,
                            provenance=self.provenance, strategy=self.strategy, seed=self.seed,
                            membership=self.membership, reversible=self.reversible,
                            resolution=self.resolution, ratio_oracle=False, virtually_psc=self.virtually_psc,
                            validate=False)

    def with_options(self, **kwargs):
        """Shallow copy with a different ``membership`` or ``ratio_oracle``."""
        out = object.__new__(SampledSpace)
        out.__dict__.update(self.__dict__)
        out._cache = self._cache
        for key, val in kwargs.items():
            if key not in ("membership", "reversible", "resolution", "ratio_oracle", "virtually_psc"):
                raise TypeError(f"unknown option {key!r}")
            setattr(out, key, val)
        return out

    # serialization ------------------------------------------------------------
    def to_json(self):
        """JSON container with full-precision slices on ``time_grid``."""
        out = {
            "n": self.n,
            "time_grid": self.time_grid.tolist(),
            "orientation": self.orientation,
            "distances": [self.distances(t).ravel().tolist() for t in self.time_grid],
            "weights": [self.weights(t).tolist() for t in self.time_grid],
            "pseudo_metric": self.pseudo_metric,
        }
        if self.points is not None:
            out["points"] = self.points.tolist()
        return out

    @classmethod
    def from_json(cls, data, **kwargs):
        n = int(data["n"])
        grid = np.asarray(data["time_grid"], float)
        w = np.asarray(data["weights"], float)
        N = w.shape[1]
        d = np.asarray(data["distances"], float).reshape(len(grid), N, N)
        return cls(n, grid, distances=d, weights=w, points=data.get("points"),
                   pseudo_metric=bool(data.get("pseudo_metric", False)),
                   orientation=data.get("orientation", "forward"), **kwargs)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path, **kwargs):
        return cls.from_json(json.loads(Path(path).read_text()), **kwargs)

    def describe(self):
        out = {"backend": "sampled", "N": self.N, "n": self.n, "provenance": self.provenance,
               "strategy": self.strategy, "seed": self.seed, "membership": self.membership,
               "reversible": self.reversible, "resolution": self.resolution,
               "ratio_oracle": self.ratio_oracle, "orientation": self.orientation}
        if self.model is not None:
            out["model"] = self.model.describe()
        return out


def check_metric(d, pseudo_metric=False, tol=METRIC_TOL, triples=20000, seed=0):
    """Raise ``ValueError`` unless ``d`` is a (pseudo) metric matrix."""
    d = np.asarray(d, float)
    if not np.all(np.isfinite(d)) or np.any(d < -tol):
        raise ValueError("distances must be finite and nonnegative")
    if np.max(np.abs(d - d.T)) > tol:
        raise ValueError("distance matrix is not symmetric")
    if np.max(np.abs(np.diag(d))) > tol:
        raise ValueError("distance matrix has a nonzero diagonal")
    off = d + np.eye(len(d))
    if not pseudo_metric and np.any(off <= tol):
        raise ValueError("distinct points at zero distance; pass pseudo_metric=True to allow this")
    N = len(d)
    if N <= 200:
        viol = d[:, None, :] - d[:, :, None] - d[None, :, :].transpose(0, 2, 1)
        # viol[i, j, k] = d[i, k] - d[i, j] - d[j, k]
        worst = viol.max()
    else:
        rng = np.random.default_rng(seed)
        i, j, k = rng.integers(0, N, size=(3, triples))
        worst = np.max(d[i, k] - d[i, j] - d[j, k])
    if worst > tol:
        raise ValueError(f"triangle inequality violated by {worst:.3e}")


def sample(space, N, seed=0, strategy="uniform-random", time_grid=None, membership="calibrated",
           ratio_oracle=True):
    """Draw ``N`` points from an analytic model flow.

    Weights are equal, ``total_volume(t) / N``. The result is deterministic
    in ``seed``.
    """
    if space.backend != "analytic":
        raise ValueError("sample() needs an analytic space")
    N = int(N)
    if N < 2:
        raise ValueError(f"need at least two sample points, got {N}")
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    rng = np.random.default_rng(seed)
    if strategy == "uniform-random":
        pts = space.random_points(N, rng)
    else:
        pts = space.quasi_uniform_points(N, rng)
    if time_grid is None:
        time_grid = np.linspace(*space.time_interval, 11)
    base_w = np.full(N, space.base_total_volume() / N)
    return SampledSpace(space.n, time_grid, points=pts, model=space, base_weights=base_w,
                        provenance=f"sampled-from-analytic(seed={seed})", strategy=strategy, seed=seed,
                        membership=membership, ratio_oracle=ratio_oracle)


# --------------------------------------------------------------------------
# measurements


def cell_fraction(s, n):
    """Fraction of an n-ball lying in the half-space ``u_1 <= s`` (s in radii)."""
    u = np.clip(s, -1.0, 1.0)
    return 0.5 + 0.5 * np.sign(u) * special.betainc(0.5, 0.5 * (n + 1), u * u)


def cell_radii(weights, n):
    return (np.asarray(weights, float) / euclidean_ball_volume(n)) ** (1.0 / n)


def ball_measure(space, t, x, r, mode="hard"):
    """Measure of the closed ball ``B_r(x)`` at time ``t``.

    On sampled spaces ``mode="hard"`` sums the weights of points within
    distance ``r``; ``mode="cell"`` counts each point's cell by the fraction
    of it inside the ball.
    """
    if r < 0:
        raise ValueError("radius must be nonnegative")
    if space.backend == "analytic":
        space.check_time(t)
        return space.ball_volume(t, r)
    w = space.weights(t)
    d = space.distance_rows(t, x)[0]
    if mode == "hard":
        return float(w[d <= r * (1 + 1e-12)].sum())
    if mode == "cell":
        return float(np.sum(w * cell_fraction((r - d) / cell_radii(w, space.n), space.n)))
    raise ValueError("mode must be 'hard' or 'cell'")


def _quotients(space, t, x, y, h):
    t0, t1 = space.time_interval

    def d2(s):
        return space.distance_rows(s, x)[0][np.atleast_1d(y)] ** 2

    out = {}
    base = d2(t)
    if t + h <= t1 + 1e-12:
        out["forward"] = (d2(min(t + h, t1)) - base) / h
    if t - h >= t0 - 1e-12:
        out["backward"] = (base - d2(max(t - h, t0))) / h
    return out


def d2_time_derivative(space, t, x, y, side="upper", h=None, ladder=None):
    """Time derivative of ``d_t(x, y)^2`` in the space's own parameter.

    Analytic spaces return the exact rate. Sampled spaces return the
    forward quotient for ``side="upper"`` and the backward quotient for
    ``side="lower"`` (falling back to the other side at an interval end);
    with an h-ladder, the max (upper) or min (lower) over both quotients on
    the finer half of the ladder. ``side="exact"`` reads the model oracle.
    """
    if side not in ("upper", "lower", "exact"):
        raise ValueError("side must be 'upper', 'lower' or 'exact'")
    space.check_time(t)
    if space.backend == "analytic":
        return space.d2_rate(t, x, y)
    if side == "exact":
        return space.d2_rate(t, x)[0][np.atleast_1d(y)]
    t0, t1 = space.time_interval
    if ladder is not None:
        hs = sorted(float(v) for v in ladder)[::-1]
        tail = hs[len(hs) // 2:]
        vals = []
        for hh in tail:
            vals.extend(_quotients(space, t, x, y, hh).values())
        if not vals:
            raise ValueError(f"no admissible difference quotient at t={t}")
        stack = np.stack(vals)
        return stack.max(axis=0) if side == "upper" else stack.min(axis=0)
    if h is None:
        h = 1e-4 * (t1 - t0)
    q = _quotients(space, t, x, y, h)
    order = ("forward", "backward") if side == "upper" else ("backward", "forward")
    for key in order:
        if key in q:
            return q[key]
    raise ValueError(f"no admissible difference quotient at t={t} with h={h}")


def scalar_curvature(space, t, x=None):
    """Closed-form scalar curvature of an analytic model at time ``t``."""
    if space.backend != "analytic":
        raise UnsupportedOracleError("scalar curvature has no oracle on sampled spaces")
    space.check_time(t)
    return space.scalar_curvature(t)
