"""Scenario runner.

``weakflow run CONFIG [--out DIR] [--jobs K]`` executes one scenario and
writes ``report.json``, ``data.csv`` and ``manifest.json``;
``weakflow list`` prints the bundled scenarios; ``weakflow validate CONFIG``
checks a config against the schema.

Exit codes: 0 pass or complete, 2 verdict fail, 3 inconclusive, 1 error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy
from scipy import integrate

from . import __version__
from .averaging import ScalarField, expansion_fit
from .errors import WeakflowError
from .propagators import (
    ChernoffSchedule,
    duality_gap,
    dynamic_conjugate,
    dynamic_heat,
    static_heat,
)
from .spaces import (
    CustomScale,
    RicciBackward,
    Static,
    make_flat_torus,
    make_round_sphere,
    sample,
)
from .transport import CostSpec, Delta, jensen_audit
from .verify import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    SCHEMA_VERSION,
    SaturationConfig,
    check_coupled_contraction,
    check_weak_ricci_flow,
    check_wsrf,
    saturation_defect,
    trace_functional,
)

EXIT = {PASS: 0, FAIL: 2, INCONCLUSIVE: 3}
EXIT_ERROR = 1
TASKS = ["expansion-study", "heat-convergence", "conjugate-convergence", "duality", "wsrf", "contraction",
         "trace", "saturation", "weak-ricci-flow", "cross-check", "determinism"]
FIELDS = ["one", "cos-x0", "coord-last", "mixed", "random-linear"]

# --------------------------------------------------------------------------
# schema

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_interval = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

SPACE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "n"],
    "properties": {
        "model": {"enum": ["sphere", "torus"]},
        "n": _posint,
        "R0": _pos,
        "side": _pos,
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "required": ["law"],
            "properties": {
                "law": {"enum": ["static", "ricci-backward", "exp-scale"]},
                "rate": {"type": "number"},
            },
        },
        "time_interval": _interval,
        "orientation": {"enum": ["forward", "backward"]},
        "backend": {"enum": ["analytic", "sampled"]},
        "N": {"type": "integer", "minimum": 2},
        "strategy": {"enum": ["uniform-random", "quasi-uniform"]},
    },
}

PROBE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "field", "expected_c2", "rel_tol"],
    "properties": {
        "kind": {"enum": ["sigma", "nu", "theta", "eta", "alpha", "beta"]},
        "field": {"enum": FIELDS},
        "point": {"type": "array", "items": {"type": "number"}},
        "expected_c2": {"type": "number"},
        "rel_tol": _pos,
    },
}

CASE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["label", "space"],
    "properties": {
        "label": {"type": "string", "minLength": 1},
        "space": SPACE_SCHEMA,
        "expect": {"enum": ["pass", "fail"]},
        "expected": {"type": "number"},
        "expected_sphere": {"type": "number"},
        "tol": _pos,
        "tol_sphere": _pos,
        "elapsed": _pos,
        "m": _posint,
        "j": _posint,
        "refine": {"type": "boolean"},
        "point": {"type": "integer", "minimum": 0},
        "field": {"enum": FIELDS},
        "derivative_side": {"enum": ["upper", "lower", "exact"]},
        "probes": {"type": "array", "items": PROBE_SCHEMA, "minItems": 1},
    },
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "name", "task", "cases"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "pattern": "^[a-z0-9][a-z0-9-]*$"},
        "description": {"type": "string"},
        "criterion": {"type": ["integer", "null"]},
        "task": {"enum": TASKS},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "cases": {"type": "array", "items": CASE_SCHEMA},
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "probes": {"type": "array", "items": PROBE_SCHEMA, "minItems": 1},
                "elapsed": _pos,
                "j_values": {"type": "array", "items": _posint, "minItems": 2},
                "kernel": {"enum": ["nu", "sigma", "beta", "alpha"]},
                "field": {"enum": FIELDS},
                "tol": _pos,
                "noise": _pos,
                "mass_tol": _pos,
                "m": _posint,
                "j": _posint,
                "interval": _interval,
                "time_grid": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "slices": {"type": "integer", "minimum": 2},
                "points": _posint,
                "ladder": {"type": "array", "items": _pos, "minItems": 4},
                "variant": {"enum": ["ball", "sphere"]},
                "constant_mode": {"enum": ["self-consistent", "paper-literal"]},
                "paper_form": {"enum": ["theorem", "epilogue"]},
                "slack": _pos,
                "slack_sat": _pos,
                "costs": {"type": "array", "items": {"enum": ["distance", "distance-squared", "d-plus-d2"]},
                          "minItems": 1},
                "deltas": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2,
                           "maxItems": 2},
                "jensen_pairs": {"type": "integer", "minimum": 0},
                "jensen_support": {"type": "integer", "minimum": 2},
                "scenarios": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "reruns": {"type": "integer", "minimum": 2},
            },
        },
    },
}


class ConfigError(WeakflowError):
    """Invalid scenario configuration."""


def _locate(text, path):
    # best-effort line number of the innermost key on a JSON path
    line = None
    pos = 0
    for key in path:
        if isinstance(key, str):
            idx = text.find(f'"{key}"', pos)
            if idx >= 0:
                pos = idx
                line = text.count("\n", 0, idx) + 1
    return line


def parse_config(text, source="<config>"):
    """Parse and validate a scenario config; raises ConfigError with diagnostics."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}: line {err.lineno} column {err.colno}: {err.msg}") from None
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        lines = []
        for err in errors[:10]:
            path = "/".join(str(p) for p in err.absolute_path) or "<root>"
            ln = _locate(text, list(err.absolute_path))
            where = f"line {ln}, " if ln else ""
            lines.append(f"{source}: {where}field '{path}': {err.message}")
        raise ConfigError("\n".join(lines))
    for i, case in enumerate(cfg["cases"]):
        sp = case["space"]
        t = sp.get("time_interval")
        if t is not None and not t[0] < t[1]:
            raise ConfigError(f"{source}: field 'cases/{i}/space/time_interval': must be increasing")
        if sp.get("backend", "sampled") == "sampled" and "N" not in sp:
            raise ConfigError(f"{source}: field 'cases/{i}/space/N': required for sampled spaces")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# builders


def build_space(spec, seed):
    n = spec["n"]
    flow_spec = spec.get("flow", {"law": "static"})
    law = flow_spec["law"]
    if law == "static":
        flow = Static()
    elif law == "ricci-backward":
        flow = RicciBackward()
    else:
        k = float(flow_spec.get("rate", 1.0))
        flow = CustomScale(lambda t, k=k: math.exp(k * t), lambda t, k=k: k * math.exp(k * t),
                           label=f"exp({k:g} t)")
    interval = tuple(spec.get("time_interval", (0.0, 1.0)))
    orientation = spec.get("orientation")
    if spec["model"] == "sphere":
        model = make_round_sphere(n, spec.get("R0", 1.0), flow, interval, orientation)
    else:
        model = make_flat_torus(n, spec.get("side", 1.0), flow, interval, orientation)
    if spec.get("backend", "sampled") == "analytic":
        return model
    return sample(model, spec["N"], seed=seed, strategy=spec.get("strategy", "quasi-uniform"))


def _period(space):
    model = space if space.backend == "analytic" else space.model
    return getattr(model, "side", None)


def field_function(name, space, seed):
    """Vectorized test function of ambient coordinates."""
    side = _period(space)
    if name == "one":
        return lambda p: np.ones(np.shape(p)[:-1])
    if name == "cos-x0":
        L = side or 2 * math.pi
        return lambda p: np.cos(2 * math.pi * p[..., 0] / L)
    if name == "coord-last":
        return lambda p: p[..., -1]
    if name == "mixed":
        if side:
            return lambda p: (np.cos(2 * math.pi * p[..., 0] / side)
                              + 0.5 * np.sin(2 * math.pi * p[..., -1] / side))
        return lambda p: p[..., -1] + p[..., 0] * p[..., 1 % p.shape[-1]]
    coef = np.random.default_rng(seed).standard_normal(space.n + (0 if side else 1))
    if side:
        return lambda p: np.cos(2 * math.pi * p[..., 0] / side) * coef[0] + np.sin(
            2 * math.pi * p[..., -1] / side) * coef[-1]
    return lambda p: p @ coef


def field_values(name, space, seed):
    return field_function(name, space, seed)(space.points)


def make_cost(name):
    if name == "distance":
        return CostSpec.distance()
    if name == "distance-squared":
        return CostSpec.distance_squared()
    return CostSpec("convex", func=lambda d: d + d * d, label="d-plus-d2")


# --------------------------------------------------------------------------
# results


@dataclass
class CaseResult:
    label: str
    verdict: str
    metrics: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    witnesses: list = field(default_factory=list)
    expect: str | None = None
    reason: str | None = None

    @property
    def matched(self):
        return None if self.expect is None else self.verdict == self.expect

    def to_json(self):
        out = {"label": self.label, "verdict": self.verdict, "metrics": self.metrics, "witnesses": self.witnesses}
        if self.expect is not None:
            out["expect"] = self.expect
            out["matched"] = self.matched
        if self.reason:
            out["reason"] = self.reason
        return out


def _row(rows, case, series, step, x, value):
    rows.append((case, series, step, x, value))


def _verdict(ok):
    return PASS if ok else FAIL


# --------------------------------------------------------------------------
# tasks


def task_expansion(case, params, seed):
    space = build_space(case["space"], seed)
    rows, metrics, witnesses = [], {}, []
    ok = True
    probes = case.get("probes") or params.get("probes")
    if not probes:
        raise ConfigError(f"case {case['label']!r}: expansion-study needs probes")
    for probe in probes:
        f = field_function(probe["field"], space, seed)
        if space.backend == "analytic":
            x = np.asarray(probe.get("point") or _default_point(space), float)
            fld = ScalarField(f, space.time_interval[0], space)
        else:
            x = 0
            fld = ScalarField(f(space.points), space.time_interval[0], space)
        fit = expansion_fit(probe["kind"], space, space.time_interval[0], x, fld)
        rel = abs(fit.c2 - probe["expected_c2"]) / abs(probe["expected_c2"])
        name = f"{probe['kind']}:{probe['field']}"
        metrics[name] = {"c0": fit.c0, "c2": fit.c2, "expected_c2": probe["expected_c2"], "rel_error": rel,
                         "residual": fit.residual}
        for i, (r, v) in enumerate(zip(fit.ladder, fit.values)):
            _row(rows, case["label"], name, i, r, v)
        if rel > probe["rel_tol"]:
            ok = False
            witnesses.append({"probe": name, "c2": fit.c2, "expected": probe["expected_c2"], "rel_error": rel})
    return CaseResult(case["label"], _verdict(ok), metrics, rows, witnesses)


def _default_point(space):
    return [0.0] * space.n if space.kind == "torus" else [0.0] * space.n + [1.0]


def task_heat(case, params, seed):
    space = build_space(case["space"], seed)
    T = case.get("elapsed", params.get("elapsed", 0.02))
    kernel = params.get("kernel", "nu")
    f = field_values(case.get("field", params.get("field", "cos-x0")), space, seed)
    L = _period(space)
    exact = math.exp(-((2 * math.pi / L) ** 2) * T) * f
    t0 = space.time_interval[0]
    errors = []
    rows = []
    for j in params["j_values"]:
        u = static_heat(space, t0, 0.0, T, ChernoffSchedule(1, j, kernel), f).values
        err = float(np.max(np.abs(u - exact)))
        errors.append(err)
        _row(rows, case["label"], "sup_error", len(errors) - 1, j, err)
    noise = params.get("noise", 0.2)
    monotone = all(b <= (1 + noise) * a for a, b in zip(errors, errors[1:])) and errors[-1] < errors[0]
    final_ok = errors[-1] <= params.get("tol", 1e-2)
    witnesses = []
    if not final_ok:
        witnesses.append({"j": params["j_values"][-1], "sup_error": errors[-1]})
    if not monotone:
        witnesses.append({"errors": errors, "noise": noise})
    metrics = {"j_values": params["j_values"], "sup_errors": errors, "monotone": monotone}
    return CaseResult(case["label"], _verdict(final_ok and monotone), metrics, rows, witnesses)


def _integrated_scal(space, a, b):
    model = space.model if space.backend == "sampled" else space
    val, _ = integrate.quad(lambda t: model.scalar_curvature(t), a, b)
    return val


def task_conjugate(case, params, seed):
    space = build_space(case["space"], seed)
    a, b = params.get("interval", space.time_interval)
    m, j = case.get("m", params.get("m", 64)), case.get("j", params.get("j", 64))
    sched = ChernoffSchedule(m, j, params.get("kernel", "beta"))
    ones = np.ones(space.N)
    res = dynamic_conjugate(space, a, b, sched, ones)
    expected = math.exp(-_integrated_scal(space, a, b))
    err = float(np.max(np.abs(res.values - expected)))
    # mass along the way: one outer stage at a time
    rows = []
    u = ones
    masses = [float(u @ space.weights(a))]
    grid = np.linspace(a, b, m + 1)
    for k in range(m):
        u = dynamic_conjugate(space, grid[k], grid[k + 1], ChernoffSchedule(1, j, sched.kernel), u).values
        masses.append(float(u @ space.weights(grid[k + 1])))
    for k, (tau, mass) in enumerate(zip(grid, masses)):
        _row(rows, case["label"], "mass", k, tau, mass)
    for k, entry in enumerate(res.stage_log[j - 1::j]):
        _row(rows, case["label"], "stage_sup", k, entry["time"], entry["sup"])
    drift = max(abs(mm / masses[0] - 1) for mm in masses)
    ok = err <= params.get("tol", 2e-2) and drift <= params.get("mass_tol", 0.01)
    witnesses = [] if ok else [{"sup_error": err, "mass_drift": drift}]
    metrics = {"expected": expected, "sup_error": err, "min": float(res.values.min()),
               "max": float(res.values.max()), "mass_drift": drift}
    return CaseResult(case["label"], _verdict(ok), metrics, rows, witnesses)


def task_duality(case, params, seed):
    space = build_space(case["space"], seed)
    tau0 = space.time_interval[0]
    T = case.get("elapsed", 0.05)
    m, j = case.get("m", 16), case.get("j", 16)
    y = case.get("point", 0)
    g = field_values(case.get("field", "mixed"), space, seed)
    gaps = [duality_gap(space, tau0, tau0 + T, g, y, ChernoffSchedule(m, j, "beta"))]
    rows = [(case["label"], "gap", 0, m, gaps[0])]
    if case.get("refine", False):
        gaps.append(duality_gap(space, tau0, tau0 + T, g, y, ChernoffSchedule(2 * m, 2 * j, "beta")))
        rows.append((case["label"], "gap", 1, 2 * m, gaps[1]))
    tol = case.get("tol", params.get("tol", 5e-3))
    ok = gaps[0] <= tol and (len(gaps) == 1 or gaps[1] < gaps[0])
    witnesses = [] if ok else [{"gaps": gaps, "tol": tol}]
    return CaseResult(case["label"], _verdict(ok), {"gaps": gaps, "tol": tol}, rows, witnesses)


def _probe_points(space, count):
    if space.backend == "analytic":
        return [None]
    return list(np.linspace(0, space.N - 1, min(count, space.N)).astype(int))


def task_trace(case, params, seed):
    from .averaging import fit_even_powers
    from .verify import default_epsilon_ladder

    space = build_space(case["space"], seed)
    tau = space.time_interval[0]
    ladder = np.asarray(params.get("ladder") or default_epsilon_ladder(space, tau), float)
    side = case.get("derivative_side", "lower")
    pts = _probe_points(space, params.get("points", 8))
    rows, metrics, witnesses = [], {}, []
    ok = True
    targets = {"ball": (case["expected"], case.get("tol", 0.05)),
               "sphere": (case["expected_sphere"], case.get("tol_sphere", case.get("tol", 0.05)))}
    for domain, (target, tol) in targets.items():
        vals = [float(np.mean([trace_functional(space, tau, x, e, domain, side) for x in pts])) for e in ladder]
        fit = fit_even_powers(ladder, vals, kind=f"trace-{domain}")
        rel = abs(fit.c0 - target) / abs(target)
        metrics[domain] = {"c0": fit.c0, "expected": target, "rel_error": rel, "residual": fit.residual}
        for i, (e, v) in enumerate(zip(ladder, vals)):
            _row(rows, case["label"], f"trace-{domain}", i, e, v)
        if rel > tol:
            ok = False
            witnesses.append({"domain": domain, "c0": fit.c0, "expected": target})
    metrics["derivative_side"] = side
    return CaseResult(case["label"], _verdict(ok), metrics, rows, witnesses)


def _sat_config(params, space):
    kw = {"variant": params.get("variant", "ball"), "constant_mode": params.get("constant_mode", "self-consistent"),
          "paper_form": params.get("paper_form", "theorem"), "slack_sat": params.get("slack_sat", 0.05)}
    if params.get("ladder"):
        kw["epsilon_ladder"] = tuple(params["ladder"])
    return SaturationConfig(**kw)


def task_saturation(case, params, seed):
    space = build_space(case["space"], seed)
    if space.orientation == "forward":
        space = space.reversed()
    config = _sat_config(params, space)
    tau = space.time_interval[0]
    pts = _probe_points(space, params.get("points", 8))
    rows, witnesses, defects = [], [], []
    for x in pts:
        fit = saturation_defect(space, tau, x, config)
        defects.append(fit.c0)
        label = "analytic" if x is None else int(x)
        for i, (e, v) in enumerate(zip(fit.ladder, fit.values)):
            _row(rows, case["label"], f"bracket@{label}", i, e, v)
        _row(rows, case["label"], "defect", len(defects) - 1, label, fit.c0)
        if fit.c0 < -config.slack_sat:
            witnesses.append({"point": label, "defect": fit.c0, "residual": fit.residual})
    verdict = FAIL if witnesses else PASS
    metrics = {"defect_mean": float(np.mean(defects)), "defect_min": float(np.min(defects)),
               "defect_max": float(np.max(defects)), "constant_mode": config.constant_mode,
               "variant": config.variant}
    res = CaseResult(case["label"], verdict, metrics, rows, witnesses, case.get("expect"))
    if "expected" in case:
        tol = case.get("tol", 0.05)
        close = all(abs(d - case["expected"]) <= tol for d in defects)
        metrics.update(expected=case["expected"], tol=tol, within_tol=close)
        if not close:
            res.expect = res.expect or verdict
            res.witnesses.append({"expected_defect": case["expected"], "tol": tol, "defects": defects})
            res.verdict = FAIL if res.expect == PASS else PASS  # force a mismatch
            res.reason = "defect outside the expected band"
    return res


def _wsrf_grid(params, space):
    if params.get("time_grid"):
        return np.asarray(params["time_grid"], float)
    return np.linspace(*space.time_interval, params.get("slices", 5))


def task_wsrf(case, params, seed):
    space = build_space(case["space"], seed)
    if space.orientation != "forward":
        space = space.reversed()
    f0 = field_values(case.get("field", params.get("field", "mixed")), space, seed)
    grid = _wsrf_grid(params, space)
    sched = ChernoffSchedule(case.get("m", params.get("m", 8)), case.get("j", params.get("j", 8)), "nu")
    rep = check_wsrf(space, f0, grid, sched, params.get("slack"))
    rows = [(case["label"], "lipschitz", k, t, v) for k, (t, v) in enumerate(zip(grid, rep.details["lipschitz"]))]
    return CaseResult(case["label"], rep.verdict, {"lipschitz": rep.details["lipschitz"], **rep.tolerances}, rows,
                      rep.witnesses, case.get("expect"), rep.reason)


def _contraction(case, params, seed, space=None):
    space = space or build_space(case["space"], seed)
    if space.orientation != "backward":
        space = space.reversed()
    grid = np.linspace(*space.time_interval, params.get("slices", 5))
    d = params.get("deltas", [0, space.N // 3])
    sched = ChernoffSchedule(case.get("m", params.get("m", 8)), case.get("j", params.get("j", 8)), "beta")
    rows, witnesses, metrics = [], [], {}
    verdicts = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in params.get("costs", ["distance", "distance-squared"]):
            rep = check_coupled_contraction(space, Delta(d[0]), Delta(d[1]), make_cost(name), grid, sched,
                                            params.get("slack", 1e-6))
            verdicts[name] = rep.verdict
            metrics[name] = rep.details["costs"]
            for k, (t, c) in enumerate(zip(grid, rep.details["costs"])):
                _row(rows, case["label"], f"cost-{name}", k, t, c)
            witnesses += [dict(w, cost=name) for w in rep.witnesses]
    return verdicts, metrics, rows, witnesses, space


def task_contraction(case, params, seed):
    verdicts, metrics, rows, witnesses, space = _contraction(case, params, seed)
    ok = all(v == PASS for v in verdicts.values())
    pairs = params.get("jensen_pairs", 0)
    if pairs:
        jok, jrows = jensen_audit(space, space.time_interval[0], pairs=pairs, seed=seed,
                                  support=params.get("jensen_support"))
        metrics["jensen_ok"] = jok
        for k, (w1, w2) in enumerate(jrows):
            _row(rows, case["label"], "jensen-w2-minus-w1", k, k, w2 - w1)
        if not jok:
            witnesses.append({"jensen": "W1 > W2 on some pair"})
        ok = ok and jok
    metrics["verdicts"] = verdicts
    return CaseResult(case["label"], _verdict(ok), metrics, rows, witnesses, case.get("expect"))


def task_cross_check(case, params, seed):
    verdicts, metrics, rows, witnesses, space = _contraction(case, params, seed)
    wcase = dict(case)
    wres = task_wsrf(wcase, params, seed)
    rows += wres.rows
    any_pass = any(v == PASS for v in verdicts.values())
    implication = (not any_pass) or wres.verdict == PASS
    metrics = {"contraction": verdicts, "wsrf": wres.verdict, "implication_holds": implication,
               "lipschitz": wres.metrics["lipschitz"]}
    wit = [] if implication else [{"contraction": verdicts, "wsrf": wres.verdict}]
    return CaseResult(case["label"], _verdict(implication), metrics, rows, wit)


def task_weak_ricci_flow(case, params, seed):
    space = build_space(case["space"], seed)
    config = _sat_config(params, space)
    fwd = space if space.orientation == "forward" else space.reversed()
    if fwd.backend == "sampled":
        # a probe subset stands in for the full core
        config.core = tuple(int(x) for x in _probe_points(fwd, params.get("points", 8)))
        config.validate_core = False
    f0 = field_values(case.get("field", params.get("field", "mixed")), fwd, seed)
    wsrf = {"f0": f0, "time_grid": _wsrf_grid(params, fwd),
            "schedule": ChernoffSchedule(params.get("m", 8), params.get("j", 8), "nu"), "slack": params.get("slack")}
    rep = check_weak_ricci_flow(space, wsrf, config)
    rows = [(case["label"], "defect", k, "analytic" if d["point"] is None else d["point"], d["defect"])
            for k, d in enumerate(rep.details["defects"])]
    rows += [(case["label"], "lipschitz", k, k, v) for k, v in enumerate(rep.details.get("lipschitz") or [])]
    metrics = {"subchecks": rep.details["subchecks"],
               "defects": [d["defect"] for d in rep.details["defects"]]}
    return CaseResult(case["label"], rep.verdict, metrics, rows, rep.witnesses, case.get("expect"), rep.reason)


TASK_RUNNERS = {
    "expansion-study": task_expansion,
    "heat-convergence": task_heat,
    "conjugate-convergence": task_conjugate,
    "duality": task_duality,
    "trace": task_trace,
    "saturation": task_saturation,
    "wsrf": task_wsrf,
    "contraction": task_contraction,
    "cross-check": task_cross_check,
    "weak-ricci-flow": task_weak_ricci_flow,
}


# --------------------------------------------------------------------------
# running


def bundled_dir():
    return resources.files("weakflow") / "scenarios"


def bundled_scenarios():
    """Parsed bundled configs keyed by name, sorted by criterion then name."""
    out = {}
    for entry in bundled_dir().iterdir():
        if entry.name.endswith(".json"):
            cfg = parse_config(entry.read_text(), entry.name)
            out[cfg["name"]] = cfg
    return dict(sorted(out.items(), key=lambda kv: (kv[1].get("criterion") or 99, kv[0])))


def list_scenarios():
    return [{"name": name, "task": cfg["task"], "criterion": cfg.get("criterion"),
             "description": cfg.get("description", "")} for name, cfg in bundled_scenarios().items()]


def effective_seed(cfg):
    env = os.environ.get("WEAKFLOW_SEED")
    if env is not None and env.strip() != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"WEAKFLOW_SEED must be an integer, got {env!r}") from None
    return int(cfg.get("seed", 0))


def _csv_bytes(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "series", "step", "x", "value"])
    for case, series, step, x, value in rows:
        w.writerow([case, series, step, _num(x), _num(value)])
    return buf.getvalue().encode()


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _run_determinism(cfg, seed, jobs):
    params = cfg.get("params", {})
    names = params.get("scenarios", [])
    reruns = params.get("reruns", 2)
    catalogue = bundled_scenarios()
    cases, rows = [], []
    for name in names:
        if name not in catalogue:
            raise ConfigError(f"field 'params/scenarios': unknown bundled scenario {name!r}")
        sub = catalogue[name]
        digests = []
        for _ in range(reruns):
            result = execute(sub, jobs=jobs)
            digests.append(hashlib.sha256(result["data_csv"]).hexdigest())
        same = len(set(digests)) == 1
        cases.append(CaseResult(name, _verdict(same), {"sha256": digests[0], "identical": same}, [],
                                [] if same else [{"digests": digests}]))
        rows.append((name, "identical", 0, reruns, int(same)))
    return cases, rows


def execute(cfg, jobs=1):
    """Run a parsed config; returns the report dict and data.csv bytes."""
    seed = effective_seed(cfg)
    params = cfg.get("params", {})
    if cfg["task"] == "determinism":
        cases, rows = _run_determinism(cfg, seed, jobs)
    else:
        runner = TASK_RUNNERS[cfg["task"]]

        def run(case):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return runner(case, params, seed)

        if jobs > 1 and len(cfg["cases"]) > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
                cases = list(pool.map(run, cfg["cases"]))
        else:
            cases = [run(c) for c in cfg["cases"]]
        rows = [r for c in cases for r in c.rows]
    if any(c.expect is not None for c in cases):
        verdict = PASS if all(c.matched is not False for c in cases) else FAIL
    elif any(c.verdict == FAIL for c in cases):
        verdict = FAIL
    elif any(c.verdict == INCONCLUSIVE for c in cases):
        verdict = INCONCLUSIVE
    else:
        verdict = PASS
    report = {
        "schema_version": SCHEMA_VERSION,
        "scenario": cfg["name"],
        "task": cfg["task"],
        "criterion": cfg.get("criterion"),
        "seed": seed,
        "verdict": verdict,
        "exit_code": EXIT[verdict],
        "cases": [_clean(c.to_json()) for c in cases],
    }
    return {"report": report, "data_csv": _csv_bytes(rows), "verdict": verdict}


def _clean(obj):
    from .verify import _plain

    return _plain(obj)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _versions():
    import ot

    return {"weakflow": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pot": ot.__version__, "jsonschema": metadata.version("jsonschema")}


def run_scenario(cfg, out_dir=None, jobs=1):
    """Execute ``cfg`` and write report.json, data.csv and manifest.json; returns the exit code."""
    out = Path(out_dir or cfg.get("output") or f"weakflow-out/{cfg['name']}")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        result = execute(cfg, jobs=jobs)
        report, data, code = result["report"], result["data_csv"], EXIT[result["verdict"]]
    except ConfigError:
        raise
    except Exception as err:  # runtime failures are recorded, not raised
        report = {"schema_version": SCHEMA_VERSION, "scenario": cfg["name"], "task": cfg["task"],
                  "verdict": "error", "exit_code": EXIT_ERROR, "error": f"{type(err).__name__}: {err}"}
        data, code = _csv_bytes([]), EXIT_ERROR
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "data.csv").write_bytes(data)
    manifest = {"scenario": cfg["name"], "config_sha256": config_hash(cfg), "seed": effective_seed(cfg),
                "versions": _versions(), "exit_code": code,
                "wall_time_s": round(time.perf_counter() - start, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code


# --------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _resolve(config):
    path = Path(config)
    if path.exists():
        return load_config(path)
    catalogue = bundled_scenarios()
    if config in catalogue:
        return catalogue[config]
    raise ConfigError(f"{config}: no such file or bundled scenario")


def build_parser():
    p = _Parser(prog="weakflow", description="Run weak Ricci flow verification scenarios.")
    p.add_argument("--version", action="version", version=f"weakflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run a scenario config (path or bundled name)")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.add_argument("--json", action="store_true", help="machine-readable output")
    v = sub.add_parser("validate", help="validate a scenario config")
    v.add_argument("config")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            items = list_scenarios()
            if args.json:
                print(json.dumps(items, indent=2))
            else:
                for it in items:
                    crit = f"[{it['criterion']}]" if it["criterion"] else "[-]"
                    print(f"{it['name']:34s} {crit:5s} {it['task']:22s} {it['description']}")
            return 0
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"{args.config}: valid ({cfg['task']}, {len(cfg['cases'])} case(s))")
            return 0
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _resolve(args.config)
        code = run_scenario(cfg, args.out, args.jobs)
        report = json.loads((Path(args.out or cfg.get("output") or f"weakflow-out/{cfg['name']}")
                             / "report.json").read_text())
        print(f"{cfg['name']}: {report['verdict']} (exit {code})")
        if "error" in report:
            print(report["error"], file=sys.stderr)
        return code
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
