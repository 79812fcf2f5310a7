import json
import math

import numpy as np
import pytest

from weakflow.propagators import ChernoffSchedule
from weakflow.spaces import (
    CustomScale,
    RicciBackward,
    SampledSpace,
    make_flat_torus,
    make_round_sphere,
    sample,
)
from weakflow.transport import CostSpec, Delta
from weakflow.verify import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    SaturationConfig,
    VerdictReport,
    check_coupled_contraction,
    check_virtually_psc,
    check_weak_ricci_flow,
    check_wsrf,
    lipschitz_constant,
    saturation_constants,
    saturation_defect,
    trace_functional,
)

pytestmark = pytest.mark.filterwarnings("ignore::weakflow.errors.VirtuallyPscWarning")

NORTH = np.array([0.0, 0.0, 1.0])


def expanding_torus(N=400):
    # distances shrink in t, hence grow along the heat flow's reversed time
    law = CustomScale(lambda t: math.exp(-2 * t), lambda t: -2 * math.exp(-2 * t), label="exp(-2t)")
    return sample(make_flat_torus(2, 10.0, law, time_interval=(0.0, 0.3)), N, seed=0, strategy="quasi-uniform")


@pytest.fixture(scope="module")
def static_sphere():
    return sample(make_round_sphere(2, 1.0, time_interval=(0.0, 0.2)), 400, seed=0, strategy="quasi-uniform")


@pytest.fixture(scope="module")
def shrinking2000():
    flow = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.5))
    return sample(flow, 2000, seed=0, strategy="quasi-uniform")


# -- reports ----------------------------------------------------------------------


def test_report_invariants(tmp_path):
    with pytest.raises(ValueError):
        VerdictReport("x", FAIL)
    with pytest.raises(ValueError):
        VerdictReport("x", INCONCLUSIVE)
    with pytest.raises(ValueError):
        VerdictReport("x", "maybe")
    rep = VerdictReport("x", FAIL, [{"step": 1, "value": np.float64(0.5)}, {"step": 2, "extra": math.inf}])
    data = json.loads(json.dumps(rep.to_json()))
    assert data["schema_version"] == "1.0" and data["verdict"] == "fail"
    assert data["witnesses"][1]["extra"] == "inf"
    rep.witnesses_to_csv(tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "extra,step,value" and len(lines) == 3


# -- virtually psc ------------------------------------------------------------------


def test_virtually_psc_analytic():
    radii = np.linspace(0.05, 1.0, 8)
    rep = check_virtually_psc(make_round_sphere(2, 1.0), [0.0, 0.5], radii)
    assert rep.verdict == PASS and rep.details["r0"] == pytest.approx(1.0)
    rep = check_virtually_psc(make_flat_torus(2, 1.0), [0.0], np.linspace(0.05, 0.45, 5))
    assert rep.verdict == PASS
    assert rep.details["worst_relative_excess"] == pytest.approx(0.0, abs=1e-12)


def test_virtually_psc_sampled(static_sphere):
    rep = check_virtually_psc(static_sphere, [0.0], [0.2, 0.4, 0.6], points=range(0, 400, 40))
    assert rep.verdict == PASS


def test_virtually_psc_doubled_weights_fail():
    S = sample(make_round_sphere(2, 1.0), 300, seed=0, strategy="quasi-uniform")
    d = S.distances(0.0)
    w = S.weights(0.0)
    M = SampledSpace(2, [0.0, 1.0], distances=np.stack([d, d]), weights=np.stack([w, 2 * w]))
    rep = check_virtually_psc(M, [0.0, 1.0], [0.2, 0.4], points=range(0, 300, 30))
    assert rep.verdict == FAIL
    assert rep.witnesses and all(wit["time"] == 1.0 for wit in rep.witnesses)


# -- Lipschitz / WSRF ----------------------------------------------------------------


def test_lipschitz_basic(static_sphere):
    assert lipschitz_constant(static_sphere, 0.0, np.full(400, 3.0)) == 0.0
    f = static_sphere.distances(0.0)[7]
    lip, pair = lipschitz_constant(static_sphere, 0.0, f, return_pair=True)
    assert lip == pytest.approx(1.0, abs=1e-9)
    i, j = pair
    assert abs(f[i] - f[j]) / static_sphere.distances(0.0)[i, j] == pytest.approx(lip)


def test_lipschitz_glued_points():
    d = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], float)
    S = SampledSpace(1, [0.0, 1.0], distances=np.stack([d, d]), weights=np.full((2, 3), 1 / 3), pseudo_metric=True)
    assert math.isinf(lipschitz_constant(S, 0.0, np.array([0.0, 1.0, 0.0])))
    assert lipschitz_constant(S, 0.0, np.array([1.0, 1.0, 0.0])) == pytest.approx(1.0)
    rep = check_wsrf(S, np.array([0.0, 1.0, 0.0]), [0.0, 1.0])
    assert rep.verdict == INCONCLUSIVE and rep.reason


def test_wsrf_static_sphere(static_sphere):
    rng = np.random.default_rng(0)
    f0 = static_sphere.points @ rng.standard_normal(3) + static_sphere.points[:, 0] * static_sphere.points[:, 1]
    rep = check_wsrf(static_sphere, f0, np.linspace(0.0, 0.2, 5), ChernoffSchedule(8, 8))
    assert rep.verdict == PASS
    assert np.all(np.diff(rep.details["lipschitz"]) <= rep.tolerances["slack_lip"])


def test_wsrf_static_torus():
    T = sample(make_flat_torus(2, 1.0, time_interval=(0.0, 0.2)), 400, seed=0, strategy="quasi-uniform")
    p = T.points
    f0 = np.cos(2 * np.pi * p[:, 0]) + 0.5 * np.sin(2 * np.pi * (p[:, 0] + p[:, 1]))
    assert check_wsrf(T, f0, np.linspace(0.0, 0.2, 5), ChernoffSchedule(8, 8)).verdict == PASS


def test_wsrf_expanding_counterexample():
    E = expanding_torus()
    f0 = np.cos(2 * np.pi * E.points[:, 0] / 10.0)
    rep = check_wsrf(E, f0, np.linspace(0.0, 0.3, 5), ChernoffSchedule(8, 8))
    assert rep.verdict == FAIL
    assert rep.witnesses[0]["step"] == 1
    assert rep.witnesses[0]["lipschitz"] > rep.witnesses[0]["previous"]


def test_wsrf_orientation(static_sphere):
    with pytest.raises(ValueError):
        check_wsrf(static_sphere.reversed(), np.zeros(400), [0.0, 0.1])


# -- coupled contraction -------------------------------------------------------------


def test_contraction_identical_inits():
    C = sample(make_flat_torus(1, 1.0, orientation="backward", time_interval=(0.0, 0.1)), 64, seed=0,
               strategy="quasi-uniform")
    rep = check_coupled_contraction(C, Delta(3), Delta(3), CostSpec.distance(), np.linspace(0, 0.1, 3),
                                    ChernoffSchedule(2, 4, "beta"))
    assert rep.verdict == PASS
    np.testing.assert_allclose(rep.details["costs"], 0.0, atol=1e-14)


@pytest.mark.parametrize("cost", [CostSpec.distance(), CostSpec.distance_squared()])
def test_contraction_static_circle(cost):
    C = sample(make_flat_torus(1, 1.0, orientation="backward", time_interval=(0.0, 0.2)), 128, seed=0,
               strategy="quasi-uniform")
    rep = check_coupled_contraction(C, Delta(0), Delta(42), cost, np.linspace(0.0, 0.2, 5),
                                    ChernoffSchedule(8, 8, "beta"), slack=1e-6)
    assert rep.verdict == PASS
    assert rep.details["costs"][-1] < rep.details["costs"][0]


def test_contraction_counterexample_fails():
    E = expanding_torus().reversed()
    rep = check_coupled_contraction(E, Delta(0), Delta(133), CostSpec.distance_squared(),
                                    np.linspace(*E.time_interval, 5), ChernoffSchedule(8, 8, "beta"), slack=1e-6)
    assert rep.verdict == FAIL and rep.witnesses[0]["increase"] > 0


# -- trace ---------------------------------------------------------------------------


def test_trace_static_zero():
    S = make_round_sphere(2, 1.0, orientation="backward")
    for domain in ("ball", "sphere"):
        assert trace_functional(S, 0.0, NORTH, 0.2, domain) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("domain,target", [("ball", 1.0), ("sphere", 2.0)])
def test_trace_shrinking_sphere_analytic(domain, target):
    S = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.5))
    vals = [trace_functional(S, 0.0, None, e, domain) for e in (0.2, 0.1, 0.05)]
    assert vals[-1] == pytest.approx(target, rel=1e-2)


@pytest.mark.parametrize("side", ["lower", "upper", "exact"])
def test_trace_shrinking_sphere_sampled(side, shrinking2000):
    for domain, target in (("ball", 1.0), ("sphere", 2.0)):
        v = np.mean([trace_functional(shrinking2000, 0.1, x, 0.3, domain, side) for x in (0, 700, 1400)])
        assert v == pytest.approx(target / (1 + 0.2), rel=0.05)  # R(0.1)^2 = 1.2


def test_trace_super_flow_inequality():
    # d_tau g = c g with c <= 0 on the flat torus: a super flow (2 Ric = 0), trace limit c n/(n+2) <= 0
    law = CustomScale(lambda t: math.exp(-t), lambda t: -math.exp(-t), label="exp(-t)")
    T = make_flat_torus(2, 1.0, law, time_interval=(0.0, 0.5), orientation="backward")
    for eps in (0.1, 0.05):
        assert trace_functional(T, 0.2, None, eps, "ball") <= 0.0
    S = make_round_sphere(2, 1.0, orientation="backward")
    assert trace_functional(S, 0.0, None, 0.05, "ball") <= 2 * 2 / 4


# -- saturation ----------------------------------------------------------------------


def test_saturation_constants():
    assert saturation_constants(2, "ball") == 12.0
    assert saturation_constants(2, "sphere") == 12.0
    assert saturation_constants(2, "ball", "paper-literal", "theorem") == 12.0
    assert saturation_constants(2, "ball", "paper-literal", "epilogue") == pytest.approx(24.0)
    assert saturation_constants(2, "sphere", "paper-literal") == pytest.approx(6.0)


def test_saturation_config_validation():
    with pytest.raises(ValueError):
        SaturationConfig(epsilon_ladder=(0.1, 0.2, 0.3, 0.4))
    with pytest.raises(ValueError):
        SaturationConfig(epsilon_ladder=(0.3, 0.2, 0.1))
    with pytest.raises(ValueError):
        SaturationConfig(core=())
    with pytest.raises(ValueError):
        SaturationConfig(variant="cube")


@pytest.mark.parametrize("variant,expected", [("ball", -1.0), ("sphere", -2.0)])
def test_saturation_analytic_classification(variant, expected):
    cfg = SaturationConfig(variant=variant)
    shrink = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.5))
    static = make_round_sphere(2, 1.0, orientation="backward")
    torus = make_flat_torus(2, 1.0, orientation="backward")
    assert saturation_defect(shrink, 0.0, None, cfg).c0 == pytest.approx(0.0, abs=0.02)
    assert saturation_defect(static, 0.0, None, cfg).c0 == pytest.approx(expected, abs=0.05)
    assert saturation_defect(torus, 0.0, None, cfg).c0 == pytest.approx(0.0, abs=0.02)


def test_saturation_literal_constants_do_not_cancel():
    # the alternative constants leave a nonzero bracket on an exact Ricci flow
    shrink = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.5))
    ball = saturation_defect(shrink, 0.0, None, SaturationConfig("ball", "paper-literal", "epilogue")).c0
    sph = saturation_defect(shrink, 0.0, None, SaturationConfig("sphere", "paper-literal")).c0
    assert ball == pytest.approx(-1.0, abs=0.02)
    assert sph == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("side", ["lower", "exact"])
def test_saturation_sampled(side, shrinking2000):
    cfg = SaturationConfig(derivative_side=side)
    for x in (0, 999):
        assert saturation_defect(shrinking2000, 0.0, x, cfg).c0 == pytest.approx(0.0, abs=0.05)
    static = sample(make_round_sphere(2, 1.0, orientation="backward"), 2000, seed=0, strategy="quasi-uniform")
    assert saturation_defect(static, 0.0, 5, cfg).c0 == pytest.approx(-1.0, abs=0.05)


def test_saturation_side_defaults():
    assert SaturationConfig().side_for(make_round_sphere(2, 1.0)) == "exact"
    d = np.zeros((2, 2))
    d[0, 1] = d[1, 0] = 1.0
    raw = SampledSpace(1, [0.0, 1.0], distances=np.stack([d, d]), weights=np.ones((2, 2)), orientation="backward")
    assert SaturationConfig().side_for(raw) == "lower"


# -- weak Ricci flow -----------------------------------------------------------------


def _wsrf_inputs(space, field):
    fwd = space if space.orientation == "forward" else space.reversed()
    return {"f0": field(fwd.points), "time_grid": np.linspace(*fwd.time_interval, 3),
            "schedule": ChernoffSchedule(4, 4)}


def test_weak_ricci_flow_classification():
    shrink = sample(make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.2)), 400, seed=0,
                    strategy="quasi-uniform")
    static = sample(make_round_sphere(2, 1.0, orientation="backward", time_interval=(0.0, 0.2)), 400, seed=0,
                    strategy="quasi-uniform")
    torus = sample(make_flat_torus(2, 1.0, orientation="backward", time_interval=(0.0, 0.2)), 400, seed=0,
                   strategy="quasi-uniform")
    sph = lambda p: p[:, 2] + p[:, 0] * p[:, 1]  # noqa: E731
    tor = lambda p: np.cos(2 * np.pi * p[:, 0]) + 0.5 * np.sin(2 * np.pi * p[:, 1])  # noqa: E731
    rep = check_weak_ricci_flow(shrink, _wsrf_inputs(shrink, sph))
    assert rep.verdict == PASS
    assert max(abs(d["defect"]) for d in rep.details["defects"]) < 0.05
    rep = check_weak_ricci_flow(static, _wsrf_inputs(static, sph))
    assert rep.details["subchecks"] == {"wsrf": PASS, "saturation": FAIL}
    assert rep.verdict == FAIL and rep.witnesses
    assert rep.witnesses[0]["defect"] == pytest.approx(-1.0, abs=0.05)
    assert check_weak_ricci_flow(torus, _wsrf_inputs(torus, tor)).verdict == PASS


def test_weak_ricci_flow_core_validation():
    S = sample(make_round_sphere(2, 1.0, orientation="backward"), 50, seed=0)
    with pytest.raises(ValueError):
        check_weak_ricci_flow(S, None, SaturationConfig(core=(0, 1, 2)))
    rep = check_weak_ricci_flow(S, None, SaturationConfig(core=(0, 1, 2), validate_core=False,
                                                          epsilon_ladder=(0.8, 0.7, 0.6, 0.5)))
    assert [d["point"] for d in rep.details["defects"]] == [0, 1, 2]


def test_verdicts_deterministic():
    S = sample(make_round_sphere(2, 1.0, orientation="backward", time_interval=(0.0, 0.2)), 200, seed=3)
    cfg = SaturationConfig(core=(0, 50), validate_core=False)
    runs = [json.dumps(check_weak_ricci_flow(S, _wsrf_inputs(S, lambda p: p[:, 2]), cfg).to_json(), sort_keys=True)
            for _ in range(2)]
    assert runs[0] == runs[1]
