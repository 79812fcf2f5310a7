import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from weakflow.errors import UnsupportedBackendError, VirtuallyPscWarning
from weakflow.propagators import (
    ChernoffSchedule,
    delta_density,
    duality_gap,
    dynamic_conjugate,
    dynamic_heat,
    heat_kernel,
    refinement_study,
    static_conjugate,
    static_heat,
)
from weakflow.spaces import CustomScale, RicciBackward, make_flat_torus, make_round_sphere, sample

pytestmark = pytest.mark.filterwarnings("ignore::weakflow.errors.VirtuallyPscWarning")


@pytest.fixture(scope="module")
def circle():
    return sample(make_flat_torus(1, 1.0, time_interval=(0.0, 0.1)), 256, seed=0, strategy="quasi-uniform")


@pytest.fixture(scope="module")
def shrinking():
    flow = make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.1))
    return sample(flow, 300, seed=0, strategy="quasi-uniform")


def cosx(space):
    return np.cos(2 * np.pi * space.points[:, 0])


def theta_series(x, t, terms=20):
    k = np.arange(-terms, terms + 1)
    return np.sum(np.exp(-((x[:, None] - k[None]) ** 2) / (4 * t)), axis=1) / math.sqrt(4 * math.pi * t)


# -- schedule -------------------------------------------------------------------


def test_schedule_radii():
    s = ChernoffSchedule(1, 10, "nu")
    assert s.radius(2, 0.1, 10) == pytest.approx(math.sqrt(2 * 4 * 0.1 / 10))
    assert s.with_kernel("sigma").radius(2, 0.1, 10) == pytest.approx(math.sqrt(2 * 2 * 0.1 / 10))
    assert s.with_kernel("beta").radius(2, 0.1, 10) == pytest.approx(math.sqrt(8 * 4 * 0.1 / 10))
    assert s.with_kernel("alpha").radius(2, 0.1, 10) == pytest.approx(math.sqrt(8 * 2 * 0.1 / 10))
    assert s.refined() == ChernoffSchedule(2, 20, "nu")
    with pytest.raises(ValueError):
        ChernoffSchedule(0, 1)
    with pytest.raises(ValueError):
        ChernoffSchedule(1, 1, "eta")


# -- static heat ------------------------------------------------------------------


def test_static_heat_zero_time(circle):
    f = cosx(circle)
    res = static_heat(circle, 0.0, 0.3, 0.3, ChernoffSchedule(1, 5), f)
    np.testing.assert_array_equal(res.values, f)
    assert res.stage_log == []


def test_static_heat_circle_fourier(circle):
    f = cosx(circle)
    res = static_heat(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 400), f)
    exact = math.exp(-4 * math.pi**2 * 0.02) * f
    assert np.max(np.abs(res.values - exact)) <= 1e-2
    assert len(res.stage_log) == 400


@pytest.mark.parametrize("kernel", ["nu", "sigma"])
def test_static_heat_fixes_constants(kernel, shrinking):
    res = static_heat(shrinking, 0.05, 0.0, 0.1, ChernoffSchedule(1, 20, kernel), np.ones(300))
    np.testing.assert_allclose(res.values, 1.0, atol=1e-12)


def test_kernel_modes_agree(circle):
    f = cosx(circle)
    a = static_heat(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 400, "nu"), f).values
    b = static_heat(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 400, "sigma"), f).values
    assert np.max(np.abs(a - b)) <= 2e-2


def test_static_heat_rejects_conjugate_kernel(circle):
    with pytest.raises(ValueError):
        static_heat(circle, 0.0, 0.0, 0.01, ChernoffSchedule(1, 5, "beta"), cosx(circle))


def test_propagators_need_sampled_space():
    with pytest.raises(UnsupportedBackendError):
        static_heat(make_flat_torus(1, 1.0), 0.0, 0.0, 0.1, ChernoffSchedule(), lambda p: p[..., 0])


# -- dynamic heat -----------------------------------------------------------------


def test_dynamic_heat_static_flow_equals_static(circle):
    f = cosx(circle)
    dyn = dynamic_heat(circle, 0.0, 0.02, ChernoffSchedule(4, 25), f).values
    # a static flow freezes the same slice at every stage: 4 x 25 steps of one radius
    sta = static_heat(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 100), f).values
    np.testing.assert_allclose(dyn, sta, atol=1e-12)


def test_dynamic_heat_shrinking_sphere_constants(shrinking):
    fwd = shrinking.reversed()
    res = dynamic_heat(fwd, 0.0, 0.1, ChernoffSchedule(8, 8), np.ones(300))
    np.testing.assert_allclose(res.values, 1.0, atol=1e-12)


def test_dynamic_heat_needs_forward(shrinking):
    with pytest.raises(ValueError):
        dynamic_heat(shrinking, 0.0, 0.1, ChernoffSchedule(), np.ones(300))


def test_dynamic_heat_scaled_circle():
    # d_t = phi(t) d_0, so Laplacian_t = phi^-2 Laplacian_0 and cos decays by exp(-4 pi^2 int phi^-2)
    phi = CustomScale(lambda t: 1.0 + 5.0 * t, lambda t: 5.0, label="1+5t")
    C = sample(make_flat_torus(1, 1.0, phi, time_interval=(0.0, 0.05)), 256, seed=0, strategy="quasi-uniform")
    f = cosx(C)
    res = dynamic_heat(C, 0.0, 0.05, ChernoffSchedule(64, 64), f)
    rescaled, _ = integrate.quad(lambda t: (1.0 + 5.0 * t) ** -2, 0.0, 0.05)
    exact = math.exp(-4 * math.pi**2 * rescaled) * f
    assert np.max(np.abs(res.values - exact)) <= 2e-2


def test_dynamic_heat_single_limit(circle):
    f = cosx(circle)
    res = dynamic_heat(circle, 0.0, 0.02, ChernoffSchedule(400, 1, mode="single"), f)
    assert len(res.stage_log) == 400
    assert np.max(np.abs(res.values - math.exp(-4 * math.pi**2 * 0.02) * f)) <= 1e-2


def test_sup_norm_contraction_and_positivity(shrinking):
    fwd = shrinking.reversed()
    rng = np.random.default_rng(0)
    f = rng.uniform(0, 1, 300)
    res = dynamic_heat(fwd, 0.0, 0.1, ChernoffSchedule(4, 4), f)
    sups = [entry["sup"] for entry in res.stage_log]
    assert max(sups) <= np.max(np.abs(f)) + 1e-12
    assert np.all(np.diff(sups) <= 1e-12)
    assert res.values.min() >= 0


def test_evolution_system_law(circle):
    f = cosx(circle)
    sched = ChernoffSchedule(32, 8)
    whole = dynamic_heat(circle, 0.0, 0.04, sched, f).values
    half = dynamic_heat(circle, 0.0, 0.02, ChernoffSchedule(16, 8), f).values
    comp = dynamic_heat(circle, 0.02, 0.04, ChernoffSchedule(16, 8), half).values
    assert np.max(np.abs(whole - comp)) <= 5e-3


# -- conjugate ----------------------------------------------------------------------


def test_static_conjugate_zero_time(shrinking):
    f = np.random.default_rng(0).standard_normal(300)
    np.testing.assert_array_equal(static_conjugate(shrinking, 0.0, 0.1, 0.1, ChernoffSchedule(1, 3, "beta"), f)
                                  .values, f)


def test_static_conjugate_equals_heat_on_flat(circle):
    f = cosx(circle)
    heat = static_heat(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 400, "nu"), f).values
    conj = static_conjugate(circle, 0.0, 0.0, 0.02, ChernoffSchedule(1, 400, "beta"), f).values
    assert np.max(np.abs(heat - conj)) <= 1e-3


def test_static_conjugate_sphere_constant():
    S = sample(make_round_sphere(2, 1.0), 400, seed=0, strategy="quasi-uniform")
    res = static_conjugate(S, 0.0, 0.0, 0.05, ChernoffSchedule(1, 400, "beta"), np.ones(400))
    np.testing.assert_allclose(res.values, math.exp(-0.1), atol=1e-2)


def test_static_conjugate_warns_without_psc():
    T = sample(make_flat_torus(1, 1.0), 32, seed=0).with_options(virtually_psc=False)
    with pytest.warns(VirtuallyPscWarning):
        static_conjugate(T, 0.0, 0.0, 0.01, ChernoffSchedule(1, 2, "beta"), np.ones(32))


def test_dynamic_conjugate_flat_reduction():
    T = sample(make_flat_torus(1, 1.0, orientation="backward", time_interval=(0.0, 0.1)), 128, seed=0,
               strategy="quasi-uniform")
    f = cosx(T)
    dyn = dynamic_conjugate(T, 0.0, 0.02, ChernoffSchedule(4, 25, "beta"), f).values
    sta = static_conjugate(T, 0.0, 0.0, 0.02, ChernoffSchedule(1, 100, "beta"), f).values
    np.testing.assert_allclose(dyn, sta, atol=1e-12)


def test_dynamic_conjugate_shrinking_sphere(shrinking):
    res = dynamic_conjugate(shrinking, 0.0, 0.1, ChernoffSchedule(64, 64, "beta"), np.ones(300))
    np.testing.assert_allclose(res.values, 1 / 1.2, atol=2e-2)


def test_dynamic_conjugate_mass_and_positivity(shrinking):
    u = delta_density(shrinking, 0.0, 7)
    grid = np.linspace(0.0, 0.1, 6)
    masses = [u @ shrinking.weights(0.0)]
    for a, b in zip(grid[:-1], grid[1:]):
        u = dynamic_conjugate(shrinking, a, b, ChernoffSchedule(4, 8, "beta"), u).values
        assert u.min() >= 0
        masses.append(u @ shrinking.weights(b))
    np.testing.assert_allclose(masses, masses[0], rtol=1e-2)


def test_conjugate_contraction_nonnegative_scal(shrinking):
    f = np.random.default_rng(1).uniform(-1, 1, 300)
    res = dynamic_conjugate(shrinking, 0.0, 0.1, ChernoffSchedule(8, 8, "beta"), f)
    assert np.max(np.abs(res.values)) <= np.max(np.abs(f)) + 1e-12


def test_dynamic_conjugate_needs_backward(circle):
    with pytest.raises(ValueError):
        dynamic_conjugate(circle, 0.0, 0.01, ChernoffSchedule(1, 1, "beta"), np.ones(256))


# -- kernel and duality ---------------------------------------------------------------


def test_heat_kernel_zero_time(circle):
    k = heat_kernel(circle, 0.02, 0.02, 10, ChernoffSchedule(4, 4))
    np.testing.assert_array_equal(k.values, delta_density(circle, 0.02, 10))


def test_heat_kernel_theta_series(circle):
    y = 0
    k = heat_kernel(circle, 0.0, 0.05, y, ChernoffSchedule(16, 16)).values
    x = circle.points[:, 0] - circle.points[y, 0]
    exact = theta_series(x, 0.05)
    assert np.max(np.abs(k - exact)) <= 2e-2
    assert k.min() >= 0
    assert k @ circle.weights(0.05) == pytest.approx(1.0, abs=1e-6)


def test_heat_kernel_backward_space(shrinking):
    k = heat_kernel(shrinking, 0.1, 0.0, 3, ChernoffSchedule(4, 4))
    assert k.values.min() >= 0


def test_duality_zero_interval(shrinking):
    g = shrinking.points[:, 2]
    assert duality_gap(shrinking, 0.05, 0.05, g, 4, ChernoffSchedule(2, 2, "beta")) == pytest.approx(0.0, abs=1e-14)


def test_duality_flat_torus():
    T = sample(make_flat_torus(1, 1.0, orientation="backward", time_interval=(0.0, 0.05)), 64, seed=0,
               strategy="quasi-uniform")
    g = np.cos(2 * np.pi * T.points[:, 0]) + 0.5 * np.sin(2 * np.pi * T.points[:, 0])
    assert duality_gap(T, 0.0, 0.05, g, 0, ChernoffSchedule(32, 32, "beta")) <= 5e-3


def test_duality_shrinking_sphere_refines():
    S = sample(make_round_sphere(2, 1.0, RicciBackward(), time_interval=(0.0, 0.05)), 200, seed=0,
               strategy="quasi-uniform")
    g = S.points[:, 2] + S.points[:, 0] ** 2
    gaps = [duality_gap(S, 0.0, 0.05, g, 5, ChernoffSchedule(m, m, "beta")) for m in (8, 16)]
    assert gaps[0] <= 2e-2
    assert gaps[1] < gaps[0]


# -- refinement ------------------------------------------------------------------------


def test_refinement_study(circle, tmp_path):
    f = cosx(circle)
    study = refinement_study(lambda s: dynamic_heat(circle, 0.0, 0.02, s, f), ChernoffSchedule(2, 4),
                             tol=2e-3, max_doublings=4)
    assert study.converged
    assert [r["m"] for r in study.rows][:2] == [2, 4]
    exact = math.exp(-4 * math.pi**2 * 0.02) * f
    assert np.max(np.abs(study.estimate - exact)) < np.max(np.abs(study.final.values - exact))
    study.to_csv(tmp_path / "r.csv", timings=False)
    text = (tmp_path / "r.csv").read_bytes()
    assert text.startswith(b"m,j,sup_change\n") and b"\r" not in text
    study.to_csv(tmp_path / "rt.csv")
    assert (tmp_path / "rt.csv").read_text().splitlines()[0] == "m,j,sup_change,wall_time"


def test_result_json(circle):
    res = static_heat(circle, 0.0, 0.0, 0.01, ChernoffSchedule(1, 2), cosx(circle))
    data = res.to_json()
    assert len(data["values"]) == 256 and len(data["stage_log"]) == 2
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert set(data["stage_log"][0]) >= {"stage", "time", "radius", "sup"}
