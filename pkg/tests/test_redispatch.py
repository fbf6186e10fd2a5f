import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shedverify.bench import sample_gamma
from shedverify.ops import solve_soc_ops_global
from shedverify.redispatch import (ac_flows, dead_buses, deenergize_dead_islands,
                                   solve_ac_redispatch, solve_soc_redispatch, shed_gap)
from shedverify.scenario import ScenarioInput


def complex_flows(case, V, theta):
    """Branch flows from the pi-model with complex tap, S = V conj(I)."""
    out = np.zeros((case.n_line, 4))
    U = V * np.exp(1j * theta)
    for k, ln in enumerate(case.lines):
        i, j = case.line_ends(k)
        t = ln.tap_re + 1j * ln.tap_im
        y = ln.g + 1j * ln.b
        i_fr = (y + ln.g_fr + 1j * ln.b_fr) / abs(t) ** 2 * U[i] - y / np.conj(t) * U[j]
        i_to = (y + ln.g_to + 1j * ln.b_to) * U[j] - y / t * U[i]
        s_fr, s_to = U[i] * np.conj(i_fr), U[j] * np.conj(i_to)
        out[k] = s_fr.real, s_fr.imag, s_to.real, s_to.imag
    return out


def test_ac_flows_match_complex_power(case14):
    rng = np.random.default_rng(0)
    for _ in range(20):
        V = rng.uniform(0.9, 1.1, case14.n_bus)
        th = rng.uniform(-0.5, 0.5, case14.n_bus)
        np.testing.assert_allclose(ac_flows(case14, V, th), complex_flows(case14, V, th),
                                   atol=1e-12)


def test_soc_two_bus_extremes(case2):
    sc = ScenarioInput.nominal(case2)
    assert solve_soc_redispatch(case2, sc, [1.0]).shed == pytest.approx(0.0, abs=1e-7)
    r = solve_soc_redispatch(case2, sc, [0.0])
    assert r.shed == pytest.approx(0.5, abs=1e-7)


def test_soc_two_bus_monotone_sweep(case2):
    sc = ScenarioInput.nominal(case2)
    sheds = [solve_soc_redispatch(case2, sc, [z], tag="I").shed for z in np.linspace(0, 1, 11)]
    assert sheds[0] == pytest.approx(0.5, abs=1e-7) and sheds[-1] == pytest.approx(0, abs=1e-7)
    assert all(b <= a + 1e-7 for a, b in zip(sheds, sheds[1:]))
    assert 0.0 < sheds[5] < 0.5


def test_ac_two_bus(case2):
    sc = ScenarioInput.nominal(case2)
    r = solve_ac_redispatch(case2, sc, [1.0])
    assert r.status == "optimal" and r.model_tag == "III"
    assert r.shed == pytest.approx(0.0, abs=1e-6)
    assert np.all((r.v_mag >= 0.95 - 1e-9) & (r.v_mag <= 1.05 + 1e-9))
    r0 = solve_ac_redispatch(case2, sc, [0.0])
    assert r0.shed == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(r0.x_d, 0.0, atol=1e-9)


def test_shed_gap_two_bus(case2):
    sc = ScenarioInput.nominal(case2)
    for z, hi in (([1.0], 1e-3), ([0.0], 0.0)):
        g = shed_gap(solve_soc_redispatch(case2, sc, z), solve_ac_redispatch(case2, sc, z))
        assert -1e-6 <= g <= hi + 1e-9
    with pytest.raises(ValueError):
        shed_gap(solve_soc_redispatch(case2, sc, [1.0]), solve_ac_redispatch(case2, sc, [0.0]))


def _island_oracle(case, sc):
    """All lines open: each load is served only if its own bus has a generator
    with spare active capacity; the per-bus mini-problem is just capacity."""
    shed = 0.0
    for b in range(case.n_bus):
        loads = case.bus_loads[b]
        p = sum(sc.p_d[k] for k in loads)
        cap = sum(case.generators[g].p_max for g in case.bus_gens[b])
        shed += max(0.0, p - cap)
    return shed


def test_all_lines_off_fourteen_bus(case14):
    rng = np.random.default_rng(5)
    z = np.zeros(case14.n_line)
    for _ in range(3):
        sc = sample_gamma(case14, rng)
        r3 = solve_ac_redispatch(case14, sc, z)
        r2 = solve_soc_redispatch(case14, sc, z)
        ref = _island_oracle(case14, sc)
        assert r3.status == "optimal" and r2.status == "optimal"
        assert r3.shed == pytest.approx(ref, abs=1e-6)
        assert r2.shed == pytest.approx(ref, abs=1e-6)


def test_zero_load_means_zero_shed(case14):
    rng = np.random.default_rng(1)
    sc0 = sample_gamma(case14, rng)
    sc = ScenarioInput(np.zeros(case14.n_load), np.zeros(case14.n_load), sc0.r, sc0.alpha)
    for z in (np.ones(case14.n_line), (rng.random(case14.n_line) < 0.5).astype(float)):
        assert solve_soc_redispatch(case14, sc, z).shed == pytest.approx(0.0, abs=1e-7)
        r = solve_ac_redispatch(case14, sc, z)
        assert r.ok and r.shed == pytest.approx(0.0, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.6))
def test_relaxation_bound_and_angle_decoupling(case14, seed, p_off):
    rng = np.random.default_rng(seed)
    sc = sample_gamma(case14, rng)
    z = (rng.random(case14.n_line) >= p_off).astype(float)
    r2 = solve_soc_redispatch(case14, sc, z)
    r3 = solve_ac_redispatch(case14, sc, z)
    if not (r2.ok and r3.ok):
        return
    assert r2.shed <= r3.shed + 1e-6
    assert np.all((r3.x_d >= 0) & (r3.x_d <= 1)) and np.all((r2.x_d >= 0) & (r2.x_d <= 1))
    assert 0 <= r3.shed <= sc.p_d.sum() + 1e-6
    for k in np.flatnonzero(r3.z == 0):
        i, j = case14.line_ends(k)
        dth = abs(r3.theta[i] - r3.theta[j])
        slack = case14.lines[k].theta_max + case14.theta_delta_max - dth
        assert slack >= -1e-6


def test_gap_at_ops_optimal_statuses(case14):
    rng = np.random.default_rng(8)
    sc = sample_gamma(case14, rng)
    z = solve_soc_ops_global(case14, sc).z
    g = shed_gap(solve_soc_redispatch(case14, sc, z), solve_ac_redispatch(case14, sc, z))
    assert g >= -1e-6


def test_dead_islands(case14):
    z = np.ones(case14.n_line)
    assert not dead_buses(case14, z).any()
    z0 = np.zeros(case14.n_line)
    dead = dead_buses(case14, z0)
    # only buses 1 and 2 host generators with active capacity
    assert [case14.buses[i].id for i in np.flatnonzero(~dead)] == [1, 2]
    np.testing.assert_array_equal(deenergize_dead_islands(case14, z0), z0)


def test_input_validation(case2):
    sc = ScenarioInput.nominal(case2)
    with pytest.raises(ValueError):
        solve_soc_redispatch(case2, sc, [0.5], tag="II")
    with pytest.raises(ValueError):
        solve_ac_redispatch(case2, sc, [0.5])
    with pytest.raises(ValueError):
        solve_soc_redispatch(case2, sc, [1.0, 1.0], tag="I")
    with pytest.raises(ValueError):
        solve_soc_redispatch(case2, sc, [1.0], tag="III")


def test_result_json(case2):
    r = solve_ac_redispatch(case2, ScenarioInput.nominal(case2), [0.0])
    doc = r.to_json()
    assert doc["model_tag"] == "III" and doc["shed"] == pytest.approx(0.5)
    assert doc["x_d"] == [0.0]
