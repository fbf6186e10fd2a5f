import json

import numpy as np
import pytest

from shedverify.conic import solve_conic
from shedverify.nn import MLPModel, ModelFormatError, TrainConfig, init_model, train_for_case
from shedverify.ops import generate_training_set
from shedverify.redispatch import solve_ac_redispatch, solve_soc_redispatch
from shedverify.scenario import ScenarioInput, gamma_box
from shedverify.verifier import (VerificationError, VerifierConfig, build_verification,
                                 run_pipeline, solve_verification, verify, weak_duality_margin)


def const_net(case, width=3, out_bias=0.0):
    """Zero weights: the output is sigmoid(out_bias) on every line."""
    n_in = 2 * case.n_load + case.n_line + 1
    dims = [n_in, width, width, case.n_line]
    ws = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(width), np.zeros(width), np.full(case.n_line, out_bias)]
    return MLPModel(ws, bs, gamma_box(case), {"layout_hash": case.layout_hash()})


def random_net(case, seed, width=4):
    n_in = 2 * case.n_load + case.n_line + 1
    m = init_model([n_in, width, width, case.n_line], seed=seed, norm=gamma_box(case),
                   meta={"layout_hash": case.layout_hash()})
    rng = np.random.default_rng(seed)
    m.weights = [3 * w for w in m.weights]
    m.biases = [rng.normal(size=b.shape) for b in m.biases]
    return m


def test_variable_counts_two_bus(case2):
    nn = const_net(case2, width=4)
    vp = build_verification(case2, nn)
    c = vp.variable_counts()
    p = vp.dual.primal
    assert (c["lambda"], c["mu"], c["s"]) == (p.n_eq, p.n_ineq, p.n)
    # the simplified 2-bus canonical form: 13 equality rows, 22 inequality rows, 19 columns
    assert (c["lambda"], c["mu"], c["s"]) == (13, 22, 19)
    assert (c["gamma"], c["L"]) == (4, 1)
    assert c["aux"] == (4 + 4 + 1) + (4 + 4)
    assert c["total"] == 13 + 22 + 19 + 4 + 1 + 17


def test_simplifications_remove_dual_variables(case2, case14):
    for case in (case2, case14):
        nn = const_net(case)
        on = build_verification(case, nn).variable_counts()
        off = build_verification(case, nn, VerifierConfig(
            drop_angle_limits=False, thermal_without_status=False,
            simple_shunt=False)).variable_counts()
        assert on["total"] < off["total"]


def test_gamma_box_is_the_scenario_box(case14):
    vp = build_verification(case14, const_net(case14))
    p, q = case14.p_base, case14.q_base
    np.testing.assert_allclose(vp.lo[:case14.n_load], 0.75 * p)
    np.testing.assert_allclose(vp.hi[:case14.n_load], 1.25 * p)
    nd = case14.n_load
    np.testing.assert_allclose(np.sort([vp.lo[nd:2 * nd], vp.hi[nd:2 * nd]], axis=0),
                               np.sort([0.75 * q, 1.25 * q], axis=0))
    np.testing.assert_allclose(vp.lo[2 * nd:], 0.25)
    np.testing.assert_allclose(vp.hi[2 * nd:], 0.75)


def test_layout_mismatch(case2, case3):
    with pytest.raises(ModelFormatError):
        build_verification(case3, const_net(case2))


def test_constant_net_pushes_load_to_upper_bound(case2):
    nn = const_net(case2)
    vp = build_verification(case2, nn)
    st = solve_verification(vp)
    assert st.status == "optimal"
    assert st.gamma[0] == pytest.approx(1.25 * 0.5, abs=1e-9)
    # 1-d sweep oracle with L fixed at 0.5: the relaxed shed rises with the load
    base = st.gamma.copy()
    vals = []
    for p in np.linspace(0.375, 0.625, 11):
        g = base.copy()
        g[0] = p
        sol = solve_conic(vp.dual.primal, g, np.array([0.5]))
        vals.append(sol.objective)
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
    assert st.dual_objective == pytest.approx(max(vals), abs=1e-6)


def test_dual_point_and_weak_duality(case2, case3):
    for case, nn in ((case2, const_net(case2)), (case3, random_net(case3, 4))):
        vp = build_verification(case, nn)
        st = solve_verification(vp)
        assert weak_duality_margin(vp, st) >= -5e-3
        assert max(st.residuals.values()) <= 5e-3
        lo, hi = gamma_box(case)
        assert np.all(st.gamma >= lo - 1e-9) and np.all(st.gamma <= hi + 1e-9)
        assert np.max(np.abs(st.L - nn.forward(st.gamma))) <= 5e-3


def test_restart_determinism(case3):
    nn = random_net(case3, 7)
    cfg = VerifierConfig(restarts=3, seed=11)
    a = solve_verification(build_verification(case3, nn, cfg))
    b = solve_verification(build_verification(case3, nn, cfg))
    np.testing.assert_array_equal(a.gamma, b.gamma)
    assert a.dual_objective == b.dual_objective and a.restart == b.restart


def test_pipeline_constant_net_two_bus(case2):
    res = verify(case2, const_net(case2))
    assert list(res.z) == [1.0]
    sc = res.gamma
    full2 = solve_soc_redispatch(case2, sc, [1.0]).shed
    full3 = solve_ac_redispatch(case2, sc, [1.0]).shed
    assert res.shed["II"] == pytest.approx(full2, abs=1e-9)
    assert res.shed["III"] == pytest.approx(full3, abs=1e-9)
    assert res.shed["II"] <= res.shed["III"] + 1e-6
    assert res.dual_objective <= res.shed["I"] + 5e-3


def test_pipeline_all_off_net(case3):
    res = verify(case3, const_net(case3, out_bias=-20.0))
    assert np.all(res.z == 0)
    assert res.shed["III"] == pytest.approx(res.gamma.p_d.sum(), abs=1e-9)


def test_ordering_over_random_nets(case3):
    n_checked = 0
    for seed in range(50):
        nn = random_net(case3, seed)
        try:
            res = verify(case3, nn, VerifierConfig(restarts=1, seed=seed))
        except VerificationError:
            continue
        if res.status["II"] == "optimal" and res.status["III"] == "optimal":
            assert res.shed["II"] <= res.shed["III"] + 1e-6
            n_checked += 1
        assert res.dual_objective <= res.shed["I"] + 5e-3
        # snapping consumes a fresh forward pass at gamma*
        np.testing.assert_allclose(res.L, nn.forward(res.gamma.vector()), rtol=0, atol=1e-8)
    assert n_checked >= 45


def test_alpha_one_net_finds_near_total_shed(case3):
    recs, _ = generate_training_set(case3, 12, alpha_range=(1.0, 1.0), seed=0)
    nn = train_for_case(recs, case3, TrainConfig(hidden=6, epochs=200))
    res = verify(case3, nn)
    assert np.all(res.z == 0)
    total = res.gamma.p_d.sum()
    assert total == pytest.approx(1.25 * case3.p_tot)
    assert res.shed["III"] == pytest.approx(total, abs=1e-6)
    # Model I keeps the small fractional L, so it sheds less than the snapped models
    assert res.dual_objective <= res.shed["I"] + 5e-3 <= total + 5e-3


def test_result_json_shape(case2):
    res = verify(case2, const_net(case2))
    doc = json.loads(res.dumps())
    assert set(doc) >= {"gamma", "L", "z", "dual_obj", "shed", "status", "time_s"}
    assert set(doc["shed"]) == {"I", "II", "III"}
    assert res.dumps(times=False) == verify(case2, const_net(case2)).dumps(times=False)


def test_failure_carries_best_point(case2):
    # an unreachable tolerance makes every restart fail the stage check
    vp = build_verification(case2, const_net(case2), VerifierConfig(stage_tol=1e-30, restarts=2))
    with pytest.raises(VerificationError) as info:
        solve_verification(vp)
    assert info.value.stage == "stage_a" and info.value.best is not None


def test_run_pipeline_records_failures(case2):
    vp = build_verification(case2, const_net(case2))
    st = solve_verification(vp)
    res = run_pipeline(case2, const_net(case2), st)
    assert set(res.status) == {"stage_a", "I", "II", "III"}
    assert isinstance(res.gamma, ScenarioInput)
