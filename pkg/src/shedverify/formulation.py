"""Second-order-cone power-flow model shared by switching and redispatch.

Two flavours are built from the same constraint code:

* ``ops``: line statuses are (binary-marked) variables and the scenario is
  baked into the data; objective is the served-load / wildfire-risk
  tradeoff, negated for minimisation.
* ``redispatch``: line statuses enter as the parameter vector ``L`` and
  loads as the parameter vector ``gamma``; objective is total active load
  shed.  Because the canonical form needs the parameters on the right-hand
  side, active shed and reactive service are separate variables here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conic import NONNEG, RSOC, ConicProgram, ProgramBuilder
from .network import NetworkCase
from .scenario import ScenarioInput, gamma_dim, gamma_slices


@dataclass(frozen=True)
class SOCOptions:
    """Which constraint variants to include.

    The verifier's simplified model drops the angle limits, removes the status
    from the thermal cone and replaces the McCormick shunt block with
    ``0 <= W^S <= W_ii``.
    """

    angle_limits: bool = True
    thermal_status: bool = True
    shunt: str = "mccormick"  # or "simple"

    @classmethod
    def simplified(cls) -> "SOCOptions":
        return cls(angle_limits=False, thermal_status=False, shunt="simple")


@dataclass(frozen=True)
class SOCModel:
    program: ConicProgram
    index: dict  # symbol -> np.ndarray of columns
    mode: str
    options: SOCOptions

    def values(self, x: np.ndarray) -> dict:
        return {k: x[v] for k, v in self.index.items()}


def _flow_coefs(ln):
    """Coefficients of (W_self, WR, WI) in the four SOC line-flow expressions.

    The to-side uses -WI because WI is defined from the from-bus angle.
    """
    g, b = ln.g, ln.b
    tr, ti = ln.tap_re, ln.tap_im
    tm = tr * tr + ti * ti
    p_fr = ((g + ln.g_fr) / tm, (-g * tr + b * ti) / tm, (-b * tr - g * ti) / tm)
    q_fr = (-(b + ln.b_fr) / tm, -(-b * tr - g * ti) / tm, (-g * tr + b * ti) / tm)
    p_to = (g + ln.g_to, (-g * tr - b * ti) / tm, -(-b * tr + g * ti) / tm)
    q_to = (-(b + ln.b_to), -(-b * tr + g * ti) / tm, -(-g * tr - b * ti) / tm)
    return p_fr, q_fr, p_to, q_to


def build_soc(case: NetworkCase, mode: str, scenario: ScenarioInput | None = None,
              options: SOCOptions = SOCOptions(), relax_binaries: bool = False) -> SOCModel:
    if mode not in ("ops", "redispatch"):
        raise ValueError(f"unknown mode {mode!r}")
    ops = mode == "ops"
    if ops and scenario is None:
        raise ValueError("ops mode needs a scenario")
    nb, nl, nd = case.n_bus, case.n_line, case.n_load
    if ops and (len(scenario.p_d) != nd or len(scenario.r) != nl):
        raise ValueError("scenario dimensions do not match the case")
    B = ProgramBuilder(n_gamma=0 if ops else gamma_dim(case), n_L=0 if ops else nl)
    gs = gamma_slices(case)
    idx: dict[str, list[int]] = {}

    def reg(key, v):
        idx.setdefault(key, []).append(v)
        return v

    # statuses ------------------------------------------------------------
    zvar = []
    if ops:
        for k in range(nl):
            z = reg("z", B.var(f"z[{k}]", NONNEG))
            B.le({z: 1.0}, -1.0, name=f"z_ub[{k}]")
            B.le({z: -1.0}, 0.0, name=f"z_lb[{k}]")
            if not relax_binaries:
                B.mark_integer(z)
            zvar.append(z)

    def row(coefs: dict, const: float, line: int, zcoef: float):
        """Attach ``zcoef * z_line`` either as a variable term or an L term."""
        if zcoef == 0.0:
            return coefs, const, None
        if ops:
            coefs = dict(coefs)
            coefs[zvar[line]] = coefs.get(zvar[line], 0.0) + zcoef
            return coefs, const, None
        return coefs, const, {line: zcoef}

    def le(coefs, const, line=None, zcoef=0.0, gamma=None, name=""):
        c, k, Lm = row(coefs, const, line, zcoef) if line is not None else (coefs, const, None)
        B.le(c, k, gamma=gamma, L=Lm, name=name)

    def eq(coefs, const, line=None, zcoef=0.0, gamma=None, name=""):
        c, k, Lm = row(coefs, const, line, zcoef) if line is not None else (coefs, const, None)
        B.eq(c, k, gamma=gamma, L=Lm, name=name)

    # buses ---------------------------------------------------------------
    W = []
    for i, bus in enumerate(case.buses):
        w = reg("W", B.var(f"W[{bus.id}]"))
        le({w: -1.0}, bus.v_min ** 2, name=f"W_lb[{bus.id}]")
        le({w: 1.0}, -bus.v_max ** 2, name=f"W_ub[{bus.id}]")
        W.append(w)

    # generators ------------------------------------------------------------
    Pg, Qg = [], []
    for k, gen in enumerate(case.generators):
        p = reg("Pg", B.var(f"Pg[{k}]", NONNEG))
        q = reg("Qg", B.var(f"Qg[{k}]"))
        le({p: 1.0}, -gen.p_max, name=f"Pg_ub[{k}]")
        le({q: -1.0}, gen.q_min, name=f"Qg_lb[{k}]")
        le({q: 1.0}, -gen.q_max, name=f"Qg_ub[{k}]")
        Pg.append(p)
        Qg.append(q)

    # loads -----------------------------------------------------------------
    # per load: (coefs for P balance, gamma terms for P, coefs for Q, gamma for Q)
    load_terms = []
    if ops:
        for k in range(nd):
            x = reg("x_d", B.var(f"x_d[{k}]", NONNEG))
            le({x: 1.0}, -1.0, name=f"x_d_ub[{k}]")
            load_terms.append(({x: -scenario.p_d[k]}, {}, {x: -scenario.q_d[k]}, {}))
    else:
        p0 = gs["p_d"].start
        q0 = gs["q_d"].start
        for k, load in enumerate(case.loads):
            sh = reg("shed", B.var(f"shed[{k}]", NONNEG))
            le({sh: 1.0}, 0.0, gamma={p0 + k: -1.0}, name=f"shed_ub[{k}]")
            qs = reg("q_served", B.var(f"q_served[{k}]"))
            if load.q_base < 0:
                le({qs: 1.0}, 0.0, name=f"qs_ub[{k}]")
                le({qs: -1.0}, 0.0, gamma={q0 + k: 1.0}, name=f"qs_lb[{k}]")
            else:
                le({qs: -1.0}, 0.0, name=f"qs_lb[{k}]")
                le({qs: 1.0}, 0.0, gamma={q0 + k: -1.0}, name=f"qs_ub[{k}]")
            B.cost(sh, 1.0)
            load_terms.append(({sh: 1.0}, {p0 + k: -1.0}, {qs: -1.0}, {}))

    # shunts ----------------------------------------------------------------
    shunt_ws = []
    for k, sh in enumerate(case.shunts):
        i = case.bus_index[sh.bus]
        vmax2 = case.buses[i].v_max ** 2
        ws = reg("Ws", B.var(f"Ws[{k}]", NONNEG))
        le({ws: 1.0, W[i]: -1.0}, 0.0, name=f"Ws_le_W[{k}]")
        if options.shunt == "mccormick":
            xs = reg("x_s", B.var(f"x_s[{k}]", NONNEG))
            le({xs: 1.0}, -1.0, name=f"x_s_ub[{k}]")
            le({xs: vmax2, W[i]: 1.0, ws: -1.0}, -vmax2, name=f"Ws_mc_lb[{k}]")
            le({ws: 1.0, xs: -vmax2}, 0.0, name=f"Ws_mc_ub[{k}]")
        elif options.shunt != "simple":
            raise ValueError(f"unknown shunt model {options.shunt!r}")
        shunt_ws.append(ws)

    # lines -----------------------------------------------------------------
    wb = case.w_bounds
    flows_at_bus: list[list[tuple[int, int]]] = [[] for _ in range(nb)]  # (P col, Q col)
    for k, ln in enumerate(case.lines):
        i, j = case.line_ends(k)
        bi, bj = case.buses[i], case.buses[j]
        wfr = reg("Wfr", B.var(f"Wfr[{ln.id}]"))
        a, wto, wr, wi = B.block(RSOC, [f"Wfr_half[{ln.id}]", f"Wto[{ln.id}]",
                                        f"WR[{ln.id}]", f"WI[{ln.id}]"])
        reg("Wto", wto)
        reg("WR", wr)
        reg("WI", wi)
        # 2 * (Wfr/2) * Wto >= WR^2 + WI^2
        eq({a: 1.0, wfr: -0.5}, 0.0, name=f"Wfr_half[{ln.id}]")
        u1, v1, pij, qij = B.block(RSOC, [f"th_fr_u[{ln.id}]", f"th_fr_v[{ln.id}]",
                                          f"Pij[{ln.id}]", f"Qij[{ln.id}]"])
        u2, v2, pji, qji = B.block(RSOC, [f"th_to_u[{ln.id}]", f"th_to_v[{ln.id}]",
                                          f"Pji[{ln.id}]", f"Qji[{ln.id}]"])
        for key, v in (("Pij", pij), ("Qij", qij), ("Pji", pji), ("Qji", qji)):
            reg(key, v)
        t2 = ln.thermal ** 2
        for u, v, side in ((u1, v1, "fr"), (u2, v2, "to")):
            eq({v: 1.0}, -1.0, name=f"th_{side}_v[{ln.id}]")
            if options.thermal_status:
                eq({u: 1.0}, 0.0, line=k, zcoef=-t2 / 2, name=f"th_{side}_u[{ln.id}]")
            else:
                eq({u: 1.0}, -t2 / 2, name=f"th_{side}_u[{ln.id}]")
        # flow definitions
        p_fr, q_fr, p_to, q_to = _flow_coefs(ln)
        for var, ws, (cw, cr, ci), nm in ((pij, wfr, p_fr, "Pij"), (qij, wfr, q_fr, "Qij"),
                                          (pji, wto, p_to, "Pji"), (qji, wto, q_to, "Qji")):
            eq({var: 1.0, ws: -cw, wr: -cr, wi: -ci}, 0.0, name=f"{nm}_def[{ln.id}]")
        flows_at_bus[i].append((pij, qij))
        flows_at_bus[j].append((pji, qji))
        # z-gated end voltages
        for wv, bus, wbus, side in ((wfr, bi, W[i], "fr"), (wto, bj, W[j], "to")):
            le({wv: -1.0}, 0.0, line=k, zcoef=bus.v_min ** 2, name=f"W{side}_lb[{ln.id}]")
            le({wv: 1.0}, 0.0, line=k, zcoef=-bus.v_max ** 2, name=f"W{side}_ub[{ln.id}]")
            le({wv: 1.0, wbus: -1.0}, 0.0, name=f"W{side}_link_ub[{ln.id}]")
            le({wbus: 1.0, wv: -1.0}, -bus.v_max ** 2, line=k, zcoef=bus.v_max ** 2,
               name=f"W{side}_link_lb[{ln.id}]")
        wr_lo, wr_hi, wi_lo, wi_hi = wb[k]
        le({wr: 1.0}, 0.0, line=k, zcoef=-wr_hi, name=f"WR_ub[{ln.id}]")
        le({wr: -1.0}, 0.0, line=k, zcoef=wr_lo, name=f"WR_lb[{ln.id}]")
        le({wi: 1.0}, 0.0, line=k, zcoef=-wi_hi, name=f"WI_ub[{ln.id}]")
        le({wi: -1.0}, 0.0, line=k, zcoef=wi_lo, name=f"WI_lb[{ln.id}]")
        if options.angle_limits:
            le({wr: math.tan(ln.theta_min), wi: -1.0}, 0.0, name=f"ang_lb[{ln.id}]")
            le({wi: 1.0, wr: -math.tan(ln.theta_max)}, 0.0, name=f"ang_ub[{ln.id}]")

    # nodal balance ------------------------------------------------------------
    for i, bus in enumerate(case.buses):
        pc: dict[int, float] = {}
        qc: dict[int, float] = {}
        pgam: dict[int, float] = {}
        qgam: dict[int, float] = {}
        for g in case.bus_gens[i]:
            pc[Pg[g]] = 1.0
            qc[Qg[g]] = 1.0
        for pv, qv in flows_at_bus[i]:
            pc[pv] = pc.get(pv, 0.0) - 1.0
            qc[qv] = qc.get(qv, 0.0) - 1.0
        for d in case.bus_loads[i]:
            lp, lpg, lq, lqg = load_terms[d]
            for v, c in lp.items():
                pc[v] = pc.get(v, 0.0) + c
            for v, c in lq.items():
                qc[v] = qc.get(v, 0.0) + c
            for j, c in lpg.items():
                pgam[j] = pgam.get(j, 0.0) + c
            for j, c in lqg.items():
                qgam[j] = qgam.get(j, 0.0) + c
        for s in case.bus_shunts[i]:
            sh = case.shunts[s]
            ws = shunt_ws[s]
            pc[ws] = pc.get(ws, 0.0) - sh.gs
            qc[ws] = qc.get(ws, 0.0) + sh.bs
        B.eq(pc, 0.0, gamma=pgam or None, name=f"P_bal[{bus.id}]")
        B.eq(qc, 0.0, gamma=qgam or None, name=f"Q_bal[{bus.id}]")

    # objective -------------------------------------------------------------------
    if ops:
        ptot = float(np.sum(scenario.p_d))
        risk = scenario.risk(case)
        rtot = float(np.sum(risk))
        alpha = scenario.alpha
        for k in range(nd):
            if ptot > 0:
                B.cost(idx["x_d"][k], -(1 - alpha) * scenario.p_d[k] / ptot)
        for k in range(nl):
            if rtot > 0:
                B.cost(zvar[k], alpha * risk[k] / rtot)

    prog, perm = B.build()
    index = {k: perm[np.asarray(v, dtype=int)] for k, v in idx.items()}
    return SOCModel(prog, index, mode, options)
