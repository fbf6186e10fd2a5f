"""Defender problems: SOC redispatch (Models I/II) and AC redispatch (Model III)."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from .conic import ConicProgram, solve_conic
from .formulation import SOCModel, SOCOptions, _flow_coefs, build_soc
from .network import NetworkCase
from .scenario import ScenarioInput

log = logging.getLogger(__name__)

MODEL_TAGS = ("I", "II", "III")


@dataclass
class RedispatchResult:
    shed: float
    x_d: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    status: str
    model_tag: str
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: dict = field(default_factory=dict)
    v_mag: np.ndarray = field(default_factory=lambda: np.zeros(0))  # Model III only
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def to_json(self) -> dict:
        return {"model_tag": self.model_tag, "status": self.status,
                "shed": self.shed if math.isfinite(self.shed) else None,
                "x_d": [float(v) for v in self.x_d]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _failed(case, tag, status, z) -> RedispatchResult:
    nan = np.full(case.n_load, np.nan)
    return RedispatchResult(float("nan"), nan, np.full(case.n_gen, np.nan),
                            np.full(case.n_gen, np.nan), status, tag, np.asarray(z, float))


def _check_z(case, z, binary: bool) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (case.n_line,):
        raise ValueError(f"z has shape {z.shape}, expected ({case.n_line},)")
    if np.any(z < -1e-9) or np.any(z > 1 + 1e-9):
        raise ValueError("z must lie in [0, 1]")
    if binary and np.any((z != 0.0) & (z != 1.0)):
        raise ValueError("z must be binary")
    return np.clip(z, 0.0, 1.0)


def dead_buses(case: NetworkCase, z) -> np.ndarray:
    """Mask of buses whose energized component has no generator able to make power."""
    dead = np.zeros(case.n_bus, dtype=bool)
    for comp in case.components(z):
        if not any(case.generators[g].p_max > 0 for i in comp for g in case.bus_gens[i]):
            dead[comp] = True
    return dead


def deenergize_dead_islands(case: NetworkCase, z) -> np.ndarray:
    """Switch off lines inside islands that cannot be supplied.

    Line charging and losses inside a sourceless island would otherwise make
    both the SOC and AC models infeasible; every load there is shed either way.
    """
    z = np.asarray(z, dtype=float).copy()
    dead = dead_buses(case, z)
    for k in range(case.n_line):
        i, _ = case.line_ends(k)
        if dead[i]:
            z[k] = 0.0
    return z


# ------------------------------------------------------------------------ SOC

class SOCRedispatch:
    """The parametric SOC redispatch program of one case, built once."""

    def __init__(self, case: NetworkCase, options: SOCOptions = SOCOptions()):
        self.case = case
        self.model: SOCModel = build_soc(case, "redispatch", options=options)

    @property
    def program(self) -> ConicProgram:
        return self.model.program

    def solve(self, scenario: ScenarioInput, z, tag: str = "II",
              tol: float = 1e-8) -> RedispatchResult:
        case = self.case
        z = _check_z(case, z, binary=(tag == "II"))
        if tag == "II":
            z = deenergize_dead_islands(case, z)
        sol = solve_conic(self.program, scenario.vector(), z, tol=tol)
        if not sol.ok:
            return _failed(case, tag, sol.status, z)
        v = self.model.values(sol.x)
        p_d = scenario.p_d
        shed_k = np.clip(v["shed"], 0.0, np.abs(scenario.p_d))
        with np.errstate(divide="ignore", invalid="ignore"):
            x_d = np.where(p_d != 0, 1.0 - shed_k / np.where(p_d != 0, p_d, 1.0), 1.0)
        return RedispatchResult(float(shed_k.sum()), np.clip(x_d, 0.0, 1.0), v["Pg"], v["Qg"],
                                "optimal", tag, z, sol.residuals)


_SOC_CACHE: dict = {}


def build_soc_redispatch(case: NetworkCase, options: SOCOptions = SOCOptions()) -> ConicProgram:
    """Parametric program: loads enter through gamma, statuses through L."""
    return _soc_solver(case, options).program


def _soc_solver(case, options) -> SOCRedispatch:
    key = (id(case), options)
    hit = _SOC_CACHE.get(key)
    if hit is None or hit.case is not case:
        if len(_SOC_CACHE) > 8:
            _SOC_CACHE.clear()
        hit = _SOC_CACHE[key] = SOCRedispatch(case, options)
    return hit


def solve_soc_redispatch(case: NetworkCase, scenario: ScenarioInput, z, tag: str = "II",
                         options: SOCOptions = SOCOptions()) -> RedispatchResult:
    """Model I (fractional z) or Model II (binary z)."""
    if tag not in ("I", "II"):
        raise ValueError("SOC redispatch is Model I or II")
    return _soc_solver(case, options).solve(scenario, z, tag)


# ------------------------------------------------------------------------- AC

class _ACModel:
    """Problem 2 with fixed statuses; variables ``[V, theta, x_d, x_s, Pg, Qg]``."""

    def __init__(self, case: NetworkCase, scenario: ScenarioInput, z: np.ndarray):
        self.case, self.sc, self.z = case, scenario, z
        nb, nd, ns, ng = case.n_bus, case.n_load, len(case.shunts), case.n_gen
        self.sl = {}
        k = 0
        for name, n in (("V", nb), ("th", nb), ("x_d", nd), ("x_s", ns), ("Pg", ng), ("Qg", ng)):
            self.sl[name] = slice(k, k + n)
            k += n
        self.n = k
        self.on = np.flatnonzero(z > 0.5)
        ends = np.array([case.line_ends(k) for k in range(case.n_line)], dtype=int).reshape(-1, 2)
        self.fi, self.ti = ends[:, 0], ends[:, 1]
        coefs = np.array([_flow_coefs(ln) for ln in case.lines]).reshape(-1, 4, 3)
        self.coefs = coefs  # [line, (p_fr, q_fr, p_to, q_to), (self, cos, sin)]
        self.thermal = np.array([ln.thermal for ln in case.lines])
        self.theta_bar = np.array([ln.theta_max for ln in case.lines])
        self.dead = dead_buses(case, z)
        comps = case.components(z)
        self.refs = []
        for comp in comps:
            gb = [i for i in comp if case.bus_gens[i]]
            self.refs.append(min(gb, key=lambda i: case.buses[i].id) if gb
                             else min(comp, key=lambda i: case.buses[i].id))
        self.load_bus = np.array([case.bus_index[d.bus] for d in case.loads], dtype=int)
        self.shunt_bus = np.array([case.bus_index[s.bus] for s in case.shunts], dtype=int)
        self.gen_bus = np.array([case.bus_index[g.bus] for g in case.generators], dtype=int)
        # Balance rows are kept only where they bind: a bus with nothing attached
        # has identically zero rows, and a sourceless island is shed outright
        # (its P and Q rows would both hinge on the same pinned x_d).
        busy = np.zeros(case.n_bus, dtype=bool)
        for arr in (self.load_bus, self.shunt_bus, self.gen_bus, self.fi[self.on], self.ti[self.on]):
            busy[arr] = True
        busy &= ~self.dead
        self.bal_rows = np.flatnonzero(np.concatenate([busy, busy]))
        self.gs = np.array([s.gs for s in case.shunts])
        self.bs = np.array([s.bs for s in case.shunts])

    # flows on energized lines: value and partials w.r.t. (Vi, Vj, dtheta)
    def flows(self, x):
        V, th = x[self.sl["V"]], x[self.sl["th"]]
        on = self.on
        vi, vj = V[self.fi[on]], V[self.ti[on]]
        d = th[self.fi[on]] - th[self.ti[on]]
        c, s = np.cos(d), np.sin(d)
        cf = self.coefs[on]
        vself = np.stack([vi, vi, vj, vj], axis=1)
        val = cf[:, :, 0] * vself ** 2 + (vi * vj)[:, None] * (cf[:, :, 1] * c[:, None]
                                                              + cf[:, :, 2] * s[:, None])
        trig = cf[:, :, 1] * c[:, None] + cf[:, :, 2] * s[:, None]
        dtrig = -cf[:, :, 1] * s[:, None] + cf[:, :, 2] * c[:, None]
        self_i = np.array([1.0, 1.0, 0.0, 0.0])
        dvi = 2 * cf[:, :, 0] * vself * self_i + vj[:, None] * trig
        dvj = 2 * cf[:, :, 0] * vself * (1 - self_i) + vi[:, None] * trig
        dd = (vi * vj)[:, None] * dtrig
        return val, dvi, dvj, dd

    def objective(self, x):
        return float(np.sum(self.sc.p_d) - self.sc.p_d @ x[self.sl["x_d"]])

    def objective_grad(self, x):
        g = np.zeros(self.n)
        g[self.sl["x_d"]] = -self.sc.p_d
        return g

    def balance(self, x):
        """Injection minus outflow at every bus: ``[P..., Q...]``."""
        case, sl = self.case, self.sl
        nb = case.n_bus
        V = x[sl["V"]]
        xd, xs = x[sl["x_d"]], x[sl["x_s"]]
        P = np.zeros(nb)
        Q = np.zeros(nb)
        np.add.at(P, self.gen_bus, x[sl["Pg"]])
        np.add.at(Q, self.gen_bus, x[sl["Qg"]])
        np.add.at(P, self.load_bus, -xd * self.sc.p_d)
        np.add.at(Q, self.load_bus, -xd * self.sc.q_d)
        vs = V[self.shunt_bus]
        np.add.at(P, self.shunt_bus, -self.gs * xs * vs ** 2)
        np.add.at(Q, self.shunt_bus, self.bs * xs * vs ** 2)
        val, *_ = self.flows(x)
        on = self.on
        np.add.at(P, self.fi[on], -val[:, 0])
        np.add.at(Q, self.fi[on], -val[:, 1])
        np.add.at(P, self.ti[on], -val[:, 2])
        np.add.at(Q, self.ti[on], -val[:, 3])
        return np.concatenate([P, Q])

    def balance_jac(self, x):
        case, sl = self.case, self.sl
        nb = case.n_bus
        J = np.zeros((2 * nb, self.n))
        V = x[sl["V"]]
        xs = x[sl["x_s"]]
        gcols = np.arange(sl["Pg"].start, sl["Pg"].stop)
        J[self.gen_bus, gcols] += 1.0
        J[nb + self.gen_bus, np.arange(sl["Qg"].start, sl["Qg"].stop)] += 1.0
        dcols = np.arange(sl["x_d"].start, sl["x_d"].stop)
        np.add.at(J, (self.load_bus, dcols), -self.sc.p_d)
        np.add.at(J, (nb + self.load_bus, dcols), -self.sc.q_d)
        scols = np.arange(sl["x_s"].start, sl["x_s"].stop)
        vs = V[self.shunt_bus]
        vcol = sl["V"].start + self.shunt_bus
        np.add.at(J, (self.shunt_bus, scols), -self.gs * vs ** 2)
        np.add.at(J, (nb + self.shunt_bus, scols), self.bs * vs ** 2)
        np.add.at(J, (self.shunt_bus, vcol), -2 * self.gs * xs * vs)
        np.add.at(J, (nb + self.shunt_bus, vcol), 2 * self.bs * xs * vs)
        _, dvi, dvj, dd = self.flows(x)
        on = self.on
        fi, ti = self.fi[on], self.ti[on]
        v0, t0 = sl["V"].start, sl["th"].start
        for side, (bus, off) in enumerate(((fi, 0), (fi, nb), (ti, 0), (ti, nb))):
            rows = off + bus
            np.add.at(J, (rows, v0 + fi), -dvi[:, side])
            np.add.at(J, (rows, v0 + ti), -dvj[:, side])
            np.add.at(J, (rows, t0 + fi), -dd[:, side])
            np.add.at(J, (rows, t0 + ti), dd[:, side])
        return J

    def eq(self, x):
        th = x[self.sl["th"]]
        return np.concatenate([self.balance(x)[self.bal_rows], th[self.refs]])

    def eq_jac(self, x):
        R = np.zeros((len(self.refs), self.n))
        R[np.arange(len(self.refs)), self.sl["th"].start + np.array(self.refs, dtype=int)] = 1.0
        return np.vstack([self.balance_jac(x)[self.bal_rows], R])

    def ineq(self, x):
        """All entries must be >= 0: thermal on live lines, big-M angle bounds."""
        val, *_ = self.flows(x)
        t2 = self.thermal[self.on] ** 2
        therm = np.concatenate([t2 - val[:, 0] ** 2 - val[:, 1] ** 2,
                                t2 - val[:, 2] ** 2 - val[:, 3] ** 2])
        th = x[self.sl["th"]]
        d = th[self.fi] - th[self.ti]
        lim = self.theta_bar + self.case.theta_delta_max * (1.0 - self.z)
        return np.concatenate([therm, lim - d, lim + d])

    def ineq_jac(self, x):
        val, dvi, dvj, dd = self.flows(x)
        on = self.on
        fi, ti = self.fi[on], self.ti[on]
        v0, t0 = self.sl["V"].start, self.sl["th"].start
        m = len(on)
        Jt = np.zeros((2 * m, self.n))
        r = np.arange(m)
        for half, (p, q) in enumerate(((0, 1), (2, 3))):
            rows = half * m + r
            gvi = -2 * (val[:, p] * dvi[:, p] + val[:, q] * dvi[:, q])
            gvj = -2 * (val[:, p] * dvj[:, p] + val[:, q] * dvj[:, q])
            gd = -2 * (val[:, p] * dd[:, p] + val[:, q] * dd[:, q])
            np.add.at(Jt, (rows, v0 + fi), gvi)
            np.add.at(Jt, (rows, v0 + ti), gvj)
            np.add.at(Jt, (rows, t0 + fi), gd)
            np.add.at(Jt, (rows, t0 + ti), -gd)
        nl = self.case.n_line
        Ja = np.zeros((2 * nl, self.n))
        k = np.arange(nl)
        Ja[k, t0 + self.fi] -= 1.0
        Ja[k, t0 + self.ti] += 1.0
        Ja[nl + k, t0 + self.fi] += 1.0
        Ja[nl + k, t0 + self.ti] -= 1.0
        return np.vstack([Jt, Ja])

    def bounds(self):
        case, sc = self.case, self.sc
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        sl = self.sl
        lo[sl["V"]] = [b.v_min for b in case.buses]
        hi[sl["V"]] = [b.v_max for b in case.buses]
        lo[sl["th"]], hi[sl["th"]] = -math.pi, math.pi
        lo[sl["x_d"]], hi[sl["x_d"]] = 0.0, 1.0
        # loads in sourceless islands are shed outright
        hi[sl["x_d"]] = np.where(self.dead[self.load_bus], 0.0, 1.0)
        lo[sl["x_s"]], hi[sl["x_s"]] = 0.0, 1.0
        lo[sl["Pg"]] = 0.0
        hi[sl["Pg"]] = [g.p_max for g in case.generators]
        lo[sl["Qg"]] = [g.q_min for g in case.generators]
        hi[sl["Qg"]] = [g.q_max for g in case.generators]
        return lo, hi

    def flat_start(self):
        case, sl = self.case, self.sl
        lo, hi = self.bounds()
        x = np.zeros(self.n)
        x[sl["V"]] = np.clip(1.0, lo[sl["V"]], hi[sl["V"]])
        x[sl["x_d"]] = hi[sl["x_d"]]
        x[sl["x_s"]] = 1.0
        # proportional dispatch within each island
        pg = np.zeros(case.n_gen)
        for comp in case.components(self.z):
            gens = [g for i in comp for g in case.bus_gens[i]]
            cap = sum(case.generators[g].p_max for g in gens)
            demand = sum(self.sc.p_d[d] for i in comp for d in case.bus_loads[i])
            if cap > 0:
                for g in gens:
                    pg[g] = case.generators[g].p_max * min(1.0, max(demand, 0.0) / cap)
        x[sl["Pg"]] = pg
        x[sl["Qg"]] = np.clip(0.0, lo[sl["Qg"]], hi[sl["Qg"]])
        return x

    def kkt(self, x) -> dict:
        """Constraint violation and a least-squares stationarity residual."""
        lo, hi = self.bounds()
        e = self.eq(x)
        g = self.ineq(x)
        viol = max(float(np.max(np.abs(e), initial=0.0)), float(max(0.0, -g.min(initial=0.0))),
                   float(np.max(np.maximum(lo - x, 0.0))), float(np.max(np.maximum(x - hi, 0.0))))
        act_tol = 1e-6
        Je = self.eq_jac(x)
        Jg = self.ineq_jac(x)[g <= act_tol]
        I = np.eye(self.n)
        at_lo = I[x <= lo + act_tol]
        at_hi = -I[x >= hi - act_tol]
        # grad f = Je' l + Jg' m + bounds' nu, with m, nu >= 0 and l free
        G = np.vstack([Je, -Je, Jg, at_lo, at_hi]).T
        grad = self.objective_grad(x)
        _, res = nnls(G, grad, maxiter=50 * G.shape[1])
        return {"feasibility": viol, "stationarity": float(res) / (1.0 + np.linalg.norm(grad))}


def solve_ac_redispatch(case: NetworkCase, scenario: ScenarioInput, z, start=None,
                        tol: float = 1e-6, max_iter: int = 500) -> RedispatchResult:
    """Model III: local solve of the AC redispatch problem (SLSQP)."""
    z = deenergize_dead_islands(case, _check_z(case, z, binary=True))
    m = _ACModel(case, scenario, z)
    lo, hi = m.bounds()
    x0 = m.flat_start() if start is None else np.clip(np.asarray(start, float), lo, hi)
    cons = [{"type": "eq", "fun": m.eq, "jac": m.eq_jac},
            {"type": "ineq", "fun": m.ineq, "jac": m.ineq_jac}]
    with np.errstate(all="ignore"), warnings.catch_warnings():
        # SLSQP clips its line-search iterates to the bounds and says so
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(m.objective, x0, jac=m.objective_grad, method="SLSQP",
                       bounds=list(zip(lo, hi)), constraints=cons,
                       options={"maxiter": max_iter, "ftol": 1e-12})
    x = np.clip(res.x, lo, hi)
    diag = m.kkt(x)
    diag["iterations"] = int(res.nit)
    status = "optimal"
    if diag["feasibility"] > tol:
        status = "numerical_failure"
    elif diag["stationarity"] > tol:
        # SLSQP's own test passed but the first-order check did not
        status = "numerical_failure" if not res.success else "optimal"
        if res.success:
            diag["stationarity_warning"] = True
    if status != "optimal":
        log.debug("AC redispatch: %s (%s)", status, res.message)
        out = _failed(case, "III", status, z)
        out.residuals = diag
        return out
    xd = x[m.sl["x_d"]]
    shed = max(0.0, float(np.sum(scenario.p_d) - scenario.p_d @ xd))
    return RedispatchResult(shed, xd, x[m.sl["Pg"]], x[m.sl["Qg"]], status, "III", z, diag,
                            x[m.sl["V"]], x[m.sl["th"]])


def ac_flows(case: NetworkCase, V, theta, z=None) -> np.ndarray:
    """Per-line ``(p_fr, q_fr, p_to, q_to)`` from polar voltages; zero on open lines."""
    z = np.ones(case.n_line) if z is None else np.asarray(z, float)
    n = case.n_bus
    m = _ACModel(case, ScenarioInput.nominal(case), z)
    x = np.zeros(m.n)
    x[:n] = V
    x[n:2 * n] = theta
    out = np.zeros((case.n_line, 4))
    out[m.on] = m.flows(x)[0]
    return out


def shed_gap(result_ii: RedispatchResult, result_iii: RedispatchResult) -> float:
    """``shed_III - shed_II``; nonnegative up to solver tolerance."""
    if result_ii.model_tag != "II" or result_iii.model_tag != "III":
        raise ValueError("shed_gap expects a Model II and a Model III result")
    if not np.array_equal(result_ii.z, result_iii.z):
        raise ValueError("results were computed for different statuses")
    return result_iii.shed - result_ii.shed
