"""Optimal power shutoff on the SOC relaxation, solved by branch and bound."""
from __future__ import annotations

import heapq
import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .conic import SolverSolution, solve_conic
from .formulation import SOCModel, build_soc
from .network import NetworkCase
from .scenario import ScenarioInput, gamma_box

log = logging.getLogger(__name__)

INT_TOL = 1e-6


@dataclass(frozen=True)
class BnBConfig:
    max_nodes: int = 5000
    abs_gap: float = 1e-7
    rel_gap: float = 1e-6
    branching: str = "most_fractional"


@dataclass(frozen=True)
class OPSConfig:
    alpha: float | None = None  # overrides the scenario's alpha when set
    relax_binaries: bool = False
    bnb: BnBConfig = BnBConfig()
    tol: float = 1e-8

    def __post_init__(self):
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.bnb.abs_gap < 0 or self.bnb.rel_gap < 0:
            raise ValueError("gaps must be nonnegative")


@dataclass
class SwitchingDecision:
    z: np.ndarray
    objective: float
    served_load: float
    risk: float
    alpha: float
    certified: bool = True
    nodes: int = 0
    bound: float = float("nan")
    x_d: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def shed(self) -> float:
        return float(self._p_total - self.served_load)

    _p_total: float = 0.0


def _scenario(scenario: ScenarioInput, cfg: OPSConfig) -> ScenarioInput:
    if cfg.alpha is None:
        return scenario
    return ScenarioInput(scenario.p_d, scenario.q_d, scenario.r, cfg.alpha)


def build_soc_ops(case: NetworkCase, scenario: ScenarioInput, cfg: OPSConfig = OPSConfig()
                  ) -> SOCModel:
    """SOC-OPS as a canonical program; the objective is the negated tradeoff."""
    return build_soc(case, "ops", _scenario(scenario, cfg), relax_binaries=cfg.relax_binaries)


class _Topology:
    """Re-solves the OPS program with per-line bounds on z."""

    def __init__(self, model: SOCModel, tol: float):
        self.model = model
        self.tol = tol
        p = model.program
        names = p.ineq_names
        nl = len(model.index["z"])
        self.ub_rows = np.array([names.index(f"z_ub[{k}]") for k in range(nl)])
        self.lb_rows = np.array([names.index(f"z_lb[{k}]") for k in range(nl)])
        self.d0 = p.d.c0

    def solve(self, lb: np.ndarray, ub: np.ndarray) -> SolverSolution:
        d0 = self.d0.copy()
        d0[self.ub_rows] = -ub
        d0[self.lb_rows] = lb
        return solve_conic(self.model.program.with_d0(d0), tol=self.tol)


def _decision(case, scenario, model, sol, certified, nodes, bound) -> SwitchingDecision:
    vals = model.values(sol.x)
    z = vals["z"]
    z = np.where(np.abs(z - np.round(z)) <= INT_TOL, np.round(z), z) + 0.0
    x_d = np.clip(vals["x_d"], 0.0, 1.0)
    served = float(x_d @ scenario.p_d)
    risk_vec = scenario.risk(case)
    risk = float(z @ risk_vec)
    ptot, rtot = float(scenario.p_d.sum()), float(risk_vec.sum())
    a = scenario.alpha
    obj = (1 - a) * (served / ptot if ptot > 0 else 0.0) - a * (risk / rtot if rtot > 0 else 0.0)
    dec = SwitchingDecision(z=z, objective=obj, served_load=served, risk=risk, alpha=a,
                            certified=certified, nodes=nodes, bound=bound, x_d=x_d)
    dec._p_total = ptot
    return dec


def solve_soc_ops_relaxed(case, scenario, cfg: OPSConfig = OPSConfig()) -> SwitchingDecision:
    sc = _scenario(scenario, cfg)
    model = build_soc(case, "ops", sc, relax_binaries=True)
    sol = solve_conic(model.program, tol=cfg.tol)
    if not sol.ok:
        raise RuntimeError(f"relaxed SOC-OPS failed: {sol.status}")
    return _decision(case, sc, model, sol, True, 1, -sol.objective)


def solve_fixed_topology(case, scenario, z, cfg: OPSConfig = OPSConfig()):
    """OPS objective with every status pinned; ``None`` when infeasible."""
    sc = _scenario(scenario, cfg)
    model = build_soc(case, "ops", sc, relax_binaries=True)
    top = _Topology(model, cfg.tol)
    z = np.asarray(z, dtype=float)
    sol = top.solve(z, z)
    if not sol.ok:
        return None
    return _decision(case, sc, model, sol, True, 1, -sol.objective)


def solve_soc_ops_global(case: NetworkCase, scenario: ScenarioInput,
                         cfg: OPSConfig = OPSConfig()) -> SwitchingDecision:
    """Best-first branch and bound over the line statuses.

    Internally the program is a minimisation of the negated tradeoff; node
    bounds and gaps below are in that sense.
    """
    if cfg.relax_binaries:
        raise ValueError("global solve requires relax_binaries=False")
    sc = _scenario(scenario, cfg)
    model = build_soc(case, "ops", sc)
    top = _Topology(model, cfg.tol)
    nl = case.n_line
    risk = sc.risk(case)
    zcols = model.index["z"]
    bnb = cfg.bnb

    best_val = np.inf
    best_sol: SolverSolution | None = None

    def try_incumbent(zfix):
        nonlocal best_val, best_sol
        s = top.solve(zfix, zfix)
        if s.ok and s.objective < best_val - 1e-12:
            best_val, best_sol = s.objective, s

    root = top.solve(np.zeros(nl), np.ones(nl))
    if not root.ok:
        raise RuntimeError(f"root relaxation failed: {root.status}")
    # every line off is always a feasible topology; rounding often does better
    try_incumbent(np.zeros(nl))
    try_incumbent((root.x[zcols] >= 0.5).astype(float))

    counter = itertools.count()
    heap = [(root.objective, next(counter), np.zeros(nl), np.ones(nl), root)]
    nodes = 1
    certified = True
    open_bound = np.inf  # lowest bound among nodes left unexplored

    def gap_tol():
        return max(bnb.abs_gap, bnb.rel_gap * abs(best_val)) if np.isfinite(best_val) else 0.0

    while heap:
        bound, _, lb, ub, sol = heapq.heappop(heap)
        if bound >= best_val - gap_tol():
            open_bound = bound
            break
        z = sol.x[zcols]
        frac = np.abs(z - np.round(z))
        free = (ub - lb) > 0.5
        frac = np.where(free, frac, 0.0)
        if frac.max() <= INT_TOL:
            try_incumbent(np.round(z))
            continue
        if nodes >= bnb.max_nodes:
            certified = False
            open_bound = min(bound, min((h[0] for h in heap), default=np.inf))
            break
        # The node's dual point stays feasible when bound constants move, so
        # lam'b + mu'd is a valid bound for any descendant: fix statuses whose
        # flip alone would already be pruned.
        dual0 = sol.dual_objective
        mu_ub, mu_lb = sol.mu[top.ub_rows], sol.mu[top.lb_rows]
        cut = best_val - gap_tol()
        lb, ub = lb.copy(), ub.copy()
        fix_one = free & (dual0 + mu_ub >= cut)
        fix_zero = free & ~fix_one & (dual0 + mu_lb >= cut)
        lb[fix_one] = 1.0
        ub[fix_zero] = 0.0
        free = free & ~fix_one & ~fix_zero
        # most fractional, ties broken by larger risk
        score = np.where(free & (frac > INT_TOL), -np.abs(z - 0.5), -np.inf)
        if not np.isfinite(score.max()):
            # everything fractional got fixed; re-solve the tightened node
            child = top.solve(lb, ub)
            nodes += 1
            if child.ok and child.objective < cut:
                heapq.heappush(heap, (child.objective, next(counter), lb, ub, child))
            continue
        cand = np.flatnonzero(score >= score.max() - 1e-12)
        k = int(cand[np.argmax(risk[cand])])
        for val, mu_k in ((0.0, mu_ub[k]), (1.0, mu_lb[k])):
            if dual0 + mu_k >= cut:
                continue
            clb, cub = lb.copy(), ub.copy()
            clb[k] = cub[k] = val
            child = top.solve(clb, cub)
            nodes += 1
            if not child.ok:
                if child.status != "infeasible":
                    log.debug("node solve status %s", child.status)
                continue
            if child.objective < best_val - gap_tol():
                heapq.heappush(heap, (child.objective, next(counter), clb, cub, child))
    global_bound = min(best_val, open_bound)
    if best_sol is None:
        raise RuntimeError("no feasible topology found")
    dec = _decision(case, sc, model, best_sol, certified, nodes, -global_bound)
    if not certified:
        log.warning("branch and bound hit max_nodes=%d; incumbent not certified", bnb.max_nodes)
    return dec


def sample_scenario(case: NetworkCase, rng: np.random.Generator,
                    alpha_range: tuple[float, float] | None = None) -> ScenarioInput:
    lo, hi = gamma_box(case)
    v = rng.uniform(lo, hi)
    if alpha_range is not None:
        a_lo, a_hi = alpha_range
        v[-1] = a_lo if a_hi == a_lo else rng.uniform(a_lo, a_hi)
    return ScenarioInput.from_vector(case, v)


def generate_training_set(case: NetworkCase, n: int, alpha_range=(0.25, 0.75), seed: int = 0,
                          cfg: OPSConfig = OPSConfig()) -> tuple[list[dict], int]:
    """Labelled ``(gamma, z*)`` pairs from globally solved SOC-OPS instances.

    Returns ``(records, rejected)``.  Each draw uses its own seeded stream so
    a record depends only on ``(seed, draw index)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    records, rejected, draw = [], 0, 0
    budget = 10 * n
    while len(records) < n:
        if draw >= budget:
            raise RuntimeError(f"resample budget exhausted after {draw} draws "
                               f"({len(records)} accepted)")
        rng = np.random.default_rng([seed, draw])
        draw += 1
        sc = sample_scenario(case, rng, alpha_range)
        try:
            dec = solve_soc_ops_global(case, sc, cfg)
        except RuntimeError as exc:
            log.info("draw %d rejected: %s", draw - 1, exc)
            rejected += 1
            continue
        if not dec.certified:
            rejected += 1
            continue
        records.append({"gamma": sc.as_dict(), "z": [int(v) for v in dec.z],
                        "objective": dec.objective, "alpha": sc.alpha})
    if rejected:
        log.info("training set: %d rejected draws", rejected)
    return records, rejected


def write_dataset(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
