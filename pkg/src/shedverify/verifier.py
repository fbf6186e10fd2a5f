"""Adversarial loading search against an NN switching policy.

Stage A maximises the dual of the (simplified) SOC redispatch problem over
the scenario box, with the line statuses tied to the network output.  The
search runs in the reduced space of the scenario: for fixed ``gamma`` the
inner maximisation over dual variables is a convex conic program, so its
value and a gradient (from the optimal multipliers) come from one solve.
The full Problem-3 point ``(gamma, NN auxiliaries, L, lam, mu, s)`` is then
assembled and its residuals checked against the stage tolerance.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .conic import DualProgram, SolverSolution, solve_conic, weak_duality_check
from .formulation import SOCOptions, build_soc
from .network import NetworkCase
from .nn import MLPModel, check_case, snap
from .redispatch import RedispatchResult, solve_ac_redispatch, solve_soc_redispatch
from .scenario import ScenarioInput, gamma_box

log = logging.getLogger(__name__)


class VerificationError(RuntimeError):
    def __init__(self, msg, stage: str, best=None):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage
        self.best = best


@dataclass(frozen=True)
class VerifierConfig:
    drop_angle_limits: bool = True
    thermal_without_status: bool = True
    simple_shunt: bool = True
    restarts: int = 5
    seed: int = 0
    stage_tol: float = 5e-3
    conic_tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def soc_options(self) -> SOCOptions:
        return SOCOptions(angle_limits=not self.drop_angle_limits,
                          thermal_status=not self.thermal_without_status,
                          shunt="simple" if self.simple_shunt else "mccormick")


@dataclass
class VerificationProblem:
    case: NetworkCase
    nn: MLPModel
    dual: DualProgram
    lo: np.ndarray
    hi: np.ndarray
    cfg: VerifierConfig

    @property
    def n_gamma(self) -> int:
        return len(self.lo)

    def variable_counts(self) -> dict:
        d = self.dual
        widths = self.nn.dims[1:]
        hidden = widths[:-1]
        counts = {"lambda": d.n_lambda, "mu": d.n_mu, "s": d.n_s, "gamma": self.n_gamma,
                  "L": self.nn.n_out,
                  # pre-activations of every layer, post-activations of hidden layers
                  "aux": sum(widths) + sum(hidden)}
        counts["total"] = sum(counts.values())
        return counts

    # -- reduced space -----------------------------------------------------------
    def _mid_half(self):
        mid = (self.lo + self.hi) / 2
        half = (self.hi - self.lo) / 2
        return mid, half

    def to_gamma(self, u):
        mid, half = self._mid_half()
        return np.clip(mid + half * np.asarray(u, float), self.lo, self.hi)

    def to_u(self, gamma):
        mid, half = self._mid_half()
        return np.where(half > 0, (np.asarray(gamma, float) - mid) / np.where(half > 0, half, 1), 0)

    def inner(self, gamma) -> tuple[np.ndarray, SolverSolution]:
        L = self.nn.forward(gamma)
        return L, solve_conic(self.dual.primal, gamma, L, tol=self.cfg.conic_tol)

    def value_grad(self, gamma) -> tuple[float, np.ndarray, np.ndarray, SolverSolution]:
        """Dual value at ``(gamma, NN(gamma))`` and its gradient in ``gamma``."""
        L, sol = self.inner(gamma)
        if not sol.ok:
            return float("nan"), np.zeros(self.n_gamma), L, sol
        g, l = self.dual.objective_gradients(sol.lam, sol.mu)
        grad = g + self.nn.jacobian(gamma).T @ l
        return float(sol.dual_objective), grad, L, sol

    # -- full Problem-3 point ------------------------------------------------------
    def assemble(self, gamma, sol: SolverSolution) -> dict:
        x = self.nn.normalize(gamma)
        point = {"gamma": np.asarray(gamma, float)}
        for k, (w, b) in enumerate(zip(self.nn.weights, self.nn.biases)):
            a = w @ x + b
            point[f"a{k + 1}"] = a
            x = expit(a)
            if k < len(self.nn.weights) - 1:
                point[f"y{k + 1}"] = x
        point["L"] = x
        point["lam"], point["mu"], point["s"] = sol.lam, sol.mu, sol.s
        return point

    def objective(self, point) -> float:
        return self.dual.objective(point["lam"], point["mu"], point["gamma"], point["L"])

    def residuals(self, point) -> dict:
        """Constraint residuals of Problem 3 at ``point`` (all should be ~0)."""
        res = self.dual.residuals(point["lam"], point["mu"], point["s"])
        x = self.nn.normalize(point["gamma"])
        nn_res = 0.0
        n_layers = len(self.nn.weights)
        for k, (w, b) in enumerate(zip(self.nn.weights, self.nn.biases)):
            a = point[f"a{k + 1}"]
            nn_res = max(nn_res, float(np.max(np.abs(a - (w @ x + b)))))
            y = point["L"] if k == n_layers - 1 else point[f"y{k + 1}"]
            nn_res = max(nn_res, float(np.max(np.abs(y - expit(a)))))
            x = y
        g = point["gamma"]
        box = float(max(np.max(self.lo - g, initial=0.0), np.max(g - self.hi, initial=0.0), 0.0))
        return {"stationarity": res["stationarity"], "mu": res["mu"], "cone": res["cone"],
                "nn": nn_res, "box": box}


def build_verification(case: NetworkCase, nn: MLPModel, cfg: VerifierConfig = VerifierConfig()
                       ) -> VerificationProblem:
    check_case(nn, case)
    model = build_soc(case, "redispatch", options=cfg.soc_options())
    lo, hi = gamma_box(case)
    return VerificationProblem(case, nn, DualProgram(model.program), lo, hi, cfg)


@dataclass
class StageAResult:
    gamma: np.ndarray
    L: np.ndarray
    dual_objective: float
    residuals: dict
    stationarity: float
    restart: int
    status: str
    point: dict = field(repr=False, default_factory=dict)
    attempts: list = field(default_factory=list)


def _ascent(vp: VerificationProblem, u0: np.ndarray, max_iter: int):
    half = vp._mid_half()[1]
    fixed = half <= 0

    def fun(u):
        val, grad, _, _ = vp.value_grad(vp.to_gamma(u))
        if not np.isfinite(val):
            # step into a region the inner solve rejects; make the line search back off
            return 1e6, np.zeros_like(u)
        gu = np.where(fixed, 0.0, grad * half)
        return -val, -gu

    bounds = [(0.0, 0.0) if f else (-1.0, 1.0) for f in fixed]
    res = minimize(fun, np.where(fixed, 0.0, u0), jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9})
    return np.clip(res.x, -1.0, 1.0), res


def _reduced_stationarity(vp, u, grad_gamma, value) -> float:
    """Projected-gradient norm on the box, scaled by the objective size."""
    half = vp._mid_half()[1]
    gu = np.where(half > 0, grad_gamma * half, 0.0)
    step = np.clip(u + gu, -1.0, 1.0) - u
    return float(np.max(np.abs(step), initial=0.0)) / (1.0 + abs(value))


def solve_verification(vp: VerificationProblem, seed: int | None = None) -> StageAResult:
    """Multi-start local maximisation; best restart by dual objective, ties to the lowest."""
    cfg = vp.cfg
    seed = cfg.seed if seed is None else seed
    best: StageAResult | None = None
    attempts = []
    for r in range(cfg.restarts):
        if r == 0:
            u0 = np.zeros(vp.n_gamma)
        else:
            u0 = np.random.default_rng([seed, r]).uniform(-1.0, 1.0, vp.n_gamma)
        try:
            u, opt = _ascent(vp, u0, cfg.max_iter)
        except Exception as exc:  # keep the other restarts alive
            attempts.append({"restart": r, "status": "error", "message": str(exc)})
            continue
        gamma = vp.to_gamma(u)
        val, grad, L, sol = vp.value_grad(gamma)
        if not sol.ok:
            attempts.append({"restart": r, "status": sol.status})
            continue
        point = vp.assemble(gamma, sol)
        res = vp.residuals(point)
        stat = _reduced_stationarity(vp, u, grad, val)
        ok = max(res.values()) <= cfg.stage_tol and stat <= cfg.stage_tol
        attempts.append({"restart": r, "status": "optimal" if ok else "not_converged",
                         "dual_objective": val, "stationarity": stat,
                         "iterations": int(opt.nit)})
        cand = StageAResult(gamma, L, val, res, stat, r, "optimal" if ok else "not_converged",
                            point)
        if best is None or (cand.status, cand.dual_objective) > (best.status, best.dual_objective):
            # "optimal" > "not_converged" lexically; strict '>' keeps the lowest restart on ties
            if best is None or cand.status == "optimal" or best.status != "optimal":
                best = cand
    if best is None:
        raise VerificationError("no restart produced a solvable point", "stage_a")
    best.attempts = attempts
    if best.status != "optimal":
        raise VerificationError("no restart met the stage tolerance", "stage_a", best)
    return best


@dataclass
class VerificationResult:
    gamma: ScenarioInput
    L: np.ndarray
    z: np.ndarray
    dual_objective: float
    shed: dict
    status: dict
    time_s: dict
    residuals: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    @property
    def shed_I(self) -> float:
        return self.shed["I"]

    @property
    def shed_II(self) -> float:
        return self.shed["II"]

    @property
    def shed_III(self) -> float:
        return self.shed["III"]

    def to_json(self, times: bool = True) -> dict:
        def num(v):
            return float(v) if v is not None and np.isfinite(v) else None

        return {"gamma": self.gamma.as_dict(), "L": [float(v) for v in self.L],
                "z": [int(v) for v in self.z], "dual_obj": num(self.dual_objective),
                "shed": {k: num(v) for k, v in self.shed.items()},
                "status": dict(self.status),
                "time_s": {k: (v if times else 0.0) for k, v in self.time_s.items()},
                "residuals": {k: float(v) for k, v in self.residuals.items()}}

    def dumps(self, times: bool = True) -> str:
        return json.dumps(self.to_json(times), sort_keys=True, indent=1)


def run_pipeline(case: NetworkCase, nn: MLPModel, stage: StageAResult,
                 times: dict | None = None) -> VerificationResult:
    """Models I -> snap -> II and III at the stage-A loading."""
    times = dict(times or {})
    scenario = ScenarioInput.from_vector(case, stage.gamma)
    # snap always consumes a fresh forward pass, not the optimiser's copy of L
    L = nn.forward(stage.gamma)
    z = snap(L)
    status = {"stage_a": stage.status}
    shed = {}
    models: dict[str, RedispatchResult] = {}
    for tag in ("I", "II", "III"):
        t0 = time.perf_counter()
        try:
            if tag == "I":
                r = solve_soc_redispatch(case, scenario, L, tag="I")
            elif tag == "II":
                r = solve_soc_redispatch(case, scenario, z, tag="II")
            else:
                r = solve_ac_redispatch(case, scenario, z)
        except Exception as exc:
            log.warning("Model %s failed: %s", tag, exc)
            r = None
        times[tag] = time.perf_counter() - t0
        models[tag] = r
        status[tag] = r.status if r is not None else "error"
        shed[tag] = r.shed if r is not None and r.ok else float("nan")
    residuals = dict(stage.residuals)
    residuals["reduced_stationarity"] = stage.stationarity
    return VerificationResult(scenario, L, z, stage.dual_objective, shed, status, times,
                              residuals, models)


def verify(case: NetworkCase, nn: MLPModel, cfg: VerifierConfig = VerifierConfig()
           ) -> VerificationResult:
    t0 = time.perf_counter()
    vp = build_verification(case, nn, cfg)
    stage = solve_verification(vp)
    t_a = time.perf_counter() - t0
    out = run_pipeline(case, nn, stage, {"stage_a": t_a})
    out.time_s["total"] = time.perf_counter() - t0
    return out


def weak_duality_margin(vp: VerificationProblem, stage: StageAResult) -> float:
    """Primal optimum of the verifier's model at (gamma*, L) minus the dual value."""
    p = stage.point
    return weak_duality_check(vp.dual.primal, (p["lam"], p["mu"], p["s"]), p["gamma"], p["L"],
                              tol=vp.cfg.stage_tol)
