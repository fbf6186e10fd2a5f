"""Random-sampling baseline for the verifier and the comparison tables."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkCase
from .nn import MLPModel, snap
from .redispatch import solve_ac_redispatch, solve_soc_redispatch
from .scenario import ScenarioInput, gamma_box
from .verifier import VerificationResult

log = logging.getLogger(__name__)

MODELS = ("I", "II", "III")


def sample_gamma(case: NetworkCase, rng: np.random.Generator) -> ScenarioInput:
    """Independent uniform draw of every scenario component over its box."""
    lo, hi = gamma_box(case)
    return ScenarioInput.from_vector(case, rng.uniform(lo, hi))


def draw_rng(seed: int, index: int) -> np.random.Generator:
    # seed and index are pooled by SeedSequence, so runs with different seeds
    # never share draws
    return np.random.default_rng([seed, index])


@dataclass
class SampleRecord:
    sample: int  # position among accepted samples; -1 when rejected
    draw: int
    gamma: ScenarioInput
    z: np.ndarray
    shed: dict
    rejected: bool
    status: dict
    time_s: dict


@dataclass
class BenchmarkRun:
    case: str
    nn_id: str
    n_samples: int
    seed: int
    records: list = field(default_factory=list)
    optimized: VerificationResult | None = None
    partial: bool = False

    @property
    def accepted(self) -> list:
        return [r for r in self.records if not r.rejected]

    @property
    def rejected(self) -> int:
        return sum(r.rejected for r in self.records)

    def summary(self) -> dict:
        acc = self.accepted
        out = {"case": self.case, "nn": self.nn_id, "n_samples": self.n_samples,
               "seed": self.seed, "accepted": len(acc), "rejected": self.rejected,
               "draws": len(self.records), "partial": self.partial}
        for m in MODELS:
            out[f"max_shed_{m}"] = max((r.shed[m] for r in acc), default=None)
            out[f"time_{m}_s"] = float(sum(r.time_s[m] for r in acc))
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "rejected", "shed_I", "shed_II", "shed_III"])
        for r in self.records:
            w.writerow([r.sample if not r.rejected else "", int(r.rejected)]
                       + [_fmt(r.shed.get(m)) for m in MODELS])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def evaluate_sample(case, nn, scenario: ScenarioInput):
    """Models I-III at a scenario, as the verifier's pipeline would run them."""
    gamma = scenario.vector()
    L = nn.forward(gamma)
    z = snap(L)
    shed, status, times = {}, {}, {}
    for m in MODELS:
        t0 = time.perf_counter()
        if m == "I":
            r = solve_soc_redispatch(case, scenario, L, tag="I")
        elif m == "II":
            r = solve_soc_redispatch(case, scenario, z, tag="II")
        else:
            r = solve_ac_redispatch(case, scenario, z)
        times[m] = time.perf_counter() - t0
        status[m] = r.status
        shed[m] = r.shed
    return z, shed, status, times


def _evaluate_draw(args):
    case, nn, seed, draw = args
    sc = sample_gamma(case, draw_rng(seed, draw))
    return (sc,) + evaluate_sample(case, nn, sc)


def run_benchmark(case: NetworkCase, nn: MLPModel, n: int = 100, seed: int = 0,
                  nn_id: str = "nn", optimized: VerificationResult | None = None,
                  jobs: int = 1) -> BenchmarkRun:
    """Sample ``n`` accepted scenarios, re-drawing solver failures (budget ``10 n``).

    With ``jobs > 1`` draws are evaluated in worker processes but consumed in
    draw order, so the records match a serial run.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    run = BenchmarkRun(case.name, nn_id, n, seed, optimized=optimized)
    budget = 10 * n
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    accepted = 0
    draw = 0
    try:
        while accepted < n and draw < budget:
            batch = range(draw, min(budget, draw + jobs * min(n - accepted, 4)))
            args = [(case, nn, seed, d) for d in batch]
            results = pool.map(_evaluate_draw, args) if pool else map(_evaluate_draw, args)
            for d, (sc, z, shed, status, times) in zip(batch, results):
                rejected = any(s != "optimal" for s in status.values())
                run.records.append(SampleRecord(-1 if rejected else accepted, d, sc, z, shed,
                                                rejected, status, times))
                accepted += not rejected
                draw = d + 1
                if accepted >= n:
                    break
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)
    if accepted < n:
        run.partial = True
        log.warning("sampling budget exhausted: %d of %d accepted", accepted, n)
    return run


def compare(run: BenchmarkRun) -> tuple[list[dict], list[dict]]:
    """Bound rows per model (fixed order I, II, III) and timing rows."""
    if run.optimized is None:
        raise ValueError("benchmark run has no optimized result attached")
    if not run.accepted:
        raise ValueError("benchmark run has no accepted samples")
    s = run.summary()
    rows, timing = [], []
    for m in MODELS:
        opt = run.optimized.shed[m]
        smax = s[f"max_shed_{m}"]
        rows.append({"model": m, "optimized": opt, "sampled_max": smax, "ratio": ratio(opt, smax)})
        timing.append({"model": m, "optimized_s": run.optimized.time_s.get(m, float("nan")),
                       "sampled_s": s[f"time_{m}_s"]})
    timing.append({"model": "stage_a", "optimized_s": run.optimized.time_s.get("stage_a",
                                                                              float("nan")),
                   "sampled_s": 0.0})
    return rows, timing


def ratio(optimized, sampled_max) -> float:
    if optimized is None or sampled_max is None:
        return float("nan")
    if sampled_max == 0:
        return float("inf") if optimized > 0 else float("nan")
    return optimized / sampled_max
