"""Scenario vectors (the NN input) and their verification box."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkCase

LOAD_LO, LOAD_HI = 0.75, 1.25
RISK_LO, RISK_HI = 0.25, 0.75
ALPHA_LO, ALPHA_HI = 0.25, 0.75


@dataclass(frozen=True)
class ScenarioInput:
    """Loads, per-line risk multipliers and tradeoff weight.

    Vector layout is ``[p_d..., q_d..., r..., alpha]`` in case ordering.
    """

    p_d: np.ndarray
    q_d: np.ndarray
    r: np.ndarray
    alpha: float

    @classmethod
    def from_vector(cls, case: NetworkCase, v) -> "ScenarioInput":
        v = np.asarray(v, dtype=float)
        nd, nl = case.n_load, case.n_line
        if v.shape != (2 * nd + nl + 1,):
            raise ValueError(f"scenario vector has shape {v.shape}, expected ({2 * nd + nl + 1},)")
        return cls(v[:nd].copy(), v[nd:2 * nd].copy(), v[2 * nd:2 * nd + nl].copy(), float(v[-1]))

    @classmethod
    def nominal(cls, case: NetworkCase, alpha: float = 0.5, r: float = 0.5) -> "ScenarioInput":
        return cls(case.p_base, case.q_base, np.full(case.n_line, r), alpha)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p_d, self.q_d, self.r, [self.alpha]])

    def risk(self, case: NetworkCase) -> np.ndarray:
        """Effective line risk: case base risk scaled by the multiplier."""
        return case.risk * self.r

    def as_dict(self) -> dict:
        return {"p_d": self.p_d.tolist(), "q_d": self.q_d.tolist(), "r": self.r.tolist(),
                "alpha": self.alpha}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioInput":
        return cls(np.asarray(doc["p_d"], float), np.asarray(doc["q_d"], float),
                   np.asarray(doc["r"], float), float(doc["alpha"]))


def gamma_dim(case: NetworkCase) -> int:
    return 2 * case.n_load + case.n_line + 1


def gamma_slices(case: NetworkCase) -> dict[str, slice]:
    nd, nl = case.n_load, case.n_line
    return {"p_d": slice(0, nd), "q_d": slice(nd, 2 * nd),
            "r": slice(2 * nd, 2 * nd + nl), "alpha": slice(2 * nd + nl, 2 * nd + nl + 1)}


def gamma_box(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper bounds: loads +-25% of base, risk and alpha in [0.25, 0.75]."""
    p, q = case.p_base, case.q_base
    lo = np.concatenate([
        np.minimum(LOAD_LO * p, LOAD_HI * p), np.minimum(LOAD_LO * q, LOAD_HI * q),
        np.full(case.n_line, RISK_LO), [ALPHA_LO]])
    hi = np.concatenate([
        np.maximum(LOAD_LO * p, LOAD_HI * p), np.maximum(LOAD_LO * q, LOAD_HI * q),
        np.full(case.n_line, RISK_HI), [ALPHA_HI]])
    return lo, hi


def in_box(case: NetworkCase, v, tol: float = 1e-9) -> bool:
    lo, hi = gamma_box(case)
    v = np.asarray(v, dtype=float)
    return bool(np.all(v >= lo - tol) and np.all(v <= hi + tol))
