"""Canonical conic programs, their mechanical duals, and the solver adapter.

A program is stored as::

    minimize    h'x
    subject to  A x + b(gamma, L) = 0
                C x + d(gamma, L) <= 0
                x in K

where ``K`` is a product of free, nonnegative, second-order and rotated
second-order cones laid over consecutive blocks of ``x``, and the right-hand
sides are affine in the parameters: ``b = b0 + Bg @ gamma + BL @ L``.

The rotated cone uses the convention ``2 u v >= ||w||^2, u, v >= 0``.  Under
that convention every cone in the vocabulary is self-dual except the free
cone, whose dual is the zero cone.

The numerical backend is Clarabel (an interior-point conic solver).  Only
``solve_conic`` talks to it; everything else is backend agnostic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

import clarabel

FREE, NONNEG, SOC, RSOC = "free", "nonneg", "soc", "rotated_soc"
_KINDS = (FREE, NONNEG, SOC, RSOC)
_MIN_DIM = {FREE: 1, NONNEG: 1, SOC: 2, RSOC: 3}
_R2 = 1.0 / math.sqrt(2.0)

STATUSES = ("optimal", "infeasible", "unbounded", "iteration_limit", "numerical_failure")


# ---------------------------------------------------------------------------- cones

@dataclass(frozen=True)
class ConeBlock:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.dim < _MIN_DIM[self.kind]:
            raise ValueError(f"{self.kind} block needs dimension >= {_MIN_DIM[self.kind]}")


@dataclass(frozen=True)
class ConeSpec:
    blocks: tuple[ConeBlock, ...]

    @classmethod
    def of(cls, *pairs: tuple[str, int]) -> "ConeSpec":
        return cls(tuple(ConeBlock(k, n) for k, n in pairs if n > 0 or k not in (FREE, NONNEG)))

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    def slices(self) -> list[tuple[ConeBlock, slice]]:
        out, k = [], 0
        for blk in self.blocks:
            out.append((blk, slice(k, k + blk.dim)))
            k += blk.dim
        return out

    @cached_property
    def _groups(self) -> dict:
        """Column indices per (kind, dim), stacked one row per block."""
        groups: dict = {}
        for blk, sl in self.slices():
            groups.setdefault((blk.kind, blk.dim), []).append(np.arange(sl.start, sl.stop))
        return {key: np.array(rows) for key, rows in groups.items()}

    def violation(self, v: np.ndarray, dual: bool = False) -> float:
        """Largest distance-like violation of ``v`` from the cone (or its dual).

        The dual of a free block is the zero cone.
        """
        v = np.asarray(v, dtype=float)
        worst = 0.0
        for (kind, _), idx in self._groups.items():
            x = v[idx]
            if kind == FREE:
                viol = float(np.max(np.abs(x))) if dual else 0.0
            elif kind == NONNEG:
                viol = float(max(0.0, -x.min()))
            else:
                if kind == RSOC:
                    head = _R2 * (x[:, 0] + x[:, 1])
                    tail = np.column_stack([_R2 * (x[:, 0] - x[:, 1]), x[:, 2:]])
                else:
                    head, tail = x[:, 0], x[:, 1:]
                viol = max(0.0, float(np.max(np.linalg.norm(tail, axis=1) - head)))
            worst = max(worst, viol)
        return worst

    def contains(self, v: np.ndarray, tol: float = 0.0, dual: bool = False) -> bool:
        return self.violation(v, dual=dual) <= tol


def rsoc_to_soc(x: np.ndarray) -> np.ndarray:
    """Orthogonal map taking {2uv >= |w|^2} onto the Lorentz cone (and back)."""
    y = np.array(x, dtype=float, copy=True)
    y[0] = _R2 * (x[0] + x[1])
    y[1] = _R2 * (x[0] - x[1])
    return y


def in_rotated_cone_raw(u: float, v: float, w: Sequence[float], tol: float = 0.0) -> bool:
    """Direct check of ``2uv >= |w|^2, u, v >= 0`` without the linear map."""
    return u >= -tol and v >= -tol and 2 * u * v - float(np.dot(w, w)) >= -tol


# ----------------------------------------------------------------- affine params

@dataclass(frozen=True)
class AffineMap:
    """``c0 + Bg @ gamma + BL @ L`` with sparse coefficient maps."""

    c0: np.ndarray
    Bg: sp.csr_matrix
    BL: sp.csr_matrix

    @classmethod
    def constant(cls, c0, n_gamma: int = 0, n_L: int = 0) -> "AffineMap":
        c0 = np.asarray(c0, dtype=float)
        m = c0.shape[0]
        return cls(c0, sp.csr_matrix((m, n_gamma)), sp.csr_matrix((m, n_L)))

    @property
    def rows(self) -> int:
        return self.c0.shape[0]

    @property
    def n_gamma(self) -> int:
        return self.Bg.shape[1]

    @property
    def n_L(self) -> int:
        return self.BL.shape[1]

    def value(self, gamma=None, L=None) -> np.ndarray:
        out = self.c0.copy()
        if self.n_gamma:
            out += self.Bg @ _param(gamma, self.n_gamma, "gamma")
        if self.n_L:
            out += self.BL @ _param(L, self.n_L, "L")
        return out

    def scaled(self, k: float) -> "AffineMap":
        return AffineMap(k * self.c0, (k * self.Bg).tocsr(), (k * self.BL).tocsr())


def _param(v, n, name) -> np.ndarray:
    if v is None:
        raise ValueError(f"program needs a {name} vector of length {n}")
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


# ----------------------------------------------------------------------- programs

@dataclass(frozen=True)
class ConicProgram:
    h: np.ndarray
    A: sp.csc_matrix
    b: AffineMap
    C: sp.csc_matrix
    d: AffineMap
    cone: ConeSpec
    var_names: tuple[str, ...] = ()
    eq_names: tuple[str, ...] = ()
    ineq_names: tuple[str, ...] = ()
    integer: tuple[int, ...] = ()

    def __post_init__(self):
        n = self.h.shape[0]
        if self.A.shape[1] != n or self.C.shape[1] != n:
            raise ValueError("constraint matrices must have one column per variable")
        if self.A.shape[0] != self.b.rows or self.C.shape[0] != self.d.rows:
            raise ValueError("right-hand side rows do not match constraint matrices")
        if self.cone.dim != n:
            raise ValueError(f"cone dimension {self.cone.dim} != variable count {n}")
        if (self.b.n_gamma, self.b.n_L) != (self.d.n_gamma, self.d.n_L):
            raise ValueError("b and d parameter dimensions differ")

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.C.shape[0]

    @property
    def n_gamma(self) -> int:
        return self.b.n_gamma

    @property
    def n_L(self) -> int:
        return self.b.n_L

    def with_d0(self, d0: np.ndarray) -> "ConicProgram":
        """Copy with the constant part of ``d`` replaced (used for branching)."""
        return _replace(self, d=AffineMap(np.asarray(d0, float), self.d.Bg, self.d.BL))

    def primal_residuals(self, x, gamma=None, L=None) -> dict:
        b = self.b.value(gamma, L)
        d = self.d.value(gamma, L)
        eq = self.A @ x + b
        ineq = self.C @ x + d
        return {
            "eq": float(np.max(np.abs(eq))) if eq.size else 0.0,
            "ineq": float(max(0.0, ineq.max())) if ineq.size else 0.0,
            "cone": self.cone.violation(x),
        }


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


@dataclass(frozen=True)
class DualProgram:
    """maximize lam'b + mu'd  s.t.  h + A'lam + C'mu - s = 0, mu >= 0, s in K*."""

    primal: ConicProgram

    @property
    def cone(self) -> ConeSpec:
        return self.primal.cone

    @property
    def n_lambda(self) -> int:
        return self.primal.n_eq

    @property
    def n_mu(self) -> int:
        return self.primal.n_ineq

    @property
    def n_s(self) -> int:
        return self.primal.n

    @property
    def n_zero_s(self) -> int:
        return sum(b.dim for b in self.cone.blocks if b.kind == FREE)

    def objective(self, lam, mu, gamma=None, L=None) -> float:
        p = self.primal
        return float(lam @ p.b.value(gamma, L) + mu @ p.d.value(gamma, L))

    def objective_gradients(self, lam, mu) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients of gamma and L in the (bilinear) dual objective."""
        p = self.primal
        g = p.b.Bg.T @ lam + p.d.Bg.T @ mu
        l = p.b.BL.T @ lam + p.d.BL.T @ mu
        return np.asarray(g).ravel(), np.asarray(l).ravel()

    def stationarity(self, lam, mu, s) -> np.ndarray:
        p = self.primal
        return p.h + p.A.T @ lam + p.C.T @ mu - s

    def residuals(self, lam, mu, s) -> dict:
        st = self.stationarity(lam, mu, s)
        return {
            "stationarity": float(np.max(np.abs(st))) if st.size else 0.0,
            "mu": float(max(0.0, -mu.min())) if mu.size else 0.0,
            "cone": self.cone.violation(s, dual=True),
        }

    def as_primal(self, gamma=None, L=None) -> ConicProgram:
        """Recast ``max`` as a canonical ``min`` over ``y = [lam, mu, s]``.

        Free blocks of ``K`` become zero cones: their ``s`` entries sit in a
        free block pinned to zero by equality rows.
        """
        p = self.primal
        b = p.b.value(gamma, L)
        d = p.d.value(gamma, L)
        me, mi, n = p.n_eq, p.n_ineq, p.n
        # s ordering follows K; free parts go first among s in a free block
        free_cols, other_blocks = [], []
        for blk, sl in p.cone.slices():
            if blk.kind == FREE:
                free_cols.extend(range(sl.start, sl.stop))
            else:
                other_blocks.append((blk, sl))
        order = list(free_cols) + [c for _, sl in other_blocks for c in range(sl.start, sl.stop)]
        nz = len(free_cols)
        # columns: lam (free), s_free (free), mu (nonneg), s_other (blocks)
        ny = me + nz + mi + (n - nz)
        perm_s = np.empty(n, dtype=int)
        for pos, c in enumerate(order):
            perm_s[c] = (me + pos) if pos < nz else (me + nz + mi + (pos - nz))
        h = np.zeros(ny)
        h[:me] = -b
        h[me + nz: me + nz + mi] = -d
        # stationarity: A' lam + C' mu - s = -h_primal
        At = p.A.T.tocoo()
        Ct = p.C.T.tocoo()
        rows = np.concatenate([At.row, Ct.row, np.arange(n)])
        cols = np.concatenate([At.col, me + nz + Ct.col, perm_s])
        vals = np.concatenate([At.data, Ct.data, -np.ones(n)])
        A_st = sp.csc_matrix((vals, (rows, cols)), shape=(n, ny))
        A_zero = sp.csc_matrix((np.ones(nz), (np.arange(nz), me + np.arange(nz))), shape=(nz, ny))
        A_all = sp.vstack([A_st, A_zero]).tocsc()
        b_all = np.concatenate([p.h, np.zeros(nz)])
        blocks = [ConeBlock(FREE, me + nz)] if me + nz else []
        if mi:
            blocks.append(ConeBlock(NONNEG, mi))
        blocks += [blk for blk, _ in other_blocks]
        names = ([f"lam[{r}]" for r in range(me)] + [f"s[{c}]" for c in free_cols]
                 + [f"mu[{r}]" for r in range(mi)] + [f"s[{c}]" for c in order[nz:]])
        return ConicProgram(
            h=h, A=A_all, b=AffineMap.constant(b_all), C=sp.csc_matrix((0, ny)),
            d=AffineMap.constant(np.zeros(0)), cone=ConeSpec(tuple(blocks)),
            var_names=tuple(names),
        )

    def split_recast(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inverse of the column layout used by ``as_primal``."""
        p = self.primal
        me, mi, n = p.n_eq, p.n_ineq, p.n
        free_cols = [c for blk, sl in p.cone.slices() if blk.kind == FREE
                     for c in range(sl.start, sl.stop)]
        other = [c for blk, sl in p.cone.slices() if blk.kind != FREE
                 for c in range(sl.start, sl.stop)]
        nz = len(free_cols)
        lam = y[:me]
        mu = y[me + nz: me + nz + mi]
        s = np.zeros(n)
        s[free_cols] = y[me: me + nz]
        s[other] = y[me + nz + mi:]
        return lam, mu, s


def dualize(p: ConicProgram) -> DualProgram:
    """Lagrangian dual of ``p``; parametric right-hand sides carry through."""
    if p.A.shape[1] != p.n or p.C.shape[1] != p.n:
        raise ValueError("dimension mismatch")
    return DualProgram(p)


# ------------------------------------------------------------------------- solver

@dataclass
class SolverSolution:
    status: str
    x: np.ndarray
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None
    s: np.ndarray | None = None
    objective: float = float("nan")
    dual_objective: float = float("nan")
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    backend_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
    "MaxIterations": "iteration_limit",
    "MaxTime": "iteration_limit",
}


_ASSEMBLY_CACHE: dict = {}
_SOLVER_CACHE: dict = {}


def _assemble(p: ConicProgram):
    """Stack ``[A; C; -T x_K]`` and the Clarabel cone list.

    Branching re-solves share ``A``, ``C`` and the cone, so the result is
    cached on their identities (the cache holds references to keep them alive).
    """
    key = (id(p.A), id(p.C), id(p.cone))
    hit = _ASSEMBLY_CACHE.get(key)
    if hit is not None and hit[0] is p.A and hit[1] is p.C and hit[2] is p.cone:
        return hit[3], hit[4]
    n = p.n
    cones = []
    if p.n_eq:
        cones.append(clarabel.ZeroConeT(p.n_eq))
    if p.n_ineq:
        cones.append(clarabel.NonnegativeConeT(p.n_ineq))
    rows, cols, vals = [], [], []
    r = 0
    for blk, sl in p.cone.slices():
        if blk.kind == FREE:
            continue
        idx = np.arange(sl.start, sl.stop)
        if blk.kind == RSOC:
            # ((u+v)/sqrt2, (u-v)/sqrt2, w) maps the rotated cone onto the standard one
            u, v = idx[0], idx[1]
            rows += [r, r, r + 1, r + 1]
            cols += [u, v, u, v]
            vals += [-_R2, -_R2, -_R2, _R2]
            rows += list(range(r + 2, r + blk.dim))
            cols += list(idx[2:])
            vals += [-1.0] * (blk.dim - 2)
        else:
            rows += list(range(r, r + blk.dim))
            cols += list(idx)
            vals += [-1.0] * blk.dim
        cones.append(clarabel.NonnegativeConeT(blk.dim) if blk.kind == NONNEG
                     else clarabel.SecondOrderConeT(blk.dim))
        r += blk.dim
    K = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))
    Abig = sp.vstack([p.A, p.C, K]).tocsc()
    if len(_ASSEMBLY_CACHE) > 16:
        _ASSEMBLY_CACHE.clear()
    _ASSEMBLY_CACHE[key] = (p.A, p.C, p.cone, Abig, cones)
    return Abig, cones


def _solver(p: ConicProgram, Abig, bbig, cones, tol: float, max_iter: int):
    key = (id(p.A), id(p.C), id(p.cone), tol, max_iter)
    hit = _SOLVER_CACHE.get(key)
    if hit is not None and hit[0] is Abig:
        return hit[1]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = max(tol, 1e-8)
    settings.max_iter = max_iter
    settings.presolve_enable = False
    P = sp.csc_matrix((p.n, p.n))
    solver = clarabel.DefaultSolver(P, np.asarray(p.h, float), Abig, bbig, cones, settings)
    if len(_SOLVER_CACHE) > 16:
        _SOLVER_CACHE.clear()
    _SOLVER_CACHE[key] = (Abig, solver)
    return solver


def solve_conic(p: ConicProgram, gamma=None, L=None, tol: float = 1e-8,
                max_iter: int = 200) -> SolverSolution:
    """Solve ``p`` at the given parameters and return primal and dual values.

    ``optimal`` is only reported when primal feasibility, dual feasibility and
    the duality gap are all within ``tol`` (relative to problem scale).
    """
    b = p.b.value(gamma, L) if p.n_eq else np.zeros(0)
    d = p.d.value(gamma, L) if p.n_ineq else np.zeros(0)
    n = p.n
    Abig, cones = _assemble(p)
    bbig = np.concatenate([-b, -d, np.zeros(Abig.shape[0] - p.n_eq - p.n_ineq)])
    try:
        solver = _solver(p, Abig, bbig, cones, tol, max_iter)
        # every solve goes through update, which keeps results independent of
        # what the cached solver saw before
        solver.update(q=np.asarray(p.h, float), b=bbig)
        sol = solver.solve()
    except Exception as exc:  # backend rejects malformed data
        return SolverSolution("numerical_failure", np.full(n, np.nan), backend_status=str(exc))
    raw = str(sol.status)
    x = np.asarray(sol.x, dtype=float)
    y = np.asarray(sol.z, dtype=float)
    lam = y[:p.n_eq]
    mu = y[p.n_eq:p.n_eq + p.n_ineq]
    # K = -T sel with T symmetric orthogonal, so s = -K' y on the cone rows
    s = -(Abig[p.n_eq + p.n_ineq:].T @ y[p.n_eq + p.n_ineq:])
    status = _STATUS_MAP.get(raw, "numerical_failure")
    out = SolverSolution(status, x, lam, mu, s, iterations=int(sol.iterations), backend_status=raw)
    if status == "optimal":
        dual = DualProgram(p)
        pr = p.primal_residuals(x, gamma, L)
        dr = dual.residuals(lam, mu, s)
        out.objective = float(p.h @ x)
        out.dual_objective = float(lam @ b + mu @ d)
        gap = abs(out.objective - out.dual_objective)
        scale_p = 1.0 + max(np.max(np.abs(b), initial=0.0), np.max(np.abs(d), initial=0.0))
        scale_d = 1.0 + float(np.max(np.abs(p.h), initial=0.0))
        out.residuals = {
            "primal": max(pr.values()) / scale_p,
            "dual": max(dr.values()) / scale_d,
            "gap": gap / (1.0 + abs(out.objective)),
        }
        # Clarabel's tolerances are on equilibrated data; accept a small slack
        # before calling the point optimal in unscaled terms.
        if max(out.residuals.values()) > 100 * tol:
            out.status = "numerical_failure"
    return out


def solve_dual(dual: DualProgram, gamma=None, L=None, tol: float = 1e-8) -> SolverSolution:
    """Solve the dual program by recasting it as a canonical minimisation."""
    recast = dual.as_primal(gamma, L)
    sol = solve_conic(recast, tol=tol)
    if sol.ok:
        lam, mu, s = dual.split_recast(sol.x)
        sol = SolverSolution(sol.status, sol.x, lam, mu, s, objective=-sol.objective,
                             dual_objective=-sol.dual_objective, iterations=sol.iterations,
                             residuals=sol.residuals, backend_status=sol.backend_status)
    return sol


def weak_duality_check(p: ConicProgram, dual_point, gamma=None, L=None,
                       tol: float = 1e-6, primal_optimum: float | None = None) -> float:
    """``primal optimum - dual objective`` at a dual-feasible point (>= -tol)."""
    lam, mu, s = (np.asarray(v, dtype=float) for v in dual_point)
    dual = DualProgram(p)
    res = dual.residuals(lam, mu, s)
    if max(res.values()) > tol:
        raise ValueError(f"dual point infeasible: {res}")
    if primal_optimum is None:
        sol = solve_conic(p, gamma, L)
        if not sol.ok:
            raise RuntimeError(f"primal solve failed: {sol.status}")
        primal_optimum = sol.objective
    return primal_optimum - dual.objective(lam, mu, gamma, L)


# ------------------------------------------------------------------------ builder

class ProgramBuilder:
    """Incremental constructor for ``ConicProgram``.

    Variables are created in a cone group (``free``, ``nonneg``) or inside an
    explicit cone block; ``build`` permutes columns so the cone blocks are
    contiguous and returns the permutation from creation order to columns.
    """

    def __init__(self, n_gamma: int = 0, n_L: int = 0):
        self.n_gamma = n_gamma
        self.n_L = n_L
        self._names: list[str] = []
        self._group: list[tuple[str, int]] = []  # (kind, block id or -1)
        self._blocks: list[ConeBlock] = []
        self._h: dict[int, float] = {}
        self._eq: list[tuple] = []
        self._in: list[tuple] = []
        self._integer: list[int] = []

    def var(self, name: str, kind: str = FREE) -> int:
        if kind not in (FREE, NONNEG):
            raise ValueError("use block() for conic variables")
        self._names.append(name)
        self._group.append((kind, -1))
        return len(self._names) - 1

    def block(self, kind: str, names: Sequence[str]) -> list[int]:
        self._blocks.append(ConeBlock(kind, len(names)))
        bid = len(self._blocks) - 1
        out = []
        for nm in names:
            self._names.append(nm)
            self._group.append((kind, bid))
            out.append(len(self._names) - 1)
        return out

    def mark_integer(self, v: int) -> None:
        self._integer.append(v)

    def cost(self, v: int, c: float) -> None:
        self._h[v] = self._h.get(v, 0.0) + c

    def eq(self, coefs: dict, const: float = 0.0, gamma: dict | None = None,
           L: dict | None = None, name: str = "") -> None:
        """Row ``sum coefs[v] x_v + const + gamma-terms + L-terms = 0``."""
        self._eq.append((coefs, const, gamma or {}, L or {}, name))

    def le(self, coefs: dict, const: float = 0.0, gamma: dict | None = None,
           L: dict | None = None, name: str = "") -> None:
        """Row ``sum coefs[v] x_v + const + gamma-terms + L-terms <= 0``."""
        self._in.append((coefs, const, gamma or {}, L or {}, name))

    def build(self) -> tuple[ConicProgram, np.ndarray]:
        nv = len(self._names)
        free = [v for v in range(nv) if self._group[v] == (FREE, -1)]
        nonneg = [v for v in range(nv) if self._group[v] == (NONNEG, -1)]
        order = free + nonneg
        for bid in range(len(self._blocks)):
            order += [v for v in range(nv) if self._group[v][1] == bid]
        perm = np.empty(nv, dtype=int)
        perm[order] = np.arange(nv)
        h = np.zeros(nv)
        for v, c in self._h.items():
            h[perm[v]] = c
        A, b = self._rows(self._eq, perm, nv)
        C, d = self._rows(self._in, perm, nv)
        blocks = []
        if free:
            blocks.append(ConeBlock(FREE, len(free)))
        if nonneg:
            blocks.append(ConeBlock(NONNEG, len(nonneg)))
        blocks += self._blocks
        prog = ConicProgram(
            h=h, A=A, b=b, C=C, d=d, cone=ConeSpec(tuple(blocks)),
            var_names=tuple(self._names[v] for v in order),
            eq_names=tuple(r[4] for r in self._eq),
            ineq_names=tuple(r[4] for r in self._in),
            integer=tuple(sorted(int(perm[v]) for v in self._integer)),
        )
        return prog, perm

    def _rows(self, rows, perm, nv):
        m = len(rows)
        ri, ci, vi = [], [], []
        gi, gj, gv = [], [], []
        li, lj, lv = [], [], []
        c0 = np.zeros(m)
        for r, (coefs, const, gam, Lm, _) in enumerate(rows):
            for v, c in coefs.items():
                if c != 0.0:
                    ri.append(r); ci.append(perm[v]); vi.append(c)
            c0[r] = const
            for j, c in gam.items():
                if c != 0.0:
                    gi.append(r); gj.append(j); gv.append(c)
            for j, c in Lm.items():
                if c != 0.0:
                    li.append(r); lj.append(j); lv.append(c)
        M = sp.csc_matrix((vi, (ri, ci)), shape=(m, nv))
        Bg = sp.csr_matrix((gv, (gi, gj)), shape=(m, self.n_gamma))
        BL = sp.csr_matrix((lv, (li, lj)), shape=(m, self.n_L))
        return M, AffineMap(c0, Bg, BL)


# ---------------------------------------------------------------------- dump/load

def _triplets(M) -> dict:
    c = sp.coo_matrix(M)
    return {"shape": list(c.shape), "i": c.row.tolist(), "j": c.col.tolist(), "v": c.data.tolist()}


def _from_triplets(t, fmt="csc"):
    M = sp.coo_matrix((t["v"], (t["i"], t["j"])), shape=tuple(t["shape"]))
    return M.tocsc() if fmt == "csc" else M.tocsr()


def _affine_doc(m: AffineMap) -> dict:
    return {"c0": m.c0.tolist(), "Bg": _triplets(m.Bg), "BL": _triplets(m.BL)}


def _affine_load(doc) -> AffineMap:
    return AffineMap(np.asarray(doc["c0"], float), _from_triplets(doc["Bg"], "csr"),
                     _from_triplets(doc["BL"], "csr"))


def dump_program(p: ConicProgram) -> str:
    """JSON container with cone blocks, triplet matrices and parameter maps."""
    doc = {
        "format": "conic-program",
        "version": 1,
        "cone": [[blk.kind, blk.dim] for blk in p.cone.blocks],
        "h": p.h.tolist(),
        "A": _triplets(p.A),
        "b": _affine_doc(p.b),
        "C": _triplets(p.C),
        "d": _affine_doc(p.d),
        "var_names": list(p.var_names),
        "eq_names": list(p.eq_names),
        "ineq_names": list(p.ineq_names),
        "integer": list(p.integer),
    }
    return json.dumps(doc)


def load_program(text: str) -> ConicProgram:
    doc = json.loads(text)
    if doc.get("format") != "conic-program" or doc.get("version") != 1:
        raise ValueError("not a version-1 conic-program document")
    return ConicProgram(
        h=np.asarray(doc["h"], float),
        A=_from_triplets(doc["A"]),
        b=_affine_load(doc["b"]),
        C=_from_triplets(doc["C"]),
        d=_affine_load(doc["d"]),
        cone=ConeSpec(tuple(ConeBlock(k, n) for k, n in doc["cone"])),
        var_names=tuple(doc["var_names"]),
        eq_names=tuple(doc["eq_names"]),
        ineq_names=tuple(doc["ineq_names"]),
        integer=tuple(doc["integer"]),
    )


def stack_params(*parts: Iterable[float]) -> np.ndarray:
    return np.concatenate([np.asarray(list(p), dtype=float) for p in parts])
