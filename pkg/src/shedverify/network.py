"""Grid case model, parsers and derived constants.

Two input formats are understood: a canonical JSON document (all values in
per unit) and a small subset of the MATPOWER ``.m`` case format (values in
MW/MVAr/degrees, converted to per unit on ``baseMVA``).  Components are
always stored in ascending-id order because the neural-network input layout
depends on that ordering.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THETA_DELTA_MAX = math.pi / 3
_TAP_TOL = 1e-9


class CaseError(ValueError):
    """Base class for case parsing problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class CaseSemanticError(CaseError):
    def __init__(self, message: str, component: str):
        super().__init__(f"{component}: {message}")
        self.component = component


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Shunt:
    bus: int
    gs: float
    bs: float


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    g: float
    b: float
    g_fr: float
    g_to: float
    b_fr: float
    b_to: float
    tap_mag: float
    tap_re: float
    tap_im: float
    thermal: float
    theta_min: float
    theta_max: float
    risk: float = 1.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class Load:
    bus: int
    p_base: float
    q_base: float


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    path: str
    message: str

    def __str__(self) -> str:
        return f"[{self.severity}] {self.path}: {self.message}"


def compute_w_bounds(v_min_i: float, v_max_i: float, v_min_j: float, v_max_j: float,
                     theta_max: float) -> tuple[float, float, float, float]:
    """Box on (V_i V_j cos dtheta, V_i V_j sin dtheta) for |dtheta| <= theta_max.

    Returns ``(wr_min, wr_max, wi_min, wi_max)``.
    """
    if not 0.0 <= theta_max < math.pi / 2:
        raise ValueError(f"theta_max must lie in [0, pi/2), got {theta_max!r}")
    if not (0 < v_min_i <= v_max_i and 0 < v_min_j <= v_max_j):
        raise ValueError("voltage bounds must satisfy 0 < v_min <= v_max")
    wr_max = v_max_i * v_max_j
    wr_min = v_min_i * v_min_j * math.cos(theta_max)
    wi_max = v_max_i * v_max_j * math.sin(theta_max)
    return wr_min, wr_max, -wi_max, wi_max


@dataclass(frozen=True)
class NetworkCase:
    """Immutable per-unit grid model with precomputed incidence and bounds."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    shunts: tuple[Shunt, ...]
    theta_delta_max: float = DEFAULT_THETA_DELTA_MAX
    # derived; filled in __post_init__
    bus_index: dict = field(init=False, repr=False, compare=False)
    bus_gens: tuple = field(init=False, repr=False, compare=False)
    bus_lines: tuple = field(init=False, repr=False, compare=False)
    bus_loads: tuple = field(init=False, repr=False, compare=False)
    bus_shunts: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {b.id: k for k, b in enumerate(self.buses)}
        nb = len(self.buses)
        gens = [[] for _ in range(nb)]
        lines = [[] for _ in range(nb)]
        loads = [[] for _ in range(nb)]
        shunts = [[] for _ in range(nb)]
        for k, g in enumerate(self.generators):
            if g.bus in index:
                gens[index[g.bus]].append(k)
        for k, ln in enumerate(self.lines):
            if ln.from_bus in index:
                lines[index[ln.from_bus]].append(k)
            if ln.to_bus in index:
                lines[index[ln.to_bus]].append(k)
        for k, d in enumerate(self.loads):
            if d.bus in index:
                loads[index[d.bus]].append(k)
        for k, s in enumerate(self.shunts):
            if s.bus in index:
                shunts[index[s.bus]].append(k)
        object.__setattr__(self, "bus_index", index)
        object.__setattr__(self, "bus_gens", tuple(tuple(x) for x in gens))
        object.__setattr__(self, "bus_lines", tuple(tuple(x) for x in lines))
        object.__setattr__(self, "bus_loads", tuple(tuple(x) for x in loads))
        object.__setattr__(self, "bus_shunts", tuple(tuple(x) for x in shunts))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def p_tot(self) -> float:
        return math.fsum(d.p_base for d in self.loads)

    @property
    def r_tot(self) -> float:
        return math.fsum(ln.risk for ln in self.lines)

    @property
    def p_base(self) -> np.ndarray:
        return np.array([d.p_base for d in self.loads], dtype=float)

    @property
    def q_base(self) -> np.ndarray:
        return np.array([d.q_base for d in self.loads], dtype=float)

    @property
    def risk(self) -> np.ndarray:
        return np.array([ln.risk for ln in self.lines], dtype=float)

    def line_ends(self, k: int) -> tuple[int, int]:
        """Bus positions (not ids) of line ``k``'s endpoints."""
        ln = self.lines[k]
        return self.bus_index[ln.from_bus], self.bus_index[ln.to_bus]

    @property
    def w_bounds(self) -> np.ndarray:
        """Per-line ``[wr_min, wr_max, wi_min, wi_max]`` rows."""
        out = np.empty((self.n_line, 4))
        for k, ln in enumerate(self.lines):
            i, j = self.line_ends(k)
            bi, bj = self.buses[i], self.buses[j]
            out[k] = compute_w_bounds(bi.v_min, bi.v_max, bj.v_min, bj.v_max, ln.theta_max)
        return out

    def layout_hash(self) -> str:
        """Hash of the component ordering that fixes the NN input layout."""
        key = {
            "buses": [b.id for b in self.buses],
            "lines": [[ln.id, ln.from_bus, ln.to_bus] for ln in self.lines],
            "loads": [d.bus for d in self.loads],
        }
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def components(self, z: Sequence[float] | None = None) -> list[list[int]]:
        """Connected components (bus positions) over lines with z > 0.5."""
        parent = list(range(self.n_bus))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for k in range(self.n_line):
            if z is not None and z[k] <= 0.5:
                continue
            i, j = self.line_ends(k)
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for i in range(self.n_bus):
            groups.setdefault(find(i), []).append(i)
        return [groups[r] for r in sorted(groups)]


def validate(case: NetworkCase) -> list[Finding]:
    """Check every type invariant; returns findings instead of raising."""
    out: list[Finding] = []
    ids = set()

    def err(path, msg):
        out.append(Finding("error", path, msg))

    for b in case.buses:
        path = f"bus[{b.id}]"
        if b.id in ids:
            err(path, "duplicate bus id")
        ids.add(b.id)
        if not (0 < b.v_min <= b.v_max):
            err(path, "voltage bounds must satisfy 0 < vmin <= vmax")
    line_ids = set()
    for ln in case.lines:
        path = f"line[{ln.id}]"
        if ln.id in line_ids:
            err(path, "duplicate line id")
        line_ids.add(ln.id)
        for end in (ln.from_bus, ln.to_bus):
            if end not in ids:
                err(path, f"line references missing bus {end}")
        if ln.from_bus == ln.to_bus:
            err(path, "line endpoints coincide")
        if abs(ln.tap_mag ** 2 - (ln.tap_re ** 2 + ln.tap_im ** 2)) > _TAP_TOL or ln.tap_mag <= 0:
            err(path, "tap magnitude inconsistent with its real/imaginary parts")
        if not ln.thermal > 0:
            err(path, "nonpositive thermal limit")
        if not (ln.theta_min < 0 < ln.theta_max):
            err(path, "angle limits must satisfy theta_min < 0 < theta_max")
        elif abs(ln.theta_min + ln.theta_max) > 1e-12:
            err(path, "asymmetric angle bounds")
        if ln.theta_max >= math.pi / 2:
            err(path, "angle limit must be below pi/2 (unbounded w-box)")
        if ln.risk < 0:
            err(path, "negative risk")
    for k, g in enumerate(case.generators):
        path = f"gen[{k}]"
        if g.bus not in ids:
            err(path, f"generator references missing bus {g.bus}")
        if g.p_max < 0:
            err(path, "negative pmax")
        if g.q_min > g.q_max:
            err(path, "qmin exceeds qmax")
    for k, d in enumerate(case.loads):
        path = f"load[{k}]"
        if d.bus not in ids:
            err(path, f"load references missing bus {d.bus}")
        if d.p_base < 0:
            err(path, "negative active demand")
    for k, s in enumerate(case.shunts):
        if s.bus not in ids:
            err(f"shunt[{k}]", f"shunt references missing bus {s.bus}")
    if case.loads and not case.p_tot > 0:
        err("case", "total active demand must be positive")
    if not case.loads:
        err("case", "case has no loads")
    if not case.r_tot > 0:
        err("case", "total line risk must be positive")
    if not 0 < case.theta_delta_max:
        err("case", "theta_delta_max must be positive")
    return out


def _check(case: NetworkCase) -> NetworkCase:
    problems = [f for f in validate(case) if f.severity == "error"]
    if problems:
        first = problems[0]
        raise CaseSemanticError(first.message, first.path)
    return case


def _assemble(name, base_mva, buses, lines, gens, loads, shunts, theta_delta_max):
    return NetworkCase(
        name=name,
        base_mva=float(base_mva),
        buses=tuple(sorted(buses, key=lambda b: b.id)),
        lines=tuple(sorted(lines, key=lambda ln: ln.id)),
        generators=tuple(sorted(gens, key=lambda g: g.bus)),
        loads=tuple(sorted(loads, key=lambda d: d.bus)),
        shunts=tuple(sorted(shunts, key=lambda s: s.bus)),
        theta_delta_max=theta_delta_max,
    )


# --------------------------------------------------------------------------- JSON

def _parse_json(text: str, name: str, theta_delta_max: float) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    try:
        buses = [Bus(int(b["id"]), float(b["vmin"]), float(b["vmax"])) for b in doc["buses"]]
        lines = []
        for ln in doc["lines"]:
            th = float(ln["theta_max"])
            lines.append(Line(
                id=int(ln["id"]), from_bus=int(ln["from"]), to_bus=int(ln["to"]),
                g=float(ln["g"]), b=float(ln["b"]),
                g_fr=float(ln.get("g_fr", 0.0)), g_to=float(ln.get("g_to", 0.0)),
                b_fr=float(ln.get("b_fr", 0.0)), b_to=float(ln.get("b_to", 0.0)),
                tap_mag=float(ln.get("tap_mag", 1.0)), tap_re=float(ln.get("tap_re", 1.0)),
                tap_im=float(ln.get("tap_im", 0.0)), thermal=float(ln["thermal"]),
                theta_min=-th, theta_max=th, risk=float(ln.get("risk", 1.0)),
            ))
        gens = [Generator(int(g["bus"]), float(g["pmax"]), float(g["qmin"]), float(g["qmax"]))
                for g in doc.get("gens", [])]
        loads = [Load(int(d["bus"]), float(d["pd"]), float(d["qd"])) for d in doc.get("loads", [])]
        shunts = [Shunt(int(s["bus"]), float(s["gs"]), float(s["bs"])) for s in doc.get("shunts", [])]
        base = float(doc.get("base_mva", 100.0))
    except KeyError as exc:
        raise CaseSemanticError(f"missing field {exc.args[0]!r}", "document") from None
    except (TypeError, ValueError) as exc:
        raise CaseSemanticError(str(exc), "document") from None
    tdm = float(doc.get("theta_delta_max", theta_delta_max))
    return _check(_assemble(doc.get("name", name), base, buses, lines, gens, loads, shunts, tdm))


def serialize(case: NetworkCase) -> str:
    """Canonical JSON text; ``parse_case(serialize(c))`` reproduces ``c``."""
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "theta_delta_max": case.theta_delta_max,
        "buses": [{"id": b.id, "vmin": b.v_min, "vmax": b.v_max} for b in case.buses],
        "lines": [{
            "id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "g": ln.g, "b": ln.b,
            "g_fr": ln.g_fr, "g_to": ln.g_to, "b_fr": ln.b_fr, "b_to": ln.b_to,
            "tap_mag": ln.tap_mag, "tap_re": ln.tap_re, "tap_im": ln.tap_im,
            "thermal": ln.thermal, "theta_max": ln.theta_max, "risk": ln.risk,
        } for ln in case.lines],
        "gens": [{"bus": g.bus, "pmax": g.p_max, "qmin": g.q_min, "qmax": g.q_max}
                 for g in case.generators],
        "loads": [{"bus": d.bus, "pd": d.p_base, "qd": d.q_base} for d in case.loads],
        "shunts": [{"bus": s.bus, "gs": s.gs, "bs": s.bs} for s in case.shunts],
    }
    return json.dumps(doc, indent=1)


# ----------------------------------------------------------------------- MATPOWER

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?[Ii]nf")


def _pos(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, col


def _strip_comments(text: str) -> str:
    # keep offsets stable: blank out comments instead of deleting them
    return re.sub(r"%[^\n]*", lambda m: " " * len(m.group()), text)


def _read_matrix(text: str, start: int) -> tuple[list[list[float]], int]:
    k = start
    if text[k] != "[":
        raise CaseSyntaxError("expected '['", *_pos(text, k))
    end = text.find("]", k)
    if end < 0:
        raise CaseSyntaxError("unterminated matrix", *_pos(text, k))
    rows: list[list[float]] = []
    row: list[float] = []
    k += 1
    while k < end:
        ch = text[k]
        if ch in " \t\r,":
            k += 1
        elif ch in ";\n":
            if row:
                rows.append(row)
                row = []
            k += 1
        else:
            m = _NUMBER.match(text, k)
            if not m or m.end() > end:
                raise CaseSyntaxError(f"unexpected character {ch!r}", *_pos(text, k))
            row.append(float(m.group()))
            k = m.end()
    if row:
        rows.append(row)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise CaseSyntaxError("ragged matrix rows", *_pos(text, start))
    return rows, end + 1


def _parse_matpower(text: str, name: str, theta_delta_max: float) -> NetworkCase:
    clean = _strip_comments(text)
    tables: dict[str, object] = {}
    for m in _ASSIGN.finditer(clean):
        key = m.group(1)
        k = m.end()
        if k < len(clean) and clean[k] == "[":
            tables[key], _ = _read_matrix(clean, k)
        else:
            stop = clean.find(";", k)
            raw = clean[k:stop if stop >= 0 else len(clean)].strip()
            if key == "baseMVA":
                try:
                    tables[key] = float(raw)
                except ValueError:
                    raise CaseSyntaxError(f"bad baseMVA value {raw!r}", *_pos(clean, k)) from None
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in tables:
            raise CaseSemanticError(f"missing mpc.{key}", "document")
    base = float(tables["baseMVA"])
    buses, loads, shunts = [], [], []
    for r in tables["bus"]:
        if len(r) < 13:
            raise CaseSemanticError("bus table needs 13 columns", "bus")
        bid = int(r[0])
        if int(r[1]) == 4:  # isolated bus type
            continue
        buses.append(Bus(bid, r[12], r[11]))
        if r[2] != 0 or r[3] != 0:
            loads.append(Load(bid, r[2] / base, r[3] / base))
        if r[4] != 0 or r[5] != 0:
            shunts.append(Shunt(bid, r[4] / base, r[5] / base))
    gens = []
    for r in tables["gen"]:
        if len(r) < 10:
            raise CaseSemanticError("gen table needs at least 10 columns", "gen")
        if r[7] <= 0:
            continue
        gens.append(Generator(int(r[0]), r[8] / base, r[4] / base, r[3] / base))
    risk_rows = tables.get("line_risk")
    risks = None
    if risk_rows is not None:
        risks = [v for row in risk_rows for v in row]
    lines = []
    branch_rows = tables["branch"]
    if risks is not None and len(risks) != len(branch_rows):
        raise CaseSemanticError("line_risk length differs from branch count", "line_risk")
    for k, r in enumerate(branch_rows):
        if len(r) < 13:
            raise CaseSemanticError("branch table needs 13 columns", f"line[{k + 1}]")
        if r[10] <= 0:
            continue
        rs, xs, bc = r[2], r[3], r[4]
        zz = rs * rs + xs * xs
        if zz == 0:
            raise CaseSemanticError("zero series impedance", f"line[{k + 1}]")
        ratio = r[8] if r[8] != 0 else 1.0
        shift = math.radians(r[9])
        amin, amax = math.radians(r[11]), math.radians(r[12])
        if abs(amin + amax) > 1e-12:
            raise CaseSemanticError("asymmetric angle bounds", f"line[{k + 1}]")
        lines.append(Line(
            id=k + 1, from_bus=int(r[0]), to_bus=int(r[1]),
            g=rs / zz, b=-xs / zz, g_fr=0.0, g_to=0.0, b_fr=bc / 2, b_to=bc / 2,
            tap_mag=ratio, tap_re=ratio * math.cos(shift), tap_im=ratio * math.sin(shift),
            thermal=r[5] / base, theta_min=amin, theta_max=amax,
            risk=1.0 if risks is None else float(risks[k]),
        ))
    return _check(_assemble(name, base, buses, lines, gens, loads, shunts, theta_delta_max))


def parse_case(text: str, name: str = "case", theta_delta_max: float = DEFAULT_THETA_DELTA_MAX
               ) -> NetworkCase:
    """Parse either the canonical JSON document or a MATPOWER-subset file."""
    if text.lstrip().startswith("{"):
        return _parse_json(text, name, theta_delta_max)
    if "mpc." in text:
        return _parse_matpower(text, name, theta_delta_max)
    line, col = 1, 1
    stripped = text.lstrip()
    if stripped:
        line, col = _pos(text, len(text) - len(stripped))
    raise CaseSyntaxError("document is neither JSON nor a MATPOWER case", line, col)


def load_case(path: str | Path, theta_delta_max: float = DEFAULT_THETA_DELTA_MAX) -> NetworkCase:
    """Read a case file; bare names like ``case14`` resolve to bundled cases."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_case_path(str(path))
        if bundled is None:
            raise FileNotFoundError(f"case file not found: {path}")
        p = bundled
    return parse_case(p.read_text(), name=p.stem, theta_delta_max=theta_delta_max)


def bundled_case_path(name: str) -> Path | None:
    data = Path(__file__).parent / "data"
    for cand in (data / name, data / f"{name}.json", data / f"{name}.m"):
        if cand.is_file():
            return cand
    return None


def case_equal(a: NetworkCase, b: NetworkCase) -> bool:
    """Field-wise exact comparison of the stored components."""
    if (a.base_mva, a.theta_delta_max) != (b.base_mva, b.theta_delta_max):
        return False
    for name in ("buses", "lines", "generators", "loads", "shunts"):
        if getattr(a, name) != getattr(b, name):
            return False
    return True


def with_risk(case: NetworkCase, risk: Iterable[float]) -> NetworkCase:
    """Copy of ``case`` with per-line base risk replaced."""
    from dataclasses import replace

    lines = tuple(replace(ln, risk=float(r)) for ln, r in zip(case.lines, risk, strict=True))
    kw = {f.name: getattr(case, f.name) for f in fields(case) if f.init}
    kw["lines"] = lines
    return NetworkCase(**kw)
