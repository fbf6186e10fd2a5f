"""CSV tables behind the comparison tables and figures, merged over bench runs."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

MODELS = ("I", "II", "III")


def _num(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "bench.json").read_text())
    with open(run_dir / "samples.csv") as fh:
        doc["samples"] = list(csv.DictReader(fh))
    return doc


def sign(v: float, tol: float = 1e-9) -> int:
    return 0 if abs(v) <= tol else (1 if v > 0 else -1)


def write_report(run_dirs, out) -> list[Path]:
    """Emit the per-model tables, timing, and figure point files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = sorted((load_run(d) for d in run_dirs), key=lambda r: (r["case"], r["width"], r["seed"]))
    written = []
    for m in MODELS:
        rows = []
        for r in runs:
            row = next(x for x in r["compare"] if x["model"] == m)
            rows.append([r["case"], r["width"], r["seed"], _num(row["optimized"]),
                         _num(row["sampled_max"]), _num(row["ratio"])])
        p = out / f"table_model{m}.csv"
        _write(p, ["case", "width", "seed", "optimized", "sampled_max", "ratio"], rows)
        written.append(p)
    rows = [[r["case"], r["width"], r["seed"], t["model"], _num(t["optimized_s"]),
             _num(t["sampled_s"])] for r in runs for t in r["timing"]]
    p = out / "timing.csv"
    _write(p, ["case", "width", "seed", "model", "optimized_s", "sampled_s"], rows)
    written.append(p)

    rows = []
    for r in runs:
        for s in r["samples"]:
            if s["rejected"] == "1":
                continue
            rows.append([r["case"], r["width"], r["seed"], "sample", s["sample"],
                         s["shed_I"], s["shed_II"], s["shed_III"]])
        opt = r["optimized"]["shed"]
        rows.append([r["case"], r["width"], r["seed"], "bound", "",
                     _num(opt["I"]), _num(opt["II"]), _num(opt["III"])])
    p = out / "fig3_points.csv"
    _write(p, ["case", "width", "seed", "kind", "sample", "shed_I", "shed_II", "shed_III"], rows)
    written.append(p)

    # loading pattern at the adversarial point relative to the nominal loads
    for fname, key, base in (("fig4_pd.csv", "p_d", "p_base"), ("fig5_qd.csv", "q_d", "q_base")):
        rows = []
        for r in runs:
            star = np.asarray(r["optimized"]["gamma"][key], float)
            nom = np.asarray(r["nominal"][base], float)
            for k, (bus, g0, g1) in enumerate(zip(r["load_buses"], nom, star)):
                rows.append([r["case"], r["width"], r["seed"], k, bus, _num(g0), _num(g1),
                             _num(g1 - g0), sign(g1 - g0)])
        p = out / fname
        _write(p, ["case", "width", "seed", "load", "bus", "nominal", "optimized", "delta",
                   "sign"], rows)
        written.append(p)
    return written


def loading_observation(out) -> dict:
    """Share of loads pushed up (P) and down (Q) at the adversarial point."""
    res = {}
    for fname, key in (("fig4_pd.csv", "p"), ("fig5_qd.csv", "q")):
        with open(Path(out) / fname) as fh:
            signs = [int(r["sign"]) for r in csv.DictReader(fh)]
        n = max(len(signs), 1)
        res[f"{key}_up"] = sum(s > 0 for s in signs) / n
        res[f"{key}_down"] = sum(s < 0 for s in signs) / n
    return res
