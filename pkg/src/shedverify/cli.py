"""Command-line entry point: gen-data, train, verify, bench, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("shedverify")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# built-in defaults; a --config file overrides these and explicit flags override both
DEFAULTS = {
    "seed": 0,
    "n": 200,
    "alpha_lo": 0.25,
    "alpha_hi": 0.75,
    "width": 32,
    "epochs": 1000,
    "lr": 0.05,
    "batch": 4,
    "optimizer": "sgd",
    "restarts": 5,
    "samples": 100,
    "stage_tol": 5e-3,
    "conic_tol": 1e-8,
    "max_iter": 200,
    "keep_angle_limits": False,
    "keep_thermal_status": False,
    "mccormick_shunt": False,
    "jobs": 1,
    "allow_partial": False,
    "no_times": False,
}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON file with option values (flags take precedence)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-times", dest="no_times", action="store_const", const=True,
                   help="write zero wall-clock times so outputs are byte-reproducible")
    p.add_argument("-v", "--verbose", action="store_true")


def _verifier_flags(p):
    p.add_argument("--restarts", type=int)
    p.add_argument("--stage-tol", dest="stage_tol", type=float)
    p.add_argument("--conic-tol", dest="conic_tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--keep-angle-limits", dest="keep_angle_limits", action="store_const",
                   const=True, help="do not drop the angle limits from the dual")
    p.add_argument("--keep-thermal-status", dest="keep_thermal_status", action="store_const",
                   const=True, help="keep the status on the thermal cone in the dual")
    p.add_argument("--mccormick-shunt", dest="mccormick_shunt", action="store_const",
                   const=True, help="McCormick shunt model in the dual")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="shedverify", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="label scenarios with globally optimal switching")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--alpha-lo", dest="alpha_lo", type=float)
    p.add_argument("--alpha-hi", dest="alpha_hi", type=float)

    p = sub.add_parser("train", help="fit the switching proxy network")
    _common(p)
    p.add_argument("--data", required=True, help="dataset file or gen-data output directory")
    p.add_argument("--case", help="case (defaults to the one recorded by gen-data)")
    p.add_argument("--width", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=["sgd", "momentum", "adam"])

    p = sub.add_parser("verify", help="search for a high-shed loading against a network")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--nn", required=True)
    _verifier_flags(p)

    p = sub.add_parser("bench", help="random-sampling baseline next to the verifier")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--nn", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--result", help="reuse a verify result.json instead of re-running verify")
    p.add_argument("--jobs", type=int)
    p.add_argument("--allow-partial", dest="allow_partial", action="store_const", const=True)
    _verifier_flags(p)

    p = sub.add_parser("report", help="merge bench runs into CSV tables")
    _common(p)
    p.add_argument("--runs", nargs="+", required=True)
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file, and explicit flags (in that order)."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in doc.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "verbose"):
            cfg[k] = v
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    for key in ("stage_tol", "conic_tol", "lr"):
        if not float(cfg[key]) > 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("n", "width", "epochs", "batch", "restarts", "samples", "jobs", "max_iter"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not 0 <= cfg["alpha_lo"] <= cfg["alpha_hi"] <= 1:
        raise ConfigError("need 0 <= alpha-lo <= alpha-hi <= 1")
    return cfg


def _versions() -> dict:
    import clarabel
    import scipy

    return {"artifact": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "clarabel": clarabel.__version__}


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    canon = json.dumps(cfg, sort_keys=True, default=str)
    doc = {"command": command, "config": cfg,
           "config_hash": hashlib.sha256(canon.encode()).hexdigest(), "versions": _versions()}
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1, default=str)
                                       + "\n")


def _load_case(path):
    from .network import CaseSemanticError, CaseSyntaxError, load_case

    try:
        return load_case(path)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    except (CaseSyntaxError, CaseSemanticError) as exc:
        raise ConfigError(f"invalid case {path}: {exc}") from None


def _load_nn(path, case):
    from .nn import ModelFormatError, load

    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read network {path}: {exc}") from None
    try:
        return load(data, case)
    except ModelFormatError as exc:
        raise ConfigError(f"network {path}: {exc}") from None


def _verifier_config(cfg):
    from .verifier import VerifierConfig

    return VerifierConfig(drop_angle_limits=not cfg["keep_angle_limits"],
                          thermal_without_status=not cfg["keep_thermal_status"],
                          simple_shunt=not cfg["mccormick_shunt"], restarts=int(cfg["restarts"]),
                          seed=int(cfg["seed"]), stage_tol=float(cfg["stage_tol"]),
                          conic_tol=float(cfg["conic_tol"]), max_iter=int(cfg["max_iter"]))


# ---------------------------------------------------------------------- commands

def cmd_gen_data(cfg, out: Path) -> int:
    from .ops import generate_training_set, write_dataset

    case = _load_case(cfg["case"])
    try:
        records, rejected = generate_training_set(case, int(cfg["n"]),
                                                  (cfg["alpha_lo"], cfg["alpha_hi"]),
                                                  int(cfg["seed"]))
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_dataset(records, out / "dataset.jsonl")
    print(f"wrote {len(records)} samples to {out / 'dataset.jsonl'}; rejected {rejected}")
    return EXIT_OK


def _dataset_path(data) -> Path:
    p = Path(data)
    return p / "dataset.jsonl" if p.is_dir() else p


def cmd_train(cfg, out: Path) -> int:
    from .nn import TrainConfig, TrainingDiverged, train_for_case
    from .ops import read_dataset

    path = _dataset_path(cfg["data"])
    case_ref = cfg.get("case")
    if not case_ref:
        man = path.parent / "manifest.json"
        if not man.is_file():
            raise ConfigError("--case is required when the dataset has no gen-data manifest")
        case_ref = json.loads(man.read_text())["config"]["case"]
    case = _load_case(case_ref)
    try:
        records = read_dataset(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from None
    if not records:
        raise ConfigError(f"dataset {path} is empty")
    try:
        tc = TrainConfig(hidden=int(cfg["width"]), lr=float(cfg["lr"]),
                         epochs=int(cfg["epochs"]), batch=int(cfg["batch"]),
                         seed=int(cfg["seed"]), optimizer=cfg["optimizer"])
        model = train_for_case(records, case, tc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out / "model.json").write_bytes(model.save())
    print(f"final loss {model.meta['train']['final_loss']:.6g}; wrote {out / 'model.json'}")
    return EXIT_OK


def _summary_text(res, times: bool) -> str:
    lines = [f"dual objective (stage A): {res.dual_objective:.6f}"]
    for m in ("I", "II", "III"):
        lines.append(f"Model {m:<3} shed {res.shed[m]:.6f} p.u.  status {res.status[m]}"
                     + (f"  time {res.time_s.get(m, 0.0):.3f}s" if times else ""))
    lines.append("statuses z: " + "".join(str(int(v)) for v in res.z))
    if times:
        lines.append(f"stage A time {res.time_s.get('stage_a', 0.0):.3f}s")
    return "\n".join(lines) + "\n"


def _run_verify(case, nn, cfg):
    from .verifier import VerificationError, verify

    try:
        return verify(case, nn, _verifier_config(cfg))
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_verify(cfg, out: Path) -> int:
    case = _load_case(cfg["case"])
    nn = _load_nn(cfg["nn"], case)
    res = _run_verify(case, nn, cfg)
    if res is None:
        return EXIT_RUNTIME
    times = not cfg["no_times"]
    (out / "result.json").write_text(res.dumps(times) + "\n")
    text = _summary_text(res, times)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _result_from_json(doc, case):
    from .scenario import ScenarioInput
    from .verifier import VerificationResult

    def num(v):
        return float("nan") if v is None else float(v)

    return VerificationResult(ScenarioInput.from_dict(doc["gamma"]), np.asarray(doc["L"]),
                              np.asarray(doc["z"], float), num(doc["dual_obj"]),
                              {k: num(v) for k, v in doc["shed"].items()}, doc["status"],
                              doc["time_s"], doc.get("residuals", {}))


def _finite(obj):
    """Replace NaN/inf by null so the JSON stays strict."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def cmd_bench(cfg, out: Path) -> int:
    from .bench import compare, run_benchmark

    case = _load_case(cfg["case"])
    nn = _load_nn(cfg["nn"], case)
    times = not cfg["no_times"]
    if cfg.get("result"):
        try:
            res = _result_from_json(json.loads(Path(cfg["result"]).read_text()), case)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read result {cfg['result']}: {exc}") from None
    else:
        res = _run_verify(case, nn, cfg)
        if res is None:
            return EXIT_RUNTIME
        (out / "result.json").write_text(res.dumps(times) + "\n")
    run = run_benchmark(case, nn, int(cfg["samples"]), int(cfg["seed"]),
                        nn_id=Path(cfg["nn"]).stem, optimized=res, jobs=int(cfg["jobs"]))
    if not times:
        for r in run.records:
            r.time_s = {k: 0.0 for k in r.time_s}
        res.time_s = {k: 0.0 for k in res.time_s}
    rows, timing = compare(run)
    (out / "samples.csv").write_text(run.csv())
    doc = {"case": case.name, "width": nn.dims[1], "seed": int(cfg["seed"]),
           "summary": run.summary(), "compare": rows, "timing": timing,
           "optimized": res.to_json(times),
           "nominal": {"p_base": case.p_base.tolist(), "q_base": case.q_base.tolist()},
           "load_buses": [d.bus for d in case.loads]}
    (out / "bench.json").write_text(json.dumps(_finite(doc), sort_keys=True, indent=1)
                                      + "\n")
    for r in rows:
        print(f"Model {r['model']:<3} optimized {r['optimized']:.6f}  "
              f"sampled max {r['sampled_max']:.6f}  ratio {r['ratio']:.3f}")
    print(f"accepted {len(run.accepted)}, rejected {run.rejected}")
    if run.partial and not cfg["allow_partial"]:
        print("error: sampling budget exhausted (use --allow-partial to accept)", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(cfg, out: Path) -> int:
    from .report import loading_observation, write_report

    for d in cfg["runs"]:
        if not (Path(d) / "bench.json").is_file():
            raise ConfigError(f"{d} is not a bench output directory")
    for p in write_report(cfg["runs"], out):
        print(f"wrote {p}")
    obs = loading_observation(out)
    print(f"adversarial loading: P raised at {obs['p_up']:.0%} of loads, "
          f"Q lowered at {obs['q_down']:.0%}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "verify": cmd_verify,
            "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
