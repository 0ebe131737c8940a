"""Command line entry point: ``weakid generate | train | report``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime abort.
Relative output paths are resolved against ``$WEAKID_OUTPUT_ROOT`` (default:
the working directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from weakid.data import PRESETS, SolverError, load_dataset, make_dataset, save_dataset
from weakid.library import DEFAULT_RHS, CoefficientVector, LibrarySpec, TermParseError, format_pde
from weakid.network import load_checkpoint
from weakid.trainer import PHASES, TrainConfig, TrainingAborted, run_training, write_report

log = logging.getLogger("weakid")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3

OUTPUT_ROOT_ENV = "WEAKID_OUTPUT_ROOT"

# sections of the run file that map onto TrainConfig fields
_NETWORK_KEYS = ("hidden_layers", "width")
_WEIGHT_KEYS = ("beta", "nodes_per_axis", "r_min", "r_max")


class ConfigError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_output(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


@dataclass
class RunConfig:
    datasets: list[str] = field(default_factory=list)
    lhs: str = "D_t U"
    rhs: list[str] = field(default_factory=lambda: list(DEFAULT_RHS))
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "run"

    def library(self) -> LibrarySpec:
        return LibrarySpec.from_strings(self.lhs, self.rhs)

    def to_dict(self) -> dict:
        t = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        return {
            "datasets": list(self.datasets),
            "library": {"lhs": self.lhs, "rhs": list(self.rhs)},
            "train": {k: v for k, v in t.items() if k not in _NETWORK_KEYS + _WEIGHT_KEYS + ("seed",)},
            "network": {k: t[k] for k in _NETWORK_KEYS},
            "weights": {k: t[k] for k in _WEIGHT_KEYS},
            "seed": t["seed"],
            "output_dir": self.output_dir,
        }


_KINDS = {"float": float, "int": int, "bool": bool, "str": str}


def _expect(value, kind: str, where: str):
    """Check ``value`` against a type tag: float, int, bool, str or "float | None"."""
    if kind == "float | None":
        return None if value is None else _expect(value, "float", where)
    if kind == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind == "float" and isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot, such as 1e-4, as strings
        try:
            return float(value)
        except ValueError:
            pass
    if kind == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    ok = isinstance(value, _KINDS[kind]) and not (kind in ("int", "float") and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {value!r}")
    return value


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _train_field(name: str, value, where: str):
    if name not in _TRAIN_TYPES:
        raise ConfigError(f"{where}: unknown field")
    return _expect(value, _TRAIN_TYPES[name], where)


def parse_run_config(raw: dict | None) -> RunConfig:
    """Validate a parsed YAML mapping; every missing field takes its default."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping")
    known = {"datasets", "library", "train", "network", "weights", "seed", "output_dir"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    cfg = RunConfig()
    ds = raw.get("datasets", [])
    if isinstance(ds, str):
        ds = [ds]
    if not isinstance(ds, list) or not all(isinstance(d, str) for d in ds):
        raise ConfigError("datasets: expected a list of file paths")
    cfg.datasets = ds
    lib = raw.get("library") or {}
    if not isinstance(lib, dict):
        raise ConfigError("library: expected a mapping")
    for key in lib:
        if key not in ("lhs", "rhs"):
            raise ConfigError(f"library.{key}: unknown field")
    cfg.lhs = _expect(lib.get("lhs", cfg.lhs), "str", "library.lhs")
    rhs = lib.get("rhs", cfg.rhs)
    if not isinstance(rhs, list) or not all(isinstance(t, str) for t in rhs):
        raise ConfigError("library.rhs: expected a list of term strings")
    cfg.rhs = rhs
    try:
        cfg.library()
    except (TermParseError, ValueError) as exc:
        raise ConfigError(f"library: {exc}") from exc

    values = {}
    for section, allowed in (("train", None), ("network", _NETWORK_KEYS), ("weights", _WEIGHT_KEYS)):
        block = raw.get(section) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key, value in block.items():
            where = f"{section}.{key}"
            if allowed is not None and key not in allowed:
                raise ConfigError(f"{where}: unknown field")
            if allowed is None and (key in _NETWORK_KEYS + _WEIGHT_KEYS or key == "seed"):
                raise ConfigError(f"{where}: belongs in another section")
            values[key] = _train_field(key, value, where)
    if "seed" in raw:
        values["seed"] = _expect(raw["seed"], "int", "seed")
    try:
        cfg.train = TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    cfg.output_dir = _expect(raw.get("output_dir", cfg.output_dir), "str", "output_dir")
    return cfg


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    raw = dict(raw or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        value = yaml.safe_load(text)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"{key}: {part} is not a section")
            node[part] = dict(child)
            node = node[part]
        node[parts[-1]] = value
    return raw


def load_run_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_run_config(apply_overrides(raw, overrides or []))


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.preset not in PRESETS:
        print(f"unknown preset {args.preset!r}; choose from: {', '.join(sorted(PRESETS))}", file=sys.stderr)
        return EXIT_CONFIG
    if args.noise < 0 or args.n < 1:
        print("--n must be positive and --noise non-negative", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or f"data/{args.preset}_n{args.n}_q{args.noise:g}_s{args.seed}.csv"
    out = resolve_output(out)
    try:
        data, _, solution = make_dataset(args.preset, args.n, args.noise, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    paths = save_dataset(out, data, solution)
    print(f"sigma_nf = {data.provenance['sigma_nf']:.10g}")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, args.set)
        if args.out:
            cfg.output_dir = args.out
        if not cfg.datasets:
            raise ConfigError("datasets: at least one dataset path is required")
        base = Path(args.config).resolve().parent
        paths = [Path(p) if Path(p).is_absolute() else base / p for p in cfg.datasets]
        for p in paths:
            if not p.is_file():
                raise ConfigError(f"datasets: file not found: {p}")
        datasets = [load_dataset(p) for p in paths]
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_output(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["datasets"] = [str(p) for p in paths]
    (out / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=False))
    for stale in ("report.json", "report.txt", "history.json"):
        (out / stale).unlink(missing_ok=True)
    try:
        result = run_training(cfg.train, datasets, cfg.library(), out_dir=out, log_every=args.log_every)
    except TrainingAborted as exc:
        print(f"training aborted at epoch {exc.epoch}: {exc}; last good checkpoint: {exc.checkpoint}",
              file=sys.stderr)
        return EXIT_ABORT
    (out / "history.json").write_text(json.dumps(result.history) + "\n")
    write_report(out / "report.json", result, cfg.train, {"datasets": echo["datasets"]})
    (out / "report.txt").write_text(render_summary(json.loads((out / "report.json").read_text())))
    print(result.pde)
    return EXIT_OK


def render_summary(report: dict) -> str:
    lines = [report["pde"], "", f"{'term':<14} {'coefficient':>14}  active"]
    for row in report["coefficients"]:
        lines.append(f"{row['term']:<14} {row['value']:>14.6g}  {'yes' if row['active'] else 'no'}")
    lines.append("")
    for phase in PHASES:
        lines.append(f"{phase}: {report['epochs_per_phase'].get(phase, 0)} epochs")
    return "\n".join(lines) + "\n"


HISTORY_COLUMNS = ("epoch", "phase", "loss", "data", "weak", "lp", "active", "K")


def _history_from_log(path: Path) -> list[dict]:
    rows = []
    if not path.exists():
        return rows
    for line in path.read_text().splitlines():
        if not line.startswith("epoch="):
            continue
        rows.append(dict(item.split("=", 1) for item in line.split()))
    return rows


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir() or not any(run.iterdir()):
        print(f"error: {run} is not a run directory", file=sys.stderr)
        return EXIT_CONFIG
    report_path = run / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        history = json.loads((run / "history.json").read_text()) if (run / "history.json").exists() else []
        sys.stdout.write(render_summary(report))
    else:
        ckpt = run / "checkpoint_last_good.bin"
        if not ckpt.exists():
            print(f"error: {run} holds neither a report nor a checkpoint", file=sys.stderr)
            return EXIT_CONFIG
        print("warning: run did not complete; summarising the last checkpoint", file=sys.stderr)
        params, meta = load_checkpoint(ckpt)
        cfg = yaml.safe_load((run / "config.yaml").read_text()) if (run / "config.yaml").exists() else {}
        lib = cfg.get("library", {})
        library = LibrarySpec.from_strings(lib.get("lhs", "D_t U"), lib.get("rhs", list(DEFAULT_RHS)))
        xi = CoefficientVector(params["xi"], np.array(meta.get("xi_active", [True] * library.n_terms)))
        print(format_pde(library, xi))
        print(f"last checkpoint: epoch {meta.get('epoch')} ({meta.get('phase')})")
        history = _history_from_log(run / "epochs.log")
    table = run / "loss_history.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.get(c, "") for c in HISTORY_COLUMNS])
    print(f"loss history: {table}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakid", description="Weak-form PDE identification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="solve a benchmark PDE and write a noisy dataset")
    g.add_argument("preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    g.add_argument("--n", type=int, default=4000, help="number of samples")
    g.add_argument("--noise", type=float, default=0.25, help="noise level q")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="dataset path (CSV); a .json sidecar and .clean.npz dump go next to it")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="identify a PDE from one or more datasets")
    t.add_argument("config", help="YAML run file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.n_burn=500 (repeatable)")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--log-every", type=int, default=1, help="epoch log cadence")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="summarise a run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
