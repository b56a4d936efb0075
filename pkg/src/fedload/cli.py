"""``fedload generate|train|compare``.

Failures print one JSON line ``{"error": kind, "reason": text}`` on stderr and
exit with status 2 (bad input) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, KEYS, load_config, parse_config
from .data import SchemaError, generate_synthetic, write_csv
from .metrics import HIGHER_IS_BETTER, METRICS
from .protocols import ConfigError


class CliError(Exception):
    def __init__(self, kind: str, reason: str, status: int = 2):
        super().__init__(reason)
        self.kind, self.reason, self.status = kind, reason, status


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _claim_dir(out: Path, names: Sequence[str], force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise CliError("filesystem", f"{out} exists and is not a directory")
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise CliError("exists", f"{out / clash[0]} already exists; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("filesystem", f"cannot create {out}: {exc.strerror}") from None


def cmd_generate(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    names = [f"household_{h:03d}.csv" for h in range(1, cfg.households + 1)]
    _claim_dir(out, names, args.force)
    for name, series in zip(names, generate_synthetic(cfg.households, cfg.days, cfg.seed)):
        write_csv(series, out / name)
    print(json.dumps({"written": [str(out / n) for n in names]}))


RUN_FILES = ("config.txt", "meta.json", "metrics.json", "metrics.csv", "rounds.csv",
             "loss_curve.csv", "norm_stats.json")


def cmd_train(args) -> None:
    from .experiment import run_experiment

    cfg = _config(args)
    if cfg.data_source == "csv" and not Path(cfg.csv_path).exists():
        raise CliError("data", f"dataset not found: {cfg.csv_path}")
    out = Path(args.out)
    _claim_dir(out, RUN_FILES, args.force)
    res = run_experiment(cfg, out)
    print(json.dumps({"run": str(out), "average": res.report.client_mean()}))


def _load_run(path: Path) -> dict:
    f = path / "metrics.json"
    if not f.is_file():
        raise CliError("schema", f"{path} is not a run directory (no metrics.json)")
    try:
        return json.loads(f.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("schema", f"{f}: invalid JSON ({exc.msg})") from None


def _scopes(run: dict) -> dict[str, dict]:
    """Flatten a metrics report into ``scope -> {metric: value}``."""
    out = {name: rep["overall"] for name, rep in run["clients"].items()}
    out["average"] = run["average_client_mean"]
    out["pooled"] = run["average_pooled"]["overall"]
    for app, vals in run["average_pooled"]["per_appliance"].items():
        out[f"appliance:{app}"] = vals
    return out


def compare_table(runs: Sequence[tuple[str, dict]]) -> str:
    """Long-format CSV: ``scope,metric,run,value,delta_vs_first,best``."""
    if len(runs) < 2:
        raise CliError("usage", "compare needs at least two runs")
    flat = [(name, _scopes(r)) for name, r in runs]
    ref_name, ref = flat[0]
    for name, sc in flat[1:]:
        if set(sc) != set(ref):
            diff = sorted(set(sc) ^ set(ref))
            raise CliError("schema", f"{name} and {ref_name} have different clients/appliances: {diff}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scope", "metric", "run", "value", "delta_vs_first", "best"])
    for scope in ref:
        for m in METRICS:
            vals = [sc[scope].get(m) for _, sc in flat]
            known = [v for v in vals if v is not None]
            best = (max if HIGHER_IS_BETTER[m] else min)(known) if known else None
            first = vals[0]
            for (name, _), v in zip(flat, vals):
                delta = "" if v is None or first is None else repr(v - first)
                flag = int(v is not None and v == best)
                w.writerow([scope, m, name, "" if v is None else repr(v), delta, flag])
    return buf.getvalue()


def cmd_compare(args) -> None:
    runs = [(p, _load_run(Path(p))) for p in args.runs]
    table = compare_table(runs)
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise CliError("exists", f"{out} already exists; pass --force to overwrite")
        try:
            out.write_text(table)
        except OSError as exc:
            raise CliError("filesystem", f"cannot write {out}: {exc.strerror}") from None
    else:
        sys.stdout.write(table)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedload", description="Federated load disaggregation simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help=f"override one config key (repeatable); keys: {', '.join(KEYS)}")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    common(sub.add_parser("generate", help="write synthetic household CSV files"))
    common(sub.add_parser("train", help="run one experiment into a run directory"))
    p = sub.add_parser("compare", help="side-by-side metrics of two or more runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.add_argument("--force", action="store_true")
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "compare": cmd_compare}


def _fail(kind: str, reason: str, status: int) -> int:
    reason = " ".join(str(reason).split())
    print(json.dumps({"error": kind, "reason": reason}), file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, exc.reason, exc.status)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except SchemaError as exc:
        return _fail("schema", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("filesystem", f"{exc.filename or ''}: {exc.strerror or exc}", 2)
    except OSError as exc:
        return _fail("filesystem", f"{exc.filename or ''}: {exc.strerror or exc}", 1)
    except ValueError as exc:
        return _fail("value", str(exc), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
