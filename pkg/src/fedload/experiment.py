"""End-to-end runs: data, partition, training, evaluation and run-directory output."""
from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import (APPLIANCES, ClientShard, MeterData, NormStats, WindowSet, apply_norm,
                   fit_norm_stats, generate_synthetic, ingest_csv, make_windows, partition)
from .metrics import MetricsReport, RunReport
from .model import build_model, predict, save_checkpoint
from .params import ParamSet
from .protocols import (ClientState, ProtocolResult, RoundLog, centralized, logs_to_csv,
                        loss_curve, run_protocol)


def load_series(cfg: ExperimentConfig) -> list[MeterData]:
    if cfg.data_source == "synthetic":
        return generate_synthetic(cfg.households, cfg.days, cfg.seed)
    path = Path(cfg.csv_path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no CSV files under {path}")
    return [ingest_csv(f).data for f in files]


@dataclass
class PreparedData:
    windows: WindowSet
    shards: list[ClientShard]
    stats: NormStats
    x: np.ndarray          # normalized inputs, feature-selected
    y: np.ndarray          # normalized targets


def prepare(cfg: ExperimentConfig, series: Sequence[MeterData] | None = None) -> PreparedData:
    series = load_series(cfg) if series is None else series
    windows = make_windows(series, cfg.window_len, cfg.window_stride)
    shards = partition(windows, cfg.partition_spec())
    train_idx = np.concatenate([s.train for s in shards])
    stats = fit_norm_stats(windows.subset(train_idx))
    norm = apply_norm(windows, stats)
    x = norm.x[..., : cfg.num_input_features]
    return PreparedData(windows, shards, stats, x, norm.y)


@dataclass
class RunResult:
    config: ExperimentConfig
    report: RunReport
    curve: list[tuple[int, int, float]]
    client_params: dict[int, ParamSet]
    logs: list[RoundLog] = field(default_factory=list)
    param_bytes: int = 0

    @property
    def aggregations(self) -> int:
        return sum(1 for lg in self.logs if lg.event == "AGGREGATE")


def evaluate(data: PreparedData, client_params: dict[int, ParamSet]) -> RunReport:
    reports = {}
    preds, truths = [], []
    for shard in data.shards:
        idx = shard.test
        pred = data.stats.denormalize_targets(predict(data.x[idx], client_params[shard.client_id]))
        pred = np.maximum(pred, 0.0)
        truth = data.windows.targets[idx]
        reports[f"client_{shard.client_id}"] = MetricsReport.compute(pred, truth, APPLIANCES)
        preds.append(pred)
        truths.append(truth)
    pooled = MetricsReport.compute(np.concatenate(preds), np.concatenate(truths), APPLIANCES)
    return RunReport(reports, pooled)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   series: Sequence[MeterData] | None = None) -> RunResult:
    data = prepare(cfg, series)
    init = build_model(cfg.model_config())
    logs: list[RoundLog] = []
    if cfg.train_mode == "centralized":
        idx = np.concatenate([s.train for s in data.shards])
        w, losses = centralized(data.x[idx], data.y[idx], init, cfg.lr, cfg.steps, cfg.optimizer,
                                lr_decay=cfg.lr_decay)
        client_params = {s.client_id: w for s in data.shards}
        curve = [(i, 0, loss) for i, loss in enumerate(losses)]
    else:
        clients = [ClientState(s.client_id, init, data.x[s.train], data.y[s.train]) for s in data.shards]
        result: ProtocolResult = run_protocol(cfg.fl_config(), clients, init)
        client_params = {c.id: p for c, p in zip(clients, result.client_params)}
        logs = result.logs
        curve = loss_curve(logs)
    report = evaluate(data, client_params)
    res = RunResult(cfg, report, curve, client_params, logs, init.nbytes)
    if out_dir is not None:
        write_run(res, data, Path(out_dir))
    return res


def write_run(res: RunResult, data: PreparedData, out: Path) -> None:
    cfg = res.config
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    meta = {
        "seed": cfg.seed,
        "fedload": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "appliances": list(APPLIANCES),
        "clients": [s.client_id for s in data.shards],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (out / "norm_stats.json").write_text(data.stats.to_json() + "\n")
    model_cfg = cfg.model_config()
    distinct = {id(p) for p in res.client_params.values()}
    if len(distinct) == 1:
        save_checkpoint(out / "model_global.flps", next(iter(res.client_params.values())), model_cfg)
    else:
        for cid, p in sorted(res.client_params.items()):
            save_checkpoint(out / f"model_client_{cid}.flps", p, model_cfg)
    ids = [s.client_id for s in data.shards]
    (out / "rounds.csv").write_text(logs_to_csv(res.logs, ids, res.param_bytes))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "aggregations", "loss"])
    for step, aggs, loss in res.curve:
        w.writerow([step, aggs, repr(loss)])
    (out / "loss_curve.csv").write_text(buf.getvalue())
    (out / "metrics.json").write_text(res.report.to_json() + "\n")
    (out / "metrics.csv").write_text(res.report.to_csv())
