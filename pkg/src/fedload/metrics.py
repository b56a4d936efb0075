"""Disaggregation error metrics and per-client reports.

All functions take arrays whose last axis indexes appliances (or any slice of
cells); they are computed over every cell given.

* MAE  = mean |yhat - y|
* RMSE = sqrt(mean (yhat - y)^2)
* Eacc = 1 - sum |yhat - y| / (2 sum y)
* NDE  = sum (yhat - y)^2 / sum y^2
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

METRICS = ("eacc", "rmse", "mae", "nde")
HIGHER_IS_BETTER = {"eacc": True, "rmse": False, "mae": False, "nde": False}


class UndefinedMetricError(ValueError):
    """The metric's denominator is zero for this slice."""


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty slice")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def eacc(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    total = truth.sum()
    if total == 0:
        raise UndefinedMetricError("estimation accuracy undefined: true energy sums to zero")
    return float(1.0 - np.abs(pred - truth).sum() / (2.0 * total))


def nde(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    denom = np.sum(truth ** 2)
    if denom == 0:
        raise UndefinedMetricError("NDE undefined: true load is zero everywhere")
    return float(np.sum((pred - truth) ** 2) / denom)


_FUNCS = {"mae": mae, "rmse": rmse, "eacc": eacc, "nde": nde}


def _all(pred, truth) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for name, fn in _FUNCS.items():
        try:
            out[name] = fn(pred, truth)
        except UndefinedMetricError:
            out[name] = None
    return out


@dataclass
class MetricsReport:
    """Metrics for one evaluation slice (a client, or everything pooled).

    ``per_appliance`` maps appliance name to metric values; ``overall`` is
    computed on all pooled cells. Undefined values are ``None``.
    """

    per_appliance: dict[str, dict[str, float | None]]
    overall: dict[str, float | None]
    num_windows: int
    energy: dict[str, float] = field(default_factory=dict)
    num_cells: int = 0      # timesteps per appliance column

    @classmethod
    def compute(cls, pred, truth, appliances: Sequence[str]) -> "MetricsReport":
        pred, truth = _pair(pred, truth)
        if pred.shape[-1] != len(appliances):
            raise ValueError(f"{pred.shape[-1]} appliance columns but {len(appliances)} names")
        p2 = pred.reshape(-1, len(appliances))
        t2 = truth.reshape(-1, len(appliances))
        per = {a: _all(p2[:, j], t2[:, j]) for j, a in enumerate(appliances)}
        report = cls(
            per_appliance=per,
            overall=_all(p2, t2),
            num_windows=int(np.prod(pred.shape[:-2])) if pred.ndim >= 3 else 1,
            energy={a: float(t2[:, j].sum()) for j, a in enumerate(appliances)},
            num_cells=p2.shape[0],
        )
        report.check_pooled_eacc()
        return report

    def check_pooled_eacc(self, tol: float = 1e-9) -> None:
        """Overall Eacc must equal the energy-weighted recombination of per-appliance Eacc."""
        if self.overall["eacc"] is None:
            return
        cells = self.num_cells
        if not cells:
            return
        abs_err = 0.0
        energy = 0.0
        for a, m in self.per_appliance.items():
            e = self.energy.get(a, 0.0)
            if m["eacc"] is not None:
                abs_err += (1.0 - m["eacc"]) * 2.0 * e
            else:
                # zero true energy: Eacc is undefined but the error still counts
                abs_err += m["mae"] * cells
            energy += e
        pooled = 1.0 - abs_err / (2.0 * energy)
        if not math.isclose(pooled, self.overall["eacc"], rel_tol=0, abs_tol=tol):
            raise AssertionError(f"pooled Eacc {pooled} != overall {self.overall['eacc']}")

    def to_dict(self) -> dict:
        return {
            "num_windows": self.num_windows,
            "overall": self.overall,
            "per_appliance": self.per_appliance,
            "energy_kwh": self.energy,
            "num_cells": self.num_cells,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(dict(d["per_appliance"]), dict(d["overall"]), int(d["num_windows"]),
                   dict(d.get("energy_kwh", {})), int(d.get("num_cells", 0)))


@dataclass
class RunReport:
    """Per-client reports plus the two flavours of "average"."""

    clients: dict[str, MetricsReport]
    pooled: MetricsReport

    def client_mean(self) -> dict[str, float | None]:
        out = {}
        for m in METRICS:
            vals = [r.overall[m] for r in self.clients.values()]
            out[m] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        return {
            "clients": {k: v.to_dict() for k, v in self.clients.items()},
            "average_client_mean": self.client_mean(),
            "average_pooled": self.pooled.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        return cls({k: MetricsReport.from_dict(v) for k, v in d["clients"].items()},
                   MetricsReport.from_dict(d["average_pooled"]))

    def rows(self) -> list[tuple[str, dict[str, float | None]]]:
        """Table rows: each client, then client-mean and pooled averages."""
        out = [(name, r.overall) for name, r in self.clients.items()]
        out.append(("average", self.client_mean()))
        out.append(("pooled", self.pooled.overall))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["client", *METRICS])
        for name, vals in self.rows():
            w.writerow([name, *("" if vals[m] is None else repr(vals[m]) for m in METRICS)])
        return buf.getvalue()
