"""Experiment configuration as flat ``section.key = value`` text.

Blank lines and ``#`` comments are ignored. Unknown keys are an error so a
typo never silently falls back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import PartitionSpec
from .model import ModelConfig
from .protocols import ConfigError, FLConfig, Protocol


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    data_source: str = "synthetic"
    households: int = 2
    days: int = 365
    csv_path: str = ""
    window_stride: int = 24
    # partition
    partition_mode: str = "homogeneous"
    num_clients: int = 5
    client_fraction: float = 0.20
    train_fraction: float = 0.70
    off_threshold: float = 0.01
    # model
    num_layers: int = 2
    hidden_size: int = 16
    window_len: int = 24
    weather_features: bool = True
    # training
    train_mode: str = "federated"
    lr: float = 0.1
    lr_decay: float = 1.0
    steps: int = 200
    protocol: str = "fedavg"
    rounds: int = 20
    local_epochs: int = 2
    eta: float = 0.1
    mu: float = 1e-4
    p: float = 0.33
    lam: float = 1.0
    client_sampling: str = "full"
    l2gd_stop: str = "steps"
    batch_size: int = 0
    workers: int = 1
    optimizer: str = "adam"

    def __post_init__(self):
        if self.data_source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be synthetic or csv, got {self.data_source!r}")
        if self.data_source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path is required when data.source=csv")
        if self.train_mode not in ("federated", "centralized"):
            raise ConfigError(f"train.mode must be federated or centralized, got {self.train_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.train_mode == "centralized":
            if self.steps < 0:
                raise ConfigError(f"train.steps must be >= 0, got {self.steps}")
            if self.lr < 0:
                raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
            if not 0.0 < self.lr_decay <= 1.0:
                raise ConfigError(f"train.lr_decay must be in (0, 1], got {self.lr_decay}")
        try:
            self.partition_spec()
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.train_mode == "federated":
            self.fl_config()

    @property
    def num_input_features(self) -> int:
        return 3 if self.weather_features else 1

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition_mode, self.num_clients, self.client_fraction,
                             self.train_fraction, self.off_threshold, self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.num_layers, self.hidden_size, self.window_len,
                           self.num_input_features, 12, self.seed)

    def fl_config(self) -> FLConfig:
        return FLConfig(
            protocol=Protocol.parse(self.protocol), K=self.num_clients, T=self.rounds,
            E=self.local_epochs, eta=self.eta, mu=self.mu if self.protocol == "fedprox" else 0.0,
            p=self.p, lam=self.lam, seed=self.seed, client_sampling=self.client_sampling,
            l2gd_stop=self.l2gd_stop, batch_size=self.batch_size, workers=self.workers,
            optimizer=self.optimizer,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, attr in KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, attr))}")
        return "\n".join(lines) + "\n"


# config-file key -> dataclass attribute
KEYS = {
    "seed": "seed",
    "data.source": "data_source",
    "data.households": "households",
    "data.days": "days",
    "data.csv_path": "csv_path",
    "data.window_stride": "window_stride",
    "partition.mode": "partition_mode",
    "partition.num_clients": "num_clients",
    "partition.client_fraction": "client_fraction",
    "partition.train_fraction": "train_fraction",
    "partition.off_threshold": "off_threshold",
    "model.num_layers": "num_layers",
    "model.hidden_size": "hidden_size",
    "model.window_len": "window_len",
    "features.weather": "weather_features",
    "train.mode": "train_mode",
    "train.lr": "lr",
    "train.lr_decay": "lr_decay",
    "train.steps": "steps",
    "fl.protocol": "protocol",
    "fl.rounds": "rounds",
    "fl.local_epochs": "local_epochs",
    "fl.eta": "eta",
    "fl.mu": "mu",
    "fl.p": "p",
    "fl.lambda": "lam",
    "fl.client_sampling": "client_sampling",
    "fl.l2gd_stop": "l2gd_stop",
    "fl.batch_size": "batch_size",
    "fl.workers": "workers",
    "train.optimizer": "optimizer",
}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, attr: str, raw: str) -> Any:
    kind = _TYPES[attr]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[KEYS[key]] = _parse_value(key, KEYS[key], raw)
    return replace(base or ExperimentConfig(), **values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
