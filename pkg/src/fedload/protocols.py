"""FedAvg, FedProx and L2GD over in-process simulated clients.

Communication is not performed, only accounted: every AGGREGATE event moves
one serialized ParamSet up and one down per participating client.
"""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import optim, rng
from .model import loss_and_grad
from .params import GradSet, ParamSet, mean, weighted_sum


class ConfigError(ValueError):
    pass


class Protocol(str, Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    L2GD = "l2gd"

    @classmethod
    def parse(cls, value: "str | Protocol") -> "Protocol":
        if isinstance(value, Protocol):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown protocol {value!r}; expected fedavg, fedprox or l2gd") from None


@dataclass(frozen=True)
class FLConfig:
    protocol: Protocol = Protocol.FEDAVG
    K: int = 5
    T: int = 20
    E: int = 2
    eta: float = 0.1
    mu: float = 0.0
    p: float = 0.33
    lam: float = 0.0
    seed: int = 0
    client_sampling: str = "full"      # "full" or "bernoulli"
    l2gd_stop: str = "steps"           # "steps" or "aggregations"
    batch_size: int = 0                # 0: full batch
    workers: int = 1
    optimizer: str = "sgd"             # local solver: "sgd" or "adam"

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol.parse(self.protocol))
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if self.E < 1:
            raise ConfigError(f"E must be >= 1, got {self.E}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.client_sampling not in ("full", "bernoulli"):
            raise ConfigError(f"client_sampling must be full or bernoulli, got {self.client_sampling!r}")
        if self.l2gd_stop not in ("steps", "aggregations"):
            raise ConfigError(f"l2gd_stop must be steps or aggregations, got {self.l2gd_stop!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0, got {self.batch_size}")
        needs_p = self.protocol is Protocol.L2GD or self.client_sampling == "bernoulli"
        if needs_p and not 0.0 < self.p < 1.0:
            raise ConfigError(f"p must be in (0, 1), got {self.p}")
        if self.protocol is Protocol.L2GD and self.mixing > 1.0:
            raise ConfigError(
                f"L2GD mixing coefficient eta*lambda/(K*p) = {self.mixing:.6g} exceeds 1"
            )

    @property
    def mixing(self) -> float:
        """L2GD's ``eta * lambda / (K * p)``."""
        return self.eta * self.lam / (self.K * self.p)

    @property
    def local_lr(self) -> float:
        if self.protocol is Protocol.L2GD:
            return self.eta * self.K / (1.0 - self.p)
        return self.eta


@dataclass
class ClientState:
    id: int
    params: ParamSet
    x: np.ndarray          # training windows (N, T, F)
    y: np.ndarray          # targets (N, T, A)
    gamma: float = 0.0
    solver: object = None  # local optimizer state, kept across rounds

    @property
    def size(self) -> int:
        return len(self.x)


@dataclass
class RoundLog:
    round: int
    event: str                                  # "LOCAL" or "AGGREGATE"
    losses: dict[int, float] = field(default_factory=dict)
    bytes_up: int = 0
    bytes_down: int = 0
    wall_time: float = 0.0
    retries: int = 0

    @property
    def mean_loss(self) -> float | None:
        return float(np.mean(list(self.losses.values()))) if self.losses else None


def set_gammas(clients: Sequence[ClientState]) -> None:
    """``gamma_i = |D_i| / |D|`` over the given clients."""
    total = sum(c.size for c in clients)
    if total == 0:
        raise ValueError("clients hold no training data")
    for c in clients:
        if c.size == 0:
            raise ValueError(f"client {c.id} has an empty shard")
        c.gamma = c.size / total


# -- local training ----------------------------------------------------------------

GradFn = Callable[[ParamSet, tuple[np.ndarray, np.ndarray]], tuple[float, GradSet]]


def _batches(client: ClientState, cfg: FLConfig, gen: np.random.Generator | None):
    if cfg.batch_size == 0 or cfg.batch_size >= client.size:
        yield client.x, client.y
        return
    order = gen.permutation(client.size)
    for start in range(0, client.size, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        yield client.x[idx], client.y[idx]


def local_update(start: ParamSet, client: ClientState, cfg: FLConfig, *,
                 anchor: ParamSet | None = None, lr: float | None = None,
                 epoch_offset: int = 0, grad_fn: GradFn = loss_and_grad) -> tuple[ParamSet, list[float]]:
    """``E`` epochs of gradient descent on the client's shard.

    With ``anchor`` and ``cfg.mu``, the proximal gradient ``mu (w - anchor)``
    is added to the data gradient. Returns the new parameters and the
    pre-step loss of every step taken.
    """
    lr = cfg.local_lr if lr is None else lr
    if client.solver is None:
        client.solver = optim.make(cfg.optimizer)
    w = start
    losses = []
    for epoch in range(cfg.E):
        gen = None
        if cfg.batch_size:
            gen = rng.stream(cfg.seed, f"client:{client.id}:epoch:{epoch_offset + epoch}")
        for batch in _batches(client, cfg, gen):
            loss, grad = grad_fn(w, batch)
            if anchor is not None:
                grad = grad.axpy(cfg.mu, w - anchor)
            w = client.solver.step(w, grad, lr)
            losses.append(loss)
    return w, losses


def fedprox_local_update(w_global: ParamSet, client: ClientState, cfg: FLConfig,
                         grad_fn: GradFn = loss_and_grad) -> ParamSet:
    """Local update on ``L(w) + mu/2 ||w_global - w||^2``."""
    return local_update(w_global, client, cfg, anchor=w_global, grad_fn=grad_fn)[0]


def _map_clients(fn, clients, workers: int):
    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


# -- FedAvg / FedProx -----------------------------------------------------------------

def aggregate(params: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    return weighted_sum(params, weights)


def _select(clients: Sequence[ClientState], cfg: FLConfig, gen: np.random.Generator):
    if cfg.client_sampling == "full":
        return list(clients), 0
    # draw in id order so the selection does not depend on list position
    ordered = sorted(clients, key=lambda c: c.id)
    retries = 0
    while True:
        chosen = [c for c in ordered if gen.random() < cfg.p]
        if chosen:
            return chosen, retries
        retries += 1


def fedavg_round(server: ParamSet, clients: Sequence[ClientState], cfg: FLConfig,
                 round_index: int = 0, gen: np.random.Generator | None = None,
                 grad_fn: GradFn = loss_and_grad) -> tuple[ParamSet, list[RoundLog]]:
    """One communication round of FedAvg (or FedProx when ``cfg.protocol`` says so).

    Selected clients train from the global model; the server replaces it by
    the data-weighted average of their results. Client ``params`` are updated
    in place with their local results.
    """
    t0 = time.perf_counter()
    for c in clients:
        server.check_compatible(c.params)
    gen = gen or rng.stream(cfg.seed, f"server:round:{round_index}")
    chosen, retries = _select(clients, cfg, gen)
    chosen = sorted(chosen, key=lambda c: c.id)
    anchor = server if cfg.protocol is Protocol.FEDPROX else None

    def work(c):
        return local_update(server, c, cfg, anchor=anchor, epoch_offset=round_index * cfg.E, grad_fn=grad_fn)

    results = _map_clients(work, chosen, cfg.workers)
    total = sum(c.size for c in chosen)
    weights = [c.size / total for c in chosen]
    for c, (w, _) in zip(chosen, results):
        c.params = w
    new_server = aggregate([w for w, _ in results], weights)
    nbytes = len(chosen) * server.nbytes
    log = RoundLog(
        round_index, "AGGREGATE",
        losses={c.id: float(np.mean(ls)) for c, (_, ls) in zip(chosen, results)},
        bytes_up=nbytes, bytes_down=nbytes,
        wall_time=time.perf_counter() - t0, retries=retries,
    )
    return new_server, [log]


# -- L2GD ------------------------------------------------------------------------------

def l2gd_step(clients: Sequence[ClientState], server: ParamSet, cfg: FLConfig,
              gen: np.random.Generator, step_index: int = 0,
              grad_fn: GradFn = loss_and_grad) -> tuple[list[ClientState], ParamSet, RoundLog]:
    """One L2GD step: with probability ``p`` mix every client toward the
    client average, otherwise take ``E`` local epochs at step size
    ``eta * K / (1 - p)``. Clients are updated in place and also returned.
    """
    t0 = time.perf_counter()
    ordered = sorted(clients, key=lambda c: c.id)
    xi = gen.random() < cfg.p
    if not xi:
        def work(c):
            return local_update(c.params, c, cfg, epoch_offset=step_index * cfg.E, grad_fn=grad_fn)

        results = _map_clients(work, ordered, cfg.workers)
        for c, (w, _) in zip(ordered, results):
            c.params = w
        log = RoundLog(step_index, "LOCAL",
                       losses={c.id: float(np.mean(ls)) for c, (_, ls) in zip(ordered, results)},
                       wall_time=time.perf_counter() - t0)
        return list(clients), server, log

    avg = mean([c.params for c in ordered])
    a = cfg.mixing
    if a != 0.0:
        for c in ordered:
            c.params = weighted_sum([c.params, avg], [1.0 - a, a])
    nbytes = len(ordered) * avg.nbytes
    log = RoundLog(step_index, "AGGREGATE", bytes_up=nbytes, bytes_down=nbytes,
                   wall_time=time.perf_counter() - t0)
    return list(clients), avg, log


# -- driver ------------------------------------------------------------------------------

@dataclass
class ProtocolResult:
    client_params: list[ParamSet]      # input order; the global model for FedAvg/FedProx
    server_params: ParamSet
    logs: list[RoundLog]

    @property
    def aggregations(self) -> int:
        return sum(1 for lg in self.logs if lg.event == "AGGREGATE")

    @property
    def bytes_total(self) -> int:
        return sum(lg.bytes_up + lg.bytes_down for lg in self.logs)


def run_protocol(cfg: FLConfig, clients: Sequence[ClientState], init: ParamSet,
                 grad_fn: GradFn = loss_and_grad,
                 callback: Callable[[RoundLog], None] | None = None) -> ProtocolResult:
    """Run ``T`` rounds (FedAvg/FedProx) or ``T`` steps (L2GD).

    With ``l2gd_stop="aggregations"`` L2GD instead runs until ``T`` aggregation
    events have happened, so it can be compared at an equal communication
    budget.
    """
    if len(clients) != cfg.K:
        raise ConfigError(f"FLConfig.K={cfg.K} but {len(clients)} clients were given")
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids {ids}")
    set_gammas(clients)
    for c in clients:
        init.check_compatible(c.params)
        c.params = init
        c.solver = None
    logs: list[RoundLog] = []
    server = init

    def emit(lg):
        logs.append(lg)
        if callback:
            callback(lg)

    if cfg.protocol is Protocol.L2GD:
        gen = rng.stream(cfg.seed, "xi")
        step = aggs = 0
        cap = 1000 * max(cfg.T, 1)
        while (step < cfg.T) if cfg.l2gd_stop == "steps" else (aggs < cfg.T and step < cap):
            _, server, lg = l2gd_step(clients, server, cfg, gen, step, grad_fn=grad_fn)
            aggs += lg.event == "AGGREGATE"
            emit(lg)
            step += 1
        return ProtocolResult([c.params for c in clients], server, logs)

    gen = rng.stream(cfg.seed, "server")
    for t in range(cfg.T):
        server, round_logs = fedavg_round(server, clients, cfg, t, gen, grad_fn=grad_fn)
        for lg in round_logs:
            emit(lg)
    for c in clients:
        c.params = server
    return ProtocolResult([server] * len(clients), server, logs)


def centralized(x: np.ndarray, y: np.ndarray, init: ParamSet, lr: float, steps: int,
                optimizer: str = "sgd", grad_fn: GradFn = loss_and_grad,
                lr_decay: float = 1.0) -> tuple[ParamSet, list[float]]:
    """Full-batch training on pooled data; step ``k`` uses ``lr * lr_decay**k``."""
    solver = optim.make(optimizer)
    w = init
    losses = []
    for k in range(steps):
        loss, grad = grad_fn(w, (x, y))
        w = solver.step(w, grad, lr * lr_decay ** k)
        losses.append(loss)
    return w, losses


# -- logs as CSV ---------------------------------------------------------------------------

def logs_to_csv(logs: Sequence[RoundLog], client_ids: Sequence[int], param_bytes: int) -> str:
    """``round,event,client_id,loss,bytes_up,bytes_down``, one row per client per event.

    Byte columns are per client, so they sum to the event totals.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "event", "client_id", "loss", "bytes_up", "bytes_down"])
    for lg in logs:
        if lg.event == "AGGREGATE":
            participants = sorted(lg.losses) or sorted(client_ids)
            per = param_bytes
        else:
            participants = sorted(lg.losses)
            per = 0
        for cid in participants:
            loss = lg.losses.get(cid)
            w.writerow([lg.round, lg.event, cid, "" if loss is None else repr(loss), per, per])
    return buf.getvalue()


def loss_curve(logs: Sequence[RoundLog]) -> list[tuple[int, int, float]]:
    """``(index, aggregations so far, mean client loss)`` for every event with losses."""
    out = []
    aggs = 0
    for lg in logs:
        if lg.event == "AGGREGATE":
            aggs += 1
        if lg.losses:
            out.append((lg.round, aggs, lg.mean_loss))
    return out


def with_protocol(cfg: FLConfig, protocol: Protocol | str, **changes) -> FLConfig:
    return replace(cfg, protocol=Protocol.parse(protocol), **changes)
