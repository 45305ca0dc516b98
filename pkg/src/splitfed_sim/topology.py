"""Centralised orchestrators: sequential SL, SplitFed and sharded SplitFed."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cost
from .attacks import NO_ATTACK, AttackPlan, apply_poisoning
from .data import Dataset
from .nn import ModelSpec, Weights, fedavg, init_model, loss_ce, predict, split
from .protocol import ClientState, ShardServerState, run_shard_round
from .seeding import derive_seed

log = logging.getLogger(__name__)

TOPOLOGIES = ("sl", "sfl", "ssfl", "bsfl")


class ConfigError(ValueError):
    pass


@dataclass
class TopologyConfig:
    topology: str = "ssfl"
    node_count: int = 9
    shard_count: int = 3
    clients_per_shard: int = 2
    rounds: int = 1
    cycles: int = 40
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    patience: int | None = 3
    warmup: int = 10  # evaluations before early stopping may trigger
    top_k: int = 2
    score_metric: str = "loss"

    def validate(self) -> "TopologyConfig":
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        for name in ("rounds", "cycles", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.topology in ("sl", "sfl"):
            if self.node_count < 2:
                raise ConfigError(f"{self.topology} needs a server and at least one client")
        else:
            if self.shard_count < 1 or self.clients_per_shard < 1:
                raise ConfigError("shard_count and clients_per_shard must be >= 1")
            need = self.shard_count * (self.clients_per_shard + 1)
            if self.topology == "ssfl" and self.node_count != need:
                raise ConfigError(
                    f"ssfl needs node_count = I*(J+1) = {need}, got {self.node_count}"
                )
            if self.topology == "bsfl" and self.node_count < need:
                raise ConfigError(f"bsfl needs at least I*(J+1) = {need} nodes, got {self.node_count}")
        if self.topology == "bsfl":
            if not 1 <= self.top_k <= self.shard_count:
                raise ConfigError(f"top_k must lie in [1, {self.shard_count}]")
            if self.score_metric not in ("loss", "accuracy"):
                raise ConfigError("score_metric must be 'loss' or 'accuracy'")
        return self


@dataclass
class HistoryRow:
    cycle: int
    round: int
    val_loss: float
    val_acc: float
    sim_time: float
    messages: int
    bytes: int
    winners: tuple = ()


@dataclass
class TrainHistory:
    topology: str
    rows: list[HistoryRow] = field(default_factory=list)
    stats: list[cost.CycleStats] = field(default_factory=list)
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    client_model: Weights | None = None
    server_model: Weights | None = None
    stopped_early: bool = False
    best_cycle: int = 0
    extras: dict = field(default_factory=dict)
    _best: tuple | None = field(default=None, repr=False)

    def checkpoint(self, cycle: int, wc: Weights, ws: Weights) -> None:
        self.best_cycle = cycle
        self._best = (wc.copy(), ws.copy())

    def finish(self, spec: ModelSpec, wc: Weights, ws: Weights, test: Dataset) -> "TrainHistory":
        """Evaluate the checkpoint kept by early stopping (else the last models) on ``test``."""
        if self._best is not None:
            wc, ws = self._best
        self.client_model, self.server_model = wc, ws
        self.test_loss, self.test_acc = evaluate_model(spec, wc, ws, test)
        return self

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.rows]

    @property
    def avg_round_time(self) -> float:
        return float(np.mean([r.sim_time for r in self.rows])) if self.rows else 0.0


def early_stop(losses: Sequence[float], patience: int) -> bool:
    """True once the loss has failed to beat its running minimum ``patience``
    times in a row (patience 0 behaves like 1)."""
    if not losses:
        raise ValueError("early_stop needs a non-empty history")
    best = losses[0]
    stale = 0
    for loss in losses[1:]:
        if loss < best:
            best = loss
            stale = 0
        else:
            stale += 1
    return stale >= max(patience, 1)


def should_stop(cfg: TopologyConfig, losses: Sequence[float]) -> bool:
    """Early stopping gated by the configured warm-up."""
    return cfg.patience is not None and len(losses) >= cfg.warmup and early_stop(losses, cfg.patience)


def evaluate_model(spec: ModelSpec, wc: Weights, ws: Weights, ds: Dataset) -> tuple[float, float]:
    if len(ds) == 0:
        return float("nan"), float("nan")
    acts = predict(spec.client, wc, ds.images)
    logits = predict(spec.server, ws, acts)
    loss, _ = loss_ce(logits.astype(np.float64), ds.labels)
    return loss, float(np.mean(logits.argmax(axis=1) == ds.labels))


def initial_models(spec: ModelSpec, seed: int) -> tuple[Weights, Weights]:
    return split(init_model(spec, derive_seed(seed, "init")), spec.split_index)


@dataclass
class ShardOutcome:
    server_id: int
    client_ids: list[int]
    server_model: Weights
    client_models: dict[int, Weights]
    trace: cost.ShardTrace


def train_shard(spec: ModelSpec, cfg: TopologyConfig, server_id: int, client_ids: Sequence[int],
                ws: Weights, wc: Weights, partitions: Sequence[Dataset], cycle: int,
                plan: AttackPlan = NO_ATTACK) -> ShardOutcome:
    """R rounds of one shard starting from the given global models."""
    client_ids = sorted(client_ids)
    clients = [ClientState(j, spec, wc, partitions[j], cfg.lr, cfg.batch_size, plan.poisons(j))
               for j in client_ids]
    ss = ShardServerState.start(server_id, spec, ws, client_ids, cfg.lr, plan.flips_as_server(server_id))
    trace = cost.ShardTrace(server_id)
    model = ws
    for r in range(cfg.rounds):
        res = run_shard_round(ss, clients, cfg.epochs, derive_seed(cfg.seed, "train", cycle, r), r)
        trace.rounds.append(res.traces)
        model = res.model
    return ShardOutcome(server_id, client_ids, model, {c.client_id: c.weights for c in clients}, trace)


def _model_bytes(w: Weights) -> int:
    return cost.weights_bytes(len(w))


def _finish(history: TrainHistory, spec, wc, ws, test: Dataset):
    return history.finish(spec, wc, ws, test)


def _record(history, cfg, stats, model, spec, wc, ws, val, cycle, rnd, winners=()) -> bool:
    """Append a metrics row; returns True when early stopping triggers."""
    loss, acc = evaluate_model(spec, wc, ws, val)
    history.stats.append(stats)
    history.rows.append(HistoryRow(cycle, rnd, loss, acc, cost.simulated_round_time(stats, model),
                                   stats.total_messages, stats.total_bytes, tuple(winners)))
    log.debug("%s cycle %d round %d val_loss %.4f", cfg.topology, cycle, rnd, loss)
    if cfg.patience is not None and loss < min(history.val_losses[:-1], default=np.inf):
        history.checkpoint(cycle, wc, ws)
    if should_stop(cfg, history.val_losses):
        history.stopped_early = True
        return True
    return False


def run_sl(cfg: TopologyConfig, spec: ModelSpec, partitions: Sequence[Dataset], val: Dataset,
           test: Dataset, plan: AttackPlan = NO_ATTACK, cost_model: cost.CostModel | None = None,
           server_id: int = 0) -> TrainHistory:
    """Clients take turns against one server; the client model is relayed
    from each client to the next."""
    cfg.validate()
    cost_model = cost_model or cost.CostModel()
    partitions = apply_poisoning(partitions, plan)
    clients = [j for j in range(cfg.node_count) if j != server_id]
    wc, ws = initial_models(spec, cfg.seed)
    history = TrainHistory("sl")
    flip = plan.flips_as_server(server_id)
    for t in range(1, cfg.cycles + 1):
        for r in range(1, cfg.rounds + 1):
            # same seed stream as SFL/SSFL with one round per cycle
            seed = derive_seed(cfg.seed, "train", (t - 1) * cfg.rounds + r, 0)
            trace = cost.ShardTrace(server_id, [[]])
            for j in clients:
                ss = ShardServerState.start(server_id, spec, ws, [j], cfg.lr, flip)
                cs = ClientState(j, spec, wc, partitions[j], cfg.lr, cfg.batch_size, plan.poisons(j))
                res = run_shard_round(ss, [cs], cfg.epochs, seed, 0)
                trace.rounds[0].extend(res.traces)
                ws, wc = res.model, cs.weights
            # each client downloads the relayed model before its turn and uploads it after
            stats = cost.CycleStats("sl", [trace], agg_bytes=2 * len(clients) * _model_bytes(wc),
                                    agg_messages=2 * len(clients))
            if _record(history, cfg, stats, cost_model, spec, wc, ws, val, t, r):
                return _finish(history, spec, wc, ws, test)
    return _finish(history, spec, wc, ws, test)


def run_sfl(cfg: TopologyConfig, spec: ModelSpec, partitions: Sequence[Dataset], val: Dataset,
            test: Dataset, plan: AttackPlan = NO_ATTACK, cost_model: cost.CostModel | None = None,
            server_id: int = 0) -> TrainHistory:
    """Parallel clients on one server; client models are FedAvg'd every round."""
    cfg.validate()
    cost_model = cost_model or cost.CostModel()
    partitions = apply_poisoning(partitions, plan)
    clients = [j for j in range(cfg.node_count) if j != server_id]
    wc, ws = initial_models(spec, cfg.seed)
    history = TrainHistory("sfl")
    one_round = TopologyConfig(**{**cfg.__dict__, "rounds": 1})
    for t in range(1, cfg.cycles + 1):
        for r in range(1, cfg.rounds + 1):
            out = train_shard(spec, one_round, server_id, clients, ws, wc, partitions, (t - 1) * cfg.rounds + r, plan)
            ws = out.server_model
            wc = fedavg([out.client_models[j] for j in out.client_ids])
            stats = cost.CycleStats(
                "sfl", [out.trace],
                agg_units=len(clients) * len(wc),
                agg_bytes=2 * len(clients) * _model_bytes(wc),
                agg_messages=2 * len(clients),
            )
            if _record(history, cfg, stats, cost_model, spec, wc, ws, val, t, r):
                return _finish(history, spec, wc, ws, test)
    return _finish(history, spec, wc, ws, test)


def default_layout(shard_count: int, clients_per_shard: int) -> list[tuple[int, list[int]]]:
    """Shard i: server node i*(J+1) followed by its J clients."""
    step = clients_per_shard + 1
    return [(i * step, list(range(i * step + 1, (i + 1) * step))) for i in range(shard_count)]


def aggregate_shards(outcomes: Sequence[ShardOutcome]) -> tuple[Weights, Weights]:
    """Equal-weight means over shard server models and over every client model,
    reduced in the order given."""
    ws = fedavg([o.server_model for o in outcomes])
    wc = fedavg([o.client_models[j] for o in outcomes for j in o.client_ids])
    return ws, wc


def aggregation_stats(stats: cost.CycleStats, outcomes: Sequence[ShardOutcome]) -> None:
    n_clients = sum(len(o.client_ids) for o in outcomes)
    wc_bytes = _model_bytes(next(iter(outcomes[0].client_models.values())))
    ws_bytes = _model_bytes(outcomes[0].server_model)
    n_wc = len(next(iter(outcomes[0].client_models.values())))
    n_ws = len(outcomes[0].server_model)
    stats.agg_units += n_clients * n_wc + len(outcomes) * n_ws
    stats.agg_bytes += 2 * (n_clients * wc_bytes + len(outcomes) * ws_bytes)
    stats.agg_messages += 2 * (n_clients + len(outcomes))


def run_ssfl(cfg: TopologyConfig, spec: ModelSpec, partitions: Sequence[Dataset], val: Dataset,
             test: Dataset, plan: AttackPlan = NO_ATTACK, cost_model: cost.CostModel | None = None,
             layout: Callable[[int], list[tuple[int, list[int]]]] | None = None) -> TrainHistory:
    """Shards train R rounds in parallel, then one FL server averages all
    shard servers and all clients.

    ``layout(cycle)`` may override the default fixed shard layout.
    """
    cfg.validate()
    cost_model = cost_model or cost.CostModel()
    partitions = apply_poisoning(partitions, plan)
    wc, ws = initial_models(spec, cfg.seed)
    history = TrainHistory("ssfl")
    fixed = default_layout(cfg.shard_count, cfg.clients_per_shard)
    for t in range(1, cfg.cycles + 1):
        shards = layout(t) if layout else fixed
        outcomes = [train_shard(spec, cfg, s, c, ws, wc, partitions, t, plan) for s, c in shards]
        ws, wc = aggregate_shards(outcomes)
        stats = cost.CycleStats("ssfl", [o.trace for o in outcomes])
        aggregation_stats(stats, outcomes)
        if _record(history, cfg, stats, cost_model, spec, wc, ws, val, t, cfg.rounds):
            break
    return _finish(history, spec, wc, ws, test)
