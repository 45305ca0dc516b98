"""Committee consensus for blockchain-enabled SplitFed (BSFL).

Per cycle: AssignNodes elects the committee (the shard servers) and fills
the shards, every shard trains from the current globals, ModelPropose
commits all trained models, each committee member scores every other
shard on its own data, EvaluationPropose records the median scores and the
top-K winners whose models become the next globals.
"""
from __future__ import annotations

import statistics
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import cost
from ..attacks import NO_ATTACK, AttackPlan, apply_poisoning, malicious_vote
from ..data import Dataset
from ..nn import ModelSpec, Weights, fedavg, serialize
from ..seeding import rng_for
from ..topology import (
    HistoryRow,
    ShardOutcome,
    TopologyConfig,
    TrainHistory,
    should_stop,
    evaluate_model,
    initial_models,
    train_shard,
)
from .chain import Ledger, canonical_json


class RotationError(ValueError):
    pass


class MissingEvaluation(ValueError):
    pass


@dataclass
class Assignment:
    cycle: int
    shards: list[tuple[int, list[int]]]  # (server, clients), shard index = position
    idle: list[int] = field(default_factory=list)

    @property
    def committee(self) -> list[int]:
        return [s for s, _ in self.shards]

    def members(self, shard: int) -> list[int]:
        server, clients = self.shards[shard]
        return [server, *clients]

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "shards": [[s, list(c)] for s, c in self.shards], "idle": list(self.idle)}


def _rank_key(scores: Mapping[int, float | None], maximize: bool):
    def key(node):
        s = scores.get(node)
        if s is None:
            return (1, 0.0, node)  # never scored: ranked after every scored node
        return (0, -s if maximize else s, node)

    return key


def assign_nodes(t: int, nodes: Sequence[int], scores_prev: Mapping[int, float | None],
                 prev_committee: Sequence[int], shard_count: int, clients_per_shard: int,
                 seed: int, maximize: bool = False) -> Assignment:
    """Elect the cycle's committee and fill the shards.

    Cycle 1 is uniformly random. Later cycles take the best-scoring nodes that
    were not on the previous committee as servers; previous committee members
    become clients. Servers and clients are both dealt in rank order so nodes
    of similar score share a shard.
    """
    nodes = sorted(nodes)
    need = shard_count * (clients_per_shard + 1)
    if len(nodes) < need:
        raise RotationError(f"{len(nodes)} nodes cannot fill {shard_count} shards of {clients_per_shard} clients")
    n_clients = shard_count * clients_per_shard
    if t == 1 or not prev_committee:
        perm = [int(n) for n in rng_for(seed, "assign", t).permutation(nodes)]
        committee = perm[:shard_count]
        clients = perm[shard_count : shard_count + n_clients]
        idle = sorted(perm[shard_count + n_clients :])
        shards = [
            (committee[i], sorted(clients[i * clients_per_shard : (i + 1) * clients_per_shard]))
            for i in range(shard_count)
        ]
        return Assignment(t, shards, idle)
    key = _rank_key(scores_prev, maximize)
    prev = set(prev_committee)
    eligible = sorted((n for n in nodes if n not in prev), key=key)
    if len(eligible) < shard_count:
        raise RotationError(f"only {len(eligible)} nodes are eligible for {shard_count} committee seats")
    if len(prev) > n_clients:
        raise RotationError("previous committee does not fit into the client slots")
    committee = eligible[:shard_count]
    others = eligible[shard_count:]
    clients = sorted(prev, key=key) + others[: n_clients - len(prev)]
    idle = sorted(others[n_clients - len(prev) :])
    clients = sorted(clients, key=key)
    shards = [
        (committee[i], sorted(clients[i * clients_per_shard : (i + 1) * clients_per_shard]))
        for i in range(shard_count)
    ]
    return Assignment(t, shards, idle)


def evaluate(spec: ModelSpec, data: Dataset, ws: Weights, client_models: Sequence[Weights],
             metric: str = "loss") -> float:
    """Median over the shard's client paths of the loss (or accuracy) on ``data``."""
    scores = []
    for wc in client_models:
        loss, acc = evaluate_model(spec, wc, ws, data)
        scores.append(loss if metric == "loss" else acc)
    return float(statistics.median(scores))


def finalize_scores(raw: Mapping[int, Sequence[float]], expected: int | None = None) -> dict[int, float]:
    """Median of each shard's evaluator scores (even count: mean of the middle two)."""
    final = {}
    for shard, scores in raw.items():
        if not scores or (expected is not None and len(scores) != expected):
            raise MissingEvaluation(f"shard {shard} has {len(scores)} scores, expected {expected}")
        final[shard] = float(statistics.median(scores))
    return final


def select_top_k(final: Mapping[int, float], k: int, server_ids: Mapping[int, int] | None = None,
                 maximize: bool = False) -> list[int]:
    """The K best shards; ties go to the shard whose server has the lower node id."""
    n = len(final)
    if k > n:
        raise ValueError(f"top_k {k} exceeds shard count {n}")
    if not 2 < k < n / 2:
        warnings.warn(f"top_k={k} is outside the recommended 2 < K < N/2 for N={n}", stacklevel=2)
    server_ids = server_ids or {s: s for s in final}

    def key(shard):
        score = final[shard]
        return (-score if maximize else score, server_ids[shard])

    return sorted(final, key=key)[:k]


def aggregate_top_k(winners: Sequence[int], server_models: Mapping[int, Weights],
                    client_models: Mapping[int, Sequence[Weights]]) -> tuple[Weights, Weights]:
    """Equal-weight means over the winners' server models and all their client
    models, reduced in ascending shard order."""
    order = sorted(winners)
    ws = fedavg([server_models[i] for i in order])
    wc = fedavg([w for i in order for w in client_models[i]])
    return ws, wc


@dataclass
class CycleResult:
    assignment: Assignment
    outcomes: list[ShardOutcome]
    raw: dict[int, list[float]]
    final: dict[int, float]
    winners: list[int]
    ws: Weights
    wc: Weights
    events: list = field(default_factory=list)
    stats: cost.CycleStats | None = None


def run_bsfl_cycle(t: int, assignment: Assignment, ws: Weights, wc: Weights, spec: ModelSpec,
                   cfg: TopologyConfig, partitions: Sequence[Dataset],
                   clean_partitions: Sequence[Dataset] | None = None,
                   plan: AttackPlan = NO_ATTACK, ledger: Ledger | None = None) -> CycleResult:
    """Train every shard from the globals, commit, cross-evaluate and pick winners."""
    clean_partitions = clean_partitions or partitions
    maximize = cfg.score_metric == "accuracy"
    events = []
    if ledger is not None:
        events.append(ledger.event("AssignNodes", t, canonical_json(assignment.to_dict()), "json"))
    outcomes = [train_shard(spec, cfg, s, c, ws, wc, partitions, t, plan) for s, c in assignment.shards]
    if ledger is not None:
        for i, o in enumerate(outcomes):
            events.append(ledger.event("ModelPropose", t, serialize(o.server_model), "sfw",
                                       shard=i, node=o.server_id, role="server"))
            for j in o.client_ids:
                events.append(ledger.event("ModelPropose", t, serialize(o.client_models[j]), "sfw",
                                           shard=i, node=j, role="client"))
    raw: dict[int, list[float]] = {i: [] for i in range(len(outcomes))}
    eval_units = 0
    for e_idx, evaluator in enumerate(assignment.committee):
        targets = [i for i in range(len(outcomes)) if i != e_idx]
        malicious = plan.votes_maliciously(evaluator)
        data = clean_partitions[evaluator] if malicious else partitions[evaluator]
        scores = [
            evaluate(spec, data, outcomes[i].server_model,
                     [outcomes[i].client_models[j] for j in outcomes[i].client_ids], cfg.score_metric)
            for i in targets
        ]
        if malicious:
            scores = malicious_vote(scores)
        for i, s in zip(targets, scores):
            raw[i].append(s)
        paths = sum(len(outcomes[i].client_ids) for i in targets)
        eval_units = max(eval_units, paths * len(data) * cost.forward_units(spec.full))
    final = finalize_scores(raw, len(outcomes) - 1)
    server_ids = {i: o.server_id for i, o in enumerate(outcomes)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        winners = select_top_k(final, cfg.top_k, server_ids, maximize)
    new_ws, new_wc = aggregate_top_k(
        winners,
        {i: o.server_model for i, o in enumerate(outcomes)},
        {i: [o.client_models[j] for j in o.client_ids] for i, o in enumerate(outcomes)},
    )
    if ledger is not None:
        events.append(ledger.event("EvaluationPropose", t, canonical_json(_score_table(raw, final, winners)), "json"))

    stats = cost.CycleStats("bsfl", [o.trace for o in outcomes])
    ws_b = cost.weights_bytes(len(ws))
    wc_b = cost.weights_bytes(len(wc))
    n_i, n_c = len(outcomes), sum(len(o.client_ids) for o in outcomes)
    stats.ledger_bytes = n_i * ws_b + n_c * wc_b
    stats.ledger_messages = n_i + n_c + 2  # ModelPropose per model, AssignNodes, EvaluationPropose
    stats.eval_bytes = max(sum(ws_b + len(o.client_ids) * wc_b for k, o in enumerate(outcomes) if k != e)
                           for e in range(n_i))
    stats.eval_messages = n_i * (n_i - 1)
    stats.eval_units = eval_units
    stats.agg_units = len(winners) * len(ws) + sum(len(outcomes[i].client_ids) for i in winners) * len(wc)
    stats.agg_bytes = n_i * ws_b + n_c * wc_b
    stats.agg_messages = n_i + n_c
    return CycleResult(assignment, outcomes, raw, final, winners, new_ws, new_wc, events, stats)


def _score_table(raw, final, winners) -> dict:
    return {
        "raw": {str(i): list(v) for i, v in raw.items()},
        "final": {str(i): v for i, v in final.items()},
        "winners": sorted(winners),
    }


def run_bsfl(cfg: TopologyConfig, spec: ModelSpec, partitions: Sequence[Dataset], val: Dataset,
             test: Dataset, plan: AttackPlan = NO_ATTACK, cost_model: cost.CostModel | None = None,
             ledger: Ledger | None = None) -> TrainHistory:
    """Committee procedure over up to T cycles with consensus-driven early stopping.

    ``partitions`` are the clean node slices; poisoning is applied here.
    """
    cfg.validate()
    cost_model = cost_model or cost.CostModel()
    ledger = ledger if ledger is not None else Ledger()
    maximize = cfg.score_metric == "accuracy"
    poisoned = apply_poisoning(partitions, plan)
    nodes = list(range(cfg.node_count))
    scores: dict[int, float | None] = {n: None for n in nodes}
    prev: list[int] = []
    wc, ws = initial_models(spec, cfg.seed)
    history = TrainHistory("bsfl", extras={"committees": [], "winners": [], "dirty_winners": [],
                                           "consensus": [], "ledger": ledger, "assignments": []})
    bad = plan.malicious_ids
    for t in range(1, cfg.cycles + 1):
        assignment = assign_nodes(t, nodes, scores, prev, cfg.shard_count, cfg.clients_per_shard,
                                  cfg.seed, maximize)
        res = run_bsfl_cycle(t, assignment, ws, wc, spec, cfg, poisoned, partitions, plan, ledger)
        ws, wc = res.ws, res.wc
        for i, (server, clients) in enumerate(assignment.shards):
            for n in (server, *clients):
                scores[n] = res.final[i]  # clients inherit their shard's score
        prev = assignment.committee
        table = canonical_json(_score_table(res.raw, res.final, res.winners))
        ledger.append_block(res.events or [ledger.event("EvaluationPropose", t, table, "json")],
                            serialize(ws), serialize(wc), table)

        consensus = float(statistics.median(res.final[i] for i in res.winners))
        history.extras["consensus"].append(consensus)
        history.extras["committees"].append(list(assignment.committee))
        history.extras["assignments"].append(assignment)
        history.extras["winners"].append(sorted(res.winners))
        history.extras["dirty_winners"].append(
            any(n in bad for i in res.winners for n in assignment.members(i))
        )
        loss, acc = evaluate_model(spec, wc, ws, val)
        history.stats.append(res.stats)
        history.rows.append(HistoryRow(t, cfg.rounds, loss, acc,
                                       cost.simulated_round_time(res.stats, cost_model),
                                       res.stats.total_messages, res.stats.total_bytes,
                                       tuple(sorted(res.winners))))
        track = [-c for c in history.extras["consensus"]] if maximize else history.extras["consensus"]
        if cfg.patience is not None and track[-1] < min(track[:-1], default=np.inf):
            history.checkpoint(t, wc, ws)
        if should_stop(cfg, track):
            history.stopped_early = True
            break
    return history.finish(spec, wc, ws, test)
