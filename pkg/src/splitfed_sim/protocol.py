"""Batch-level split training between one shard server and its clients.

Each client keeps its own copy of the server-side model for the duration
of a round; the copies are averaged (ascending client id) when the round
ends. That makes the post-round state independent of the order in which
clients are processed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cost
from .data import NUM_CLASSES, Dataset
from .nn import (
    ForwardCache,
    ModelSpec,
    Weights,
    backward,
    fedavg,
    forward,
    loss_ce,
    sgd_step,
)
from .nn.layers import SpecError
from .seeding import rng_for


class ProtocolError(RuntimeError):
    pass


@dataclass(eq=False)
class ActivationMsg:
    client_id: int
    round: int
    batch: int
    activations: np.ndarray
    labels: np.ndarray

    @property
    def byte_size(self) -> int:
        return self.activations.size * cost.FLOAT_BYTES + self.labels.size + cost.HEADER_BYTES


@dataclass(eq=False)
class GradientMsg:
    client_id: int
    round: int
    batch: int
    grad: np.ndarray

    @property
    def byte_size(self) -> int:
        return self.grad.size * cost.FLOAT_BYTES + cost.HEADER_BYTES


@dataclass(eq=False)
class ClientCache:
    key: tuple[int, int, int]
    forward: ForwardCache


@dataclass(eq=False)
class ClientState:
    client_id: int
    spec: ModelSpec
    weights: Weights
    data: Dataset
    lr: float
    batch_size: int
    poisoned: bool = False


@dataclass(eq=False)
class ShardServerState:
    server_id: int
    spec: ModelSpec
    weights: dict[int, Weights]
    lr: float
    # a malicious server trains on shifted labels
    flip_labels: bool = False

    @classmethod
    def start(cls, server_id, spec, model: Weights, client_ids, lr, flip_labels=False):
        return cls(server_id, spec, {j: model for j in client_ids}, lr, flip_labels)

    def average(self) -> Weights:
        """Shard-level FedAvg of the per-client copies; every copy is reset to it."""
        if not self.weights:
            raise ProtocolError(f"shard {self.server_id} has no clients")
        model = fedavg([self.weights[j] for j in sorted(self.weights)])
        for j in self.weights:
            self.weights[j] = model
        return model


def client_train_batch(cs: ClientState, x: np.ndarray, y: np.ndarray, round: int = 0,
                       batch: int = 0) -> tuple[ActivationMsg, ClientCache]:
    seg = cs.spec.client
    if tuple(x.shape[1:]) != seg.input_shape:
        raise SpecError(f"batch shape {x.shape[1:]} does not match client input {seg.input_shape}")
    acts, fcache = forward(seg, cs.weights, x)
    msg = ActivationMsg(cs.client_id, round, batch, acts, np.asarray(y))
    return msg, ClientCache((cs.client_id, round, batch), fcache)


def server_process_batch(ss: ShardServerState, m: ActivationMsg) -> tuple[GradientMsg, float]:
    """Server forward, loss, backward and SGD on the client's server copy."""
    if m.client_id not in ss.weights:
        raise ProtocolError(f"client {m.client_id} is not enrolled at shard {ss.server_id}")
    seg = ss.spec.server
    w = ss.weights[m.client_id]
    labels = (m.labels + 1) % NUM_CLASSES if ss.flip_labels else m.labels
    logits, fcache = forward(seg, w, m.activations)
    loss, grad_logits = loss_ce(logits, labels)
    g = backward(seg, w, fcache, grad_logits)
    ss.weights[m.client_id] = sgd_step(w, g, ss.lr)
    return GradientMsg(m.client_id, m.round, m.batch, g.input_grad), loss


def client_backprop(cs: ClientState, cache: ClientCache, g: GradientMsg) -> ClientState:
    if cache.key != (g.client_id, g.round, g.batch):
        raise ProtocolError(f"gradient for {(g.client_id, g.round, g.batch)} does not match cache {cache.key}")
    grads = backward(cs.spec.client, cs.weights, cache.forward, g.grad, need_input_grad=False)
    cs.weights = sgd_step(cs.weights, grads, cs.lr)
    return cs


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    # the last partial batch is kept
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class RoundResult:
    model: Weights  # averaged server model
    traces: list[cost.ClientTrace] = field(default_factory=list)
    losses: dict[int, float] = field(default_factory=dict)

    @property
    def messages(self) -> int:
        return sum(t.messages for t in self.traces)

    @property
    def bytes(self) -> int:
        return sum(t.bytes for t in self.traces)


def run_client(ss: ShardServerState, cs: ClientState, epochs: int, seed: int, round: int = 0):
    """All batches of one client for one round; returns (trace, mean loss)."""
    seg_c, seg_s = cs.spec.client, cs.spec.server
    c_units, s_units = cost.train_units(seg_c), cost.train_units(seg_s)
    trace = cost.ClientTrace(cs.client_id)
    losses = []
    b = 0
    for epoch in range(epochs):
        rng = rng_for(seed, "batch-order", epoch, cs.client_id)
        for idx in batch_order(len(cs.data), cs.batch_size, rng):
            msg, cache = client_train_batch(cs, cs.data.images[idx], cs.data.labels[idx], round, b)
            gmsg, loss = server_process_batch(ss, msg)
            client_backprop(cs, cache, gmsg)
            losses.append(loss)
            trace.client_units += c_units * len(idx)
            trace.server_units += s_units * len(idx)
            trace.bytes += msg.byte_size + gmsg.byte_size
            trace.messages += 2
            trace.batches += 1
            b += 1
    return trace, float(np.mean(losses)) if losses else float("nan")


def run_shard_round(ss: ShardServerState, clients: list[ClientState], epochs: int, seed: int,
                    round: int = 0) -> RoundResult:
    """Every client trains ``epochs`` epochs against its own server copy, then the
    shard server averages the copies."""
    if not clients:
        raise ProtocolError(f"shard {ss.server_id} has no clients")
    for cs in clients:
        if cs.client_id not in ss.weights:
            raise ProtocolError(f"client {cs.client_id} is not enrolled at shard {ss.server_id}")
    result = RoundResult(model=None)  # type: ignore[arg-type]
    traces = {}
    for cs in clients:
        traces[cs.client_id], result.losses[cs.client_id] = run_client(ss, cs, epochs, seed, round)
    result.traces = [traces[j] for j in sorted(traces)]
    result.model = ss.average()
    return result
