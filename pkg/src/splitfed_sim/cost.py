"""Compute/communication accounting and the simulated round-time model.

Compute units are multiply-accumulates per example:
  Conv2d forward  Cout * Cin * 9 * H * W   (3x3 kernel, same padding)
  Linear forward  in * out
  ReLU, MaxPool2d one unit per input element
  Flatten         free
Backward costs twice the forward for Conv2d/Linear (input and weight
gradients) and one unit per element for ReLU/MaxPool2d.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .nn.layers import Segment

# payload accounting
FLOAT_BYTES = 4
HEADER_BYTES = 32


class CostModelError(ValueError):
    pass


def layer_units(segment: Segment) -> list[tuple[int, int]]:
    """(forward, backward) units per example for each layer of a segment."""
    shapes = segment.shapes()
    units = []
    for layer, shape_in, shape_out in zip(segment.layers, shapes, shapes[1:]):
        n_in = 1
        for d in shape_in:
            n_in *= d
        if layer.kind == "Conv2d":
            fwd = layer.out_features * layer.in_features * 9 * shape_out[1] * shape_out[2]
            units.append((fwd, 2 * fwd))
        elif layer.kind == "Linear":
            fwd = layer.in_features * layer.out_features
            units.append((fwd, 2 * fwd))
        elif layer.kind in ("ReLU", "MaxPool2d"):
            units.append((n_in, n_in))
        else:
            units.append((0, 0))
    return units


def forward_units(segment: Segment) -> int:
    return sum(f for f, _ in layer_units(segment))


def train_units(segment: Segment) -> int:
    return sum(f + b for f, b in layer_units(segment))


def weights_bytes(n_params: int) -> int:
    return n_params * FLOAT_BYTES + HEADER_BYTES


@dataclass
class ClientTrace:
    client_id: int
    client_units: int = 0
    server_units: int = 0
    bytes: int = 0
    messages: int = 0
    batches: int = 0


@dataclass
class ShardTrace:
    server_id: int
    rounds: list[list[ClientTrace]] = field(default_factory=list)

    @property
    def clients(self) -> list[ClientTrace]:
        return [c for r in self.rounds for c in r]


@dataclass
class CycleStats:
    """Everything the cost model needs about one round (SL/SFL) or cycle (SSFL/BSFL)."""

    topology: str
    shards: list[ShardTrace] = field(default_factory=list)
    agg_units: int = 0
    agg_bytes: int = 0
    agg_messages: int = 0
    eval_units: int = 0
    eval_bytes: int = 0
    eval_messages: int = 0
    ledger_bytes: int = 0
    ledger_messages: int = 0

    @property
    def messages(self) -> int:
        return sum(c.messages for s in self.shards for c in s.clients)

    @property
    def bytes(self) -> int:
        return sum(c.bytes for s in self.shards for c in s.clients)

    @property
    def total_messages(self) -> int:
        return self.messages + self.agg_messages + self.eval_messages + self.ledger_messages

    @property
    def total_bytes(self) -> int:
        return self.bytes + self.agg_bytes + self.eval_bytes + self.ledger_bytes


@dataclass(frozen=True)
class CostModel:
    flop_s: float = 1e-9  # seconds per compute unit
    byte_s: float = 8e-9  # seconds per byte (~1 Gbit/s)
    msg_s: float = 1e-4  # per-message latency

    def __post_init__(self):
        if min(self.flop_s, self.byte_s, self.msg_s) < 0:
            raise CostModelError("cost coefficients must be non-negative")


def _round_compute(clients: list[ClientTrace]) -> int:
    # one shard server handles every client's batches in turn, while each
    # client's own chain (client work + its server work) is sequential
    if not clients:
        return 0
    chain = max(c.client_units + c.server_units for c in clients)
    served = sum(c.server_units for c in clients)
    return max(chain, served)


def shard_compute(shard: ShardTrace) -> int:
    return sum(_round_compute(r) for r in shard.rounds)


def compute_term(stats: CycleStats) -> int:
    """Compute units on the critical path of the training phase."""
    if stats.topology == "sl":
        return sum(c.client_units + c.server_units for s in stats.shards for c in s.clients)
    return max((shard_compute(s) for s in stats.shards), default=0)


def shard_time(shard: ShardTrace, model: CostModel) -> float:
    clients = shard.clients
    # the server's link carries all of its clients' traffic
    return (
        model.flop_s * shard_compute(shard)
        + model.byte_s * sum(c.bytes for c in clients)
        + model.msg_s * sum(c.messages for c in clients)
    )


def simulated_round_time(stats: CycleStats, model: CostModel, topology: str | None = None) -> float:
    """Critical-path duration in seconds.

    Sequential split learning sums every client's work. Parallel topologies
    take the slowest shard, then add aggregation and (BSFL) evaluation and
    ledger terms.
    """
    topology = topology or stats.topology
    if topology == "sl":
        train = sum(
            model.flop_s * (c.client_units + c.server_units)
            + model.byte_s * c.bytes
            + model.msg_s * c.messages
            for s in stats.shards
            for c in s.clients
        )
    else:
        train = max((shard_time(s, model) for s in stats.shards), default=0.0)
    extra = (
        model.flop_s * (stats.agg_units + stats.eval_units)
        + model.byte_s * (stats.agg_bytes + stats.eval_bytes + stats.ledger_bytes)
        + model.msg_s * (stats.agg_messages + stats.eval_messages + stats.ledger_messages)
    )
    return train + extra
