"""Adversaries: label-poisoning nodes and score-inverting committee members."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, poison_labels
from .seeding import rng_for

MODES = ("poison_data", "malicious_vote")


@dataclass(frozen=True)
class AttackPlan:
    fraction: float = 0.0
    node_count: int = 0
    seed: int = 0
    modes: frozenset = field(default_factory=lambda: frozenset(MODES))
    # a malicious node serving as a shard server also trains on shifted labels
    poison_as_server: bool = True
    # explicit attacker count; None derives it from fraction
    attacker_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "modes", frozenset(self.modes))
        if not 0.0 <= self.fraction < 0.51:
            raise ValueError("attack fraction must lie in [0, 0.51)")
        unknown = self.modes - set(MODES)
        if unknown:
            raise ValueError(f"unknown attack modes {sorted(unknown)}")
        if self.attacker_count is not None and not 0 <= self.attacker_count < 0.51 * max(self.node_count, 1):
            raise ValueError("attacker_count must stay below 51% of the nodes")

    @property
    def count(self) -> int:
        if self.attacker_count is not None:
            return self.attacker_count
        # nearest integer, halves up: 33% of 9 nodes is 3, 47% of 36 is 17
        return int(math.floor(self.fraction * self.node_count + 0.5))

    @property
    def malicious_ids(self) -> frozenset[int]:
        if self.count == 0:
            return frozenset()
        rng = rng_for(self.seed, "attackers")
        return frozenset(int(i) for i in rng.choice(self.node_count, self.count, replace=False))

    @property
    def active(self) -> bool:
        return self.count > 0 and bool(self.modes)

    def poisons(self, node_id: int) -> bool:
        return "poison_data" in self.modes and node_id in self.malicious_ids

    def flips_as_server(self, node_id: int) -> bool:
        return self.poison_as_server and self.poisons(node_id)

    def votes_maliciously(self, node_id: int) -> bool:
        return "malicious_vote" in self.modes and node_id in self.malicious_ids


NO_ATTACK = AttackPlan()


def apply_poisoning(partitions: Sequence[Dataset], plan: AttackPlan) -> list[Dataset]:
    """Label-shift every malicious node's slice; honest slices are returned as is."""
    return [poison_labels(ds, 1.0) if plan.poisons(i) else ds for i, ds in enumerate(partitions)]


def malicious_vote(true_scores: Sequence[float]) -> list[float]:
    """Order-reversing flip: s -> max + min - s."""
    if len(true_scores) == 0:
        return []
    arr = np.asarray(true_scores, dtype=np.float64)
    hi, lo = arr.max(), arr.min()
    return [float(hi + lo - s) for s in arr]
