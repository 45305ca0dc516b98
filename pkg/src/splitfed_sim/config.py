"""Flat JSON run configuration and the plumbing that turns it into a run."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import MODES, AttackPlan
from .cost import CostModel, CostModelError
from .data import Dataset, PartitionPlan, gen_blobs, holdout, load_idx, partition
from .nn import ModelSpec, SpecError, table_ii
from .seeding import derive_seed
from .topology import ConfigError, TopologyConfig


def _type_ok(value, annotation: str) -> bool:
    allowed = {part.strip() for part in annotation.split("|")}
    if value is None:
        return "None" in allowed
    if isinstance(value, bool):
        return "bool" in allowed
    if isinstance(value, int):
        return bool(allowed & {"int", "float"})
    return any(isinstance(value, {"float": float, "str": str, "list": list}.get(a, ())) for a in allowed)


@dataclass
class RunConfig:
    topology: str = "ssfl"
    seed: int = 0
    # topology
    node_count: int = 9
    shard_count: int = 3
    clients_per_shard: int = 2
    rounds: int = 1
    cycles: int = 40
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    patience: int | None = 3
    warmup: int = 10
    top_k: int = 2
    score_metric: str = "loss"
    split_index: int = 3
    # attack
    attack_fraction: float = 0.0
    attack_count: int | None = None
    attack_modes: list = field(default_factory=lambda: list(MODES))
    poison_as_server: bool = True
    # data
    dataset: str = "blobs"
    per_class: int = 200
    image_side: int = 14
    blob_noise: float = 0.25
    blob_jitter: int = 1
    idx_images: str | None = None
    idx_labels: str | None = None
    partition: str = "label_shards"
    dirichlet_alpha: float = 0.5
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    # cost model
    flop_s: float = 1e-9
    byte_s: float = 8e-9
    msg_s: float = 1e-4
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if not _type_ok(value, types[key]):
                raise ConfigError(f"{key} has the wrong type: {value!r} (expected {types[key]})")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def attacked(self) -> bool:
        return self.attack_plan().active

    def topology_config(self) -> TopologyConfig:
        return TopologyConfig(
            topology=self.topology, node_count=self.node_count, shard_count=self.shard_count,
            clients_per_shard=self.clients_per_shard, rounds=self.rounds, cycles=self.cycles,
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
            patience=self.patience, warmup=self.warmup, top_k=self.top_k, score_metric=self.score_metric,
        )

    def attack_plan(self) -> AttackPlan:
        try:
            return AttackPlan(self.attack_fraction, self.node_count, self.seed, frozenset(self.attack_modes),
                              self.poison_as_server, self.attack_count)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def cost_model(self) -> CostModel:
        try:
            return CostModel(self.flop_s, self.byte_s, self.msg_s)
        except CostModelError as exc:
            raise ConfigError(str(exc)) from exc

    def model_spec(self, shape: tuple[int, int, int] | None = None) -> ModelSpec:
        """Table II network for ``shape`` (depth, height, width); blobs shape by default."""
        depth, h, w = shape or (1, self.image_side, self.image_side)
        try:
            return table_ii(depth, h, w, self.split_index)
        except SpecError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> "RunConfig":
        """Check every field before any work starts."""
        self.topology_config().validate()
        self.attack_plan()
        self.cost_model()
        if self.dataset not in ("blobs", "idx"):
            raise ConfigError(f"dataset must be 'blobs' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("dataset 'idx' needs idx_images and idx_labels")
        if self.dataset == "blobs":
            if self.per_class < 1:
                raise ConfigError("per_class must be >= 1")
            if self.blob_noise < 0 or self.blob_jitter < 0:
                raise ConfigError("blob_noise and blob_jitter must be non-negative")
            self.model_spec()
        if self.partition not in ("label_shards", "dirichlet"):
            raise ConfigError(f"unknown partition scheme {self.partition!r}")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be positive")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1
                and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("val_fraction and test_fraction must leave data for training")
        return self

    def load_data(self) -> tuple[list[Dataset], Dataset, Dataset]:
        """(per-node clean partitions, validation set, test set)."""
        if self.dataset == "blobs":
            ds = gen_blobs(self.per_class, self.image_side, derive_seed(self.seed, "data"),
                           noise=self.blob_noise, jitter=self.blob_jitter)
        else:
            ds = load_idx(self.idx_images, self.idx_labels)
        train, val, test = holdout(ds, self.val_fraction, self.test_fraction, derive_seed(self.seed, "holdout"))
        plan = PartitionPlan(self.node_count, derive_seed(self.seed, "partition"), self.partition,
                             self.dirichlet_alpha)
        return partition(train, plan), val, test
