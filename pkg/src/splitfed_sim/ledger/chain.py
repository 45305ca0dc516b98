"""Append-only hash chain with content-addressed payloads.

Each block records the contract events of one cycle plus a state hash over
the new global models and the cycle's score table. Payload bytes live in a
store keyed by their SHA-256 digest; blocks only carry digests.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

EVENT_KINDS = ("AssignNodes", "ModelPropose", "EvaluationPropose")
ZERO_HASH = bytes(32)


class LedgerError(ValueError):
    pass


class ChainVerificationError(LedgerError):
    def __init__(self, height: int, reason: str):
        super().__init__(f"block {height}: {reason}")
        self.height = height
        self.reason = reason


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class ContractEvent:
    kind: str
    cycle: int
    digest: str
    payload_type: str  # "json" or "sfw"
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise LedgerError(f"unknown contract {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cycle": self.cycle, "digest": self.digest,
                "payload_type": self.payload_type, "meta": dict(self.meta)}


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    previous_hash: bytes
    events: tuple[ContractEvent, ...]
    state: tuple[str, str, str]  # digests of global W^S, global W^C, score table
    state_hash: bytes
    hash: bytes

    def header(self) -> dict:
        return {
            "height": self.height,
            "previous_hash": self.previous_hash.hex(),
            "state_hash": self.state_hash.hex(),
            "state": list(self.state),
            "events": [e.to_dict() for e in self.events],
        }

    def to_dict(self) -> dict:
        return {**self.header(), "hash": self.hash.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerBlock":
        events = tuple(ContractEvent(e["kind"], e["cycle"], e["digest"], e["payload_type"], e["meta"])
                       for e in d["events"])
        return cls(d["height"], bytes.fromhex(d["previous_hash"]), events, tuple(d["state"]),
                   bytes.fromhex(d["state_hash"]), bytes.fromhex(d["hash"]))


def _block_hash(header: dict) -> bytes:
    return hashlib.sha256(canonical_json(header)).digest()


def state_hash(ws: bytes, wc: bytes, scores: bytes) -> bytes:
    return hashlib.sha256(ws + wc + scores).digest()


def _check_order(events: Sequence[ContractEvent]):
    ranks = [EVENT_KINDS.index(e.kind) for e in events]
    if ranks != sorted(ranks):
        raise LedgerError("events must run AssignNodes -> ModelPropose -> EvaluationPropose")
    if len({e.cycle for e in events}) > 1:
        raise LedgerError("a block holds the events of a single cycle")


class Ledger:
    def __init__(self):
        self.blocks: list[LedgerBlock] = []
        self.store: dict[str, bytes] = {}

    def put(self, payload: bytes) -> str:
        digest = sha256_hex(payload)
        self.store.setdefault(digest, payload)
        return digest

    def event(self, kind: str, cycle: int, payload: bytes, payload_type: str, **meta) -> ContractEvent:
        return ContractEvent(kind, cycle, self.put(payload), payload_type, meta)

    def append_block(self, events: Sequence[ContractEvent], ws: bytes, wc: bytes, scores: bytes) -> LedgerBlock:
        if not events:
            raise LedgerError("a block needs at least one event")
        _check_order(events)
        for e in events:
            if e.digest not in self.store:
                raise LedgerError(f"event payload {e.digest[:12]} is not in the store")
        state = (self.put(ws), self.put(wc), self.put(scores))
        prev = self.blocks[-1].hash if self.blocks else ZERO_HASH
        partial = LedgerBlock(len(self.blocks), prev, tuple(events), state, state_hash(ws, wc, scores), b"")
        block = LedgerBlock(**{**partial.__dict__, "hash": _block_hash(partial.header())})
        self.blocks.append(block)
        return block

    def payload(self, digest: str) -> bytes:
        return self.store[digest]

    def verify(self) -> bool:
        return verify_chain(self.blocks, self.store)

    def export(self, directory) -> None:
        export_chain(self.blocks, self.store, directory)


def check_chain(blocks: Sequence[LedgerBlock], store: Mapping[str, bytes]) -> None:
    """Raise ChainVerificationError at the first block that fails to verify."""
    prev = ZERO_HASH
    for expected_height, block in enumerate(blocks):
        h = block.height
        if h != expected_height:
            raise ChainVerificationError(expected_height, f"height {h} out of sequence")
        if block.previous_hash != prev:
            raise ChainVerificationError(h, "previous_hash does not match predecessor")
        for e in block.events:
            payload = store.get(e.digest)
            if payload is None or sha256_hex(payload) != e.digest:
                raise ChainVerificationError(h, f"{e.kind} payload {e.digest[:12]} missing or altered")
        parts = []
        for digest in block.state:
            payload = store.get(digest)
            if payload is None or sha256_hex(payload) != digest:
                raise ChainVerificationError(h, f"state payload {digest[:12]} missing or altered")
            parts.append(payload)
        if state_hash(*parts) != block.state_hash:
            raise ChainVerificationError(h, "state hash mismatch")
        if _block_hash(block.header()) != block.hash:
            raise ChainVerificationError(h, "block hash mismatch")
        prev = block.hash


def verify_chain(blocks: Sequence[LedgerBlock], store: Mapping[str, bytes]) -> bool:
    try:
        check_chain(blocks, store)
    except ChainVerificationError:
        return False
    return True


def first_bad_height(blocks: Sequence[LedgerBlock], store: Mapping[str, bytes]) -> int | None:
    try:
        check_chain(blocks, store)
    except ChainVerificationError as err:
        return err.height
    return None


def _suffix(payload_type: str) -> str:
    return ".sfw" if payload_type == "sfw" else ".json"


def export_chain(blocks: Sequence[LedgerBlock], store: Mapping[str, bytes], directory) -> None:
    """One JSON file per block plus a payloads/ directory named by digest."""
    root = Path(directory)
    payloads = root / "payloads"
    payloads.mkdir(parents=True, exist_ok=True)
    for block in blocks:
        (root / f"block_{block.height:06d}.json").write_text(
            json.dumps(block.to_dict(), sort_keys=True, indent=1) + "\n"
        )
        typed = [(e.digest, e.payload_type) for e in block.events]
        typed += list(zip(block.state, ("sfw", "sfw", "json")))
        for digest, ptype in typed:
            (payloads / f"{digest}{_suffix(ptype)}").write_bytes(store[digest])


def load_chain(directory) -> tuple[list[LedgerBlock], dict[str, bytes]]:
    root = Path(directory)
    blocks = [LedgerBlock.from_dict(json.loads(p.read_text())) for p in sorted(root.glob("block_*.json"))]
    store = {p.stem: p.read_bytes() for p in sorted((root / "payloads").iterdir())}
    return blocks, store
