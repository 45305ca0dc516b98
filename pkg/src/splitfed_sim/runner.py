"""Run one configuration end to end, check run invariants, write outputs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .ledger import ChainVerificationError, Ledger, MissingEvaluation, RotationError, check_chain, run_bsfl
from .nn import CacheMismatch
from .protocol import ProtocolError
from .topology import TrainHistory, run_sfl, run_sl, run_ssfl

METRIC_COLUMNS = ("topology", "seed", "cycle", "round", "val_loss", "val_acc", "sim_time_s",
                  "messages", "bytes", "attacked", "winners")

RUNNERS = {"sl": run_sl, "sfl": run_sfl, "ssfl": run_ssfl}


class InvariantViolation(RuntimeError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant violated [{invariant}]: {detail}")
        self.invariant = invariant


@dataclass
class RunResult:
    config: RunConfig
    history: TrainHistory
    malicious_ids: list[int]
    ledger: Ledger | None = None

    @property
    def attacked(self) -> bool:
        return bool(self.malicious_ids)


def execute(cfg: RunConfig) -> RunResult:
    """Validate, load data, run the topology and check its invariants."""
    cfg.validate()
    partitions, val, test = cfg.load_data()
    spec = cfg.model_spec(partitions[0].shape)
    topo = cfg.topology_config()
    plan = cfg.attack_plan()
    cost_model = cfg.cost_model()
    ledger = None
    try:
        if cfg.topology == "bsfl":
            ledger = Ledger()
            history = run_bsfl(topo, spec, partitions, val, test, plan, cost_model, ledger)
        else:
            history = RUNNERS[cfg.topology](topo, spec, partitions, val, test, plan, cost_model)
    except RotationError as exc:
        raise InvariantViolation("committee rotation", str(exc)) from exc
    except MissingEvaluation as exc:
        raise InvariantViolation("complete evaluation", str(exc)) from exc
    except (ProtocolError, CacheMismatch) as exc:
        raise InvariantViolation("split protocol", str(exc)) from exc
    result = RunResult(cfg, history, sorted(plan.malicious_ids) if plan.active else [], ledger)
    check_invariants(result)
    return result


def check_invariants(result: RunResult) -> None:
    h = result.history
    if len(h.rows) != len(h.stats) or not h.rows:
        raise InvariantViolation("history length", f"{len(h.rows)} rows for {len(h.stats)} executed steps")
    keys = [(r.cycle, r.round) for r in h.rows]
    if keys != sorted(set(keys)):
        raise InvariantViolation("metrics ordering", "rows are not strictly ordered by (cycle, round)")
    if result.ledger is None:
        return
    committees = h.extras["committees"]
    for t, (a, b) in enumerate(zip(committees, committees[1:]), start=1):
        if set(a) & set(b):
            raise InvariantViolation("committee rotation", f"cycles {t} and {t + 1} share {sorted(set(a) & set(b))}")
    try:
        check_chain(result.ledger.blocks, result.ledger.store)
    except ChainVerificationError as exc:
        raise InvariantViolation("ledger integrity", str(exc)) from exc
    if len(result.ledger.blocks) != len(h.rows):
        raise InvariantViolation("ledger integrity", "one block per cycle expected")


def _num(x: float) -> str:
    return repr(float(x))


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    cfg = result.config
    for row in result.history.rows:
        winners = ";".join(str(w) for w in row.winners) if cfg.topology == "bsfl" else ""
        writer.writerow([cfg.topology, cfg.seed, row.cycle, row.round, _num(row.val_loss), _num(row.val_acc),
                         _num(row.sim_time), row.messages, row.bytes, str(result.attacked).lower(), winners])
    return buf.getvalue()


def summary(result: RunResult) -> dict:
    h = result.history
    out = {
        "topology": result.config.topology,
        "seed": result.config.seed,
        "attacked": result.attacked,
        "malicious_ids": result.malicious_ids,
        "test_loss": h.test_loss,
        "test_acc": h.test_acc,
        "cycles_run": h.rows[-1].cycle,
        "evaluations": len(h.rows),
        "stopped_early": h.stopped_early,
        "best_cycle": h.best_cycle,
        "avg_round_time_s": h.avg_round_time,
        "total_sim_time_s": sum(r.sim_time for r in h.rows),
        "messages": sum(r.messages for r in h.rows),
        "bytes": sum(r.bytes for r in h.rows),
        "config": result.config.to_dict(),
    }
    if result.ledger is not None:
        dirty = h.extras["dirty_winners"]
        out.update({
            "committees": h.extras["committees"],
            "winners": h.extras["winners"],
            "dirty_winner_cycles": sum(dirty),
            "chain_height": len(result.ledger.blocks),
            "chain_head": result.ledger.blocks[-1].hash.hex(),
        })
    return out


def write_outputs(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary(result), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    if result.ledger is not None:
        result.ledger.export(out / "chain")
    return out
