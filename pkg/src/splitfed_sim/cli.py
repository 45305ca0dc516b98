"""Command line entry point: run, validate and compare simulations."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import DataFormatError
from .runner import InvariantViolation, execute, summary, write_outputs
from .topology import ConfigError

EXIT_CONFIG = 1
EXIT_INVARIANT = 2

TABLE_COLUMNS = ("approach", "condition", "test_loss", "avg_round_time_s")


def _load(path: str, seed: int | None) -> RunConfig:
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def cmd_validate(args) -> int:
    cfg = _load(args.config, args.seed)
    plan = cfg.attack_plan()
    print(f"ok: {cfg.topology}, {cfg.node_count} nodes, seed {cfg.seed}, "
          f"{plan.count if plan.active else 0} malicious")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    out = args.out or cfg.out_dir or f"runs/{cfg.topology}_seed{cfg.seed}"
    result = execute(cfg)
    write_outputs(result, out)
    h = result.history
    print(f"{cfg.topology}: final test loss {h.test_loss:.4f} (acc {h.test_acc:.3f}), "
          f"total simulated time {sum(r.sim_time for r in h.rows):.3f} s, outputs in {out}")
    return 0


def _row(info: dict) -> dict:
    return {
        "approach": info["topology"].upper(),
        "condition": "attacked" if info["attacked"] else "normal",
        "test_loss": info["test_loss"],
        "avg_round_time_s": info["avg_round_time_s"],
    }


def comparison_rows(sources, seed: int | None = None) -> list[dict]:
    """One Table III style row per run directory (or config file, run in memory)."""
    rows = []
    for src in sources:
        path = Path(src)
        if path.is_dir():
            summary_file = path / "summary.json"
            if not summary_file.is_file():
                raise ConfigError(f"{src} has no summary.json; run it first")
            rows.append(_row(json.loads(summary_file.read_text(encoding="utf-8"))))
        elif path.is_file():
            rows.append(_row(summary(execute(_load(src, seed)))))
        else:
            raise ConfigError(f"missing run output {src}")
    return rows


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two runs")
    rows = comparison_rows(args.runs, args.seed)
    if args.csv:
        print(",".join(TABLE_COLUMNS))
        for r in rows:
            print(f"{r['approach']},{r['condition']},{r['test_loss']!r},{r['avg_round_time_s']!r}")
        return 0
    print(f"{'Approach':<10}{'Condition':<11}{'Test loss':>11}{'Avg round (s)':>15}")
    for r in rows:
        print(f"{r['approach']:<10}{r['condition']:<11}{r['test_loss']:>11.4f}{r['avg_round_time_s']:>15.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitfed-sim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-cycle progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration end to end")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="output directory (default: config out_dir or runs/<topology>_seed<seed>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="parse and validate a configuration only")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="Table III style comparison of finished runs")
    p.add_argument("runs", nargs="+", help="run directories or config files")
    p.add_argument("--seed", type=int, help="seed override for config-file arguments")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
