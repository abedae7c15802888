"""Command-line entry points: run, sweep, inspect, validate-config."""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import sys
from pathlib import Path

from .config import simconfig_from_dict
from .errors import ConfigError, ContractViolation, ParseError, ProtocolError
from .simulation import RunRecord, run_simulation, sweep


def _write_metrics_csv(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "round", "client_id", "protocol", "split",
            "accuracy", "precision", "recall", "quality_score", "in_Q",
        ])
        for r in record.metrics:
            writer.writerow([
                r["round"], r["client_id"], r["protocol"], r["split"],
                r["accuracy"], r["precision"], r["recall"],
                "" if r["quality_score"] is None else r["quality_score"],
                "" if r["in_q"] is None else r["in_q"],
            ])


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def _apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "protocol", None):
        raw["protocol"] = args.protocol
    return raw


def _cmd_run(args: argparse.Namespace) -> int:
    raw = _apply_overrides(_load_json(args.config), args)
    cfg = simconfig_from_dict(raw)
    record = run_simulation(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(record.to_json())
    _write_metrics_csv(out / "metrics.csv", record)
    if not args.quiet:
        s = record.summary
        print(f"protocol={record.protocol} seed={record.seed} hash={record.config_hash[:12]}")
        print(f"final mean accuracy={s['accuracy']:.4f} precision={s['precision']:.4f} "
              f"recall={s['recall']:.4f}")
        print(f"wrote {out / 'record.json'} and {out / 'metrics.csv'}")
    return 0


def _set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = _load_json(args.config)
    if "base" not in spec or "sweep" not in spec or not spec["sweep"]:
        raise ConfigError("a sweep file needs 'base' (a run config) and a non-empty 'sweep' map")
    base = _apply_overrides(spec["base"], args)
    axes = sorted(spec["sweep"])
    value_lists = [spec["sweep"][a] for a in axes]
    configs = []
    for combo in itertools.product(*value_lists):
        raw = copy.deepcopy(base)
        for axis, value in zip(axes, combo):
            _set_path(raw, axis, value)
        configs.append(simconfig_from_dict(raw))
    records, table = sweep(configs, swept=axes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, record in enumerate(records):
        (out / f"record_{i:03d}.json").write_text(record.to_json())
        _write_metrics_csv(out / f"metrics_{i:03d}.csv", record)
    with open(out / "comparison.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(axes + ["accuracy", "precision", "recall"])
        for row in table:
            writer.writerow([row[a] for a in axes]
                            + [row["accuracy"], row["precision"], row["recall"]])
    if not args.quiet:
        print(f"ran {len(records)} configs; wrote records and {out / 'comparison.csv'}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    record = RunRecord.from_dict(_load_json(args.record))
    print(f"protocol={record.protocol} seed={record.seed} config_hash={record.config_hash}")
    s = record.summary
    print(f"summary: accuracy={s['accuracy']:.4f} precision={s['precision']:.4f} "
          f"recall={s['recall']:.4f}")
    last_round = max((r["round"] for r in record.metrics), default=None)
    if last_round is not None:
        print(f"final round {last_round}:")
        print(f"{'client':>8} {'split':>6} {'acc':>8} {'prec':>8} {'rec':>8} {'in_Q':>5}")
        for r in record.metrics:
            if r["round"] != last_round:
                continue
            in_q = "" if r["in_q"] is None else str(r["in_q"])
            print(f"{r['client_id']:>8} {r['split']:>6} {r['accuracy']:>8.4f} "
                  f"{r['precision']:>8.4f} {r['recall']:>8.4f} {in_q:>5}")
    if record.comm_rounds:
        print("quality-set timeline:")
        for entry in record.comm_rounds:
            print(f"  round {entry['round']:>5}: Q={entry['quality_set']}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    simconfig_from_dict(_load_json(args.config))
    print("config ok")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sqmd",
        description="Messenger-distillation collaboration simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one simulation from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--protocol", default=None, help="override the config protocol")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser("sweep", help="run a base config across swept field values")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--protocol", default=None)
    sw.add_argument("--quiet", action="store_true")
    sw.set_defaults(func=_cmd_sweep)

    ins = sub.add_parser("inspect", help="pretty-print a run record summary")
    ins.add_argument("--record", required=True)
    ins.set_defaults(func=_cmd_inspect)

    val = sub.add_parser("validate-config", help="check a config without running it")
    val.add_argument("--config", required=True)
    val.set_defaults(func=_cmd_validate)

    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParseError, ProtocolError, ContractViolation, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
