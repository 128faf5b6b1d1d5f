"""Command-line entry point.

Subcommands: train, eval, compare, dump-genotypes, bench. Config files are
flat JSON mirroring RunConfig field names; --set key=value flags override
file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from mega.harness import (
    RunConfig,
    compare_module_usage,
    config_from_dict,
    dump_genotypes,
    evaluate,
    load_config,
    run_training,
    success_table_csv,
)


def _parse_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw in ("true", "false"):
        return raw == "true"
    if raw == "null":
        return None
    return raw


def _apply_sets(cfg_dict, sets):
    for item in sets or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg_dict[key] = _parse_value(raw)
    return cfg_dict


def cmd_train(args):
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    _apply_sets(base, args.set)
    cfg = config_from_dict(base, seed=args.seed, out_dir=args.out)
    report = run_training(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_eval(args):
    table = evaluate(args.checkpoint, suite=args.suite, episodes_per_task=args.episodes, seed=args.seed)
    csv_text = success_table_csv(table)
    if args.out:
        Path(args.out).write_text(csv_text)
    sys.stdout.write(csv_text)
    print(f"suite_success,{table['suite_success']!r}")


def cmd_compare(args):
    result = compare_module_usage(args.a, args.b)
    print("task_id,stage_a,stage_b,difference")
    for r in result["rows"]:
        print(f"{r['task_id']},{r['stage_a']},{r['stage_b']},{r['difference']}")
    print(f"mean_difference,{result['mean_difference']!r}")


def cmd_dump_genotypes(args):
    text = dump_genotypes(args.checkpoint)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_bench(args):
    from mega.bench import run_benchmark

    run_benchmark(repeats=args.repeats)


def build_parser():
    parser = argparse.ArgumentParser(prog="mega", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=25)
    p.add_argument("--suite", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the success table CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-task stage difference between two runs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dump-genotypes", help="dump a checkpoint's genotypes as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_genotypes)

    p = sub.add_parser("bench", help="compare numpy and compiled kernel backends")
    p.add_argument("--repeats", type=int, default=200)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
