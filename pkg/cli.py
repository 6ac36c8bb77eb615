"""
Command-line entry point.

CSV goes to stdout, logs to stderr. Exit codes: 0 success, 1 unexpected
failure or broken invariant, 2 configuration or argument error, 3 verification
failures observed by the countermeasure demo.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import analytics
import attackgen
import config
import metrics
import protocol
import shardsim
import utils
import visualizer
import workload
from debug_utils import global_debug_tracker
from hashshard import InvalidShardCountError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_VERIFICATION = 3

EXPERIMENT_KINDS = ("throughput", "latency", "queue")


def emit_csv(frame: pd.DataFrame) -> None:
    frame.to_csv(sys.stdout, index=False)


def build_config(args: argparse.Namespace) -> config.ExperimentConfig:
    """ExperimentConfig from --config (if any) with command-line overrides applied."""
    overrides = {
        'shards': getattr(args, "shards", None),
        'injection_tps': getattr(args, "injection_tps", None),
        'malicious_fraction': getattr(args, "malicious_fraction", None),
        'target_shard': getattr(args, "target", None),
        'sharder': getattr(args, "sharder", None),
        'bit_order': getattr(args, "bit_order", None),
        'seed': getattr(args, "seed", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "config", None):
        cfg = config.load_experiment_config(args.config, overrides)
    else:
        cfg = config.experiment_config_from_dict(overrides)
    count = getattr(args, "count", None)
    if count is not None:
        cfg = cfg.replace(workload=dataclasses.replace(cfg.workload, count=count))
    return cfg


def option_list(text: str, flag: str, parse=utils.parse_int_list) -> list:
    """Parse a comma-separated option; a malformed value is an argument error."""
    try:
        return parse(text)
    except ValueError as e:
        raise config.ConfigError(f"{flag}: {str(e)}")


def fraction_list(text: str) -> List[float]:
    return [utils.validate_fraction(f) for f in utils.parse_float_list(text)]


def load_recipe(path: str) -> Dict[str, Any]:
    """
    Read an experiment recipe: {"kind", "base", "shard_counts", "fractions"}.

    Raises:
        ConfigError: for unreadable files or missing keys
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            recipe = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise config.ConfigError(f"Cannot read recipe {path}: {str(e)}")
    missing = [key for key in ("kind", "shard_counts", "fractions") if key not in recipe]
    if missing:
        raise config.ConfigError(f"Recipe {path} is missing {', '.join(missing)}")
    if recipe["kind"] not in EXPERIMENT_KINDS:
        raise config.ConfigError(f"Recipe kind must be one of {EXPERIMENT_KINDS}")
    recipe["base"] = config.experiment_config_from_dict(recipe.get("base", {}))
    return recipe


def finish(args: argparse.Namespace, command: str, settings: Dict[str, Any], seeds: List[int],
           outputs: Sequence[str] = ()) -> None:
    utils.write_manifest(args.out, command, settings, seeds, list(outputs))
    if args.debug_report:
        global_debug_tracker.export_debug_report(args.debug_report)


def label_runs(runs, run_index: int):
    return [(dict(params, run=run_index), report) for params, report in runs]


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    cfgs = shardsim.seeded_runs(cfg, args.runs)
    runs = shardsim.run_experiments(cfgs, args.workers)
    paths = metrics.write_csvs(runs, args.out, queue_shards=args.queue_shards)
    if args.excel:
        metrics.export_to_excel(runs, os.path.join(args.out, "metrics.xlsx"))
    if args.plot:
        frames = {f"queue_{s}": metrics.queue_frame(runs, s) for s in (args.queue_shards or [0])}
        paths += visualizer.render_experiment("queue", frames, args.out)
    emit_csv(metrics.throughput_frame(runs).merge(
        metrics.latency_frame(runs), on=metrics.PARAM_COLUMNS + ["committed_count"]))
    finish(args, "simulate", cfg.to_dict(), [c.seed for c in cfgs], paths)
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    if args.recipe:
        recipe = load_recipe(args.recipe)
        kind, base = recipe["kind"], recipe["base"]
        shard_counts, fractions = recipe["shard_counts"], recipe["fractions"]
        if args.kind and args.kind != kind:
            raise config.ConfigError(f"Recipe {args.recipe} describes a {kind} experiment, not {args.kind}")
    else:
        if not args.kind:
            raise config.ConfigError("Give an experiment kind or --recipe")
        kind, base = args.kind, build_config(args)
        shard_counts, fractions = [4, 8, 12, 16], [0.0, 0.1, 0.2, 0.3, 0.5]
    if args.shard_counts:
        shard_counts = option_list(args.shard_counts, "--shard-counts")
    if args.fractions:
        fractions = option_list(args.fractions, "--fractions", fraction_list)

    sweep = {
        'throughput': shardsim.throughput_sweep,
        'latency': shardsim.latency_sweep,
        'queue': shardsim.queue_sweep,
    }[kind]
    replicas = shardsim.seeded_runs(base, args.runs)
    runs = []
    for index, replica in enumerate(replicas):
        runs.extend(label_runs(sweep(replica, shard_counts, fractions, args.workers), index))

    paths = metrics.write_csvs(runs, args.out, queue_shards=[0])
    frames = {
        'throughput': metrics.throughput_frame(runs),
        'latency': metrics.latency_frame(runs),
        'queue_0': metrics.queue_frame(runs, 0),
    }
    if args.plot:
        paths += visualizer.render_experiment(kind, frames, args.out)
    emit_csv(frames['queue_0' if kind == "queue" else kind])
    settings = {'kind': kind, 'base': base.to_dict(), 'shard_counts': shard_counts, 'fractions': fractions}
    finish(args, f"experiment {kind}", settings, [r.seed for r in replicas], paths)
    return EXIT_OK


def cmd_attack_bench(args: argparse.Namespace) -> int:
    rows = []
    book, _ = attackgen.fund_attacker(0, 1, seed=args.seed)
    for n in option_list(args.shards, "--shards"):
        cfg = attackgen.AttackConfig(target_shard=0, shard_count=n, funded=book, worker_count=args.threads,
                                     rng_seed=args.seed)
        rows.append(attackgen.bench_generation(cfg, args.seconds).to_row())
    frame = pd.DataFrame(rows)
    path = os.path.join(utils.ensure_output_dir(args.out), "attack_bench.csv")
    frame.to_csv(path, index=False)
    emit_csv(frame)
    finish(args, "attack-bench", {'shards': args.shards, 'seconds': args.seconds, 'threads': args.threads},
           [args.seed], [path])
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    what = args.what
    settings: Dict[str, Any] = {'what': what}
    if what == "affected":
        frame = analytics.affected_curve(option_list(args.shards, "--shards"),
                                         option_list(args.inputs, "--inputs"))
        if args.samples:
            rng = np.random.default_rng(0)
            estimates = [analytics.monte_carlo_affected(int(n), int(m), args.samples, rng)
                         for n, m in zip(frame["shards"], frame["inputs"])]
            frame["monte_carlo"] = [e[0] for e in estimates]
            frame["monte_carlo_se"] = [e[1] for e in estimates]
        if args.plot:
            visualizer.render_experiment("affected", {'affected': frame}, utils.ensure_output_dir(args.out))
    elif what == "attempts":
        frame = analytics.attempts_table(option_list(args.shards, "--shards"), args.hash_rate)
    elif what == "cost":
        if args.rate is not None:
            budget = analytics.attack_budget(args.rate, args.seconds)
            frame = pd.DataFrame([{'rate_tps': args.rate, 'seconds': args.seconds, 'usd': budget}])
        else:
            frame = pd.DataFrame([{'tx_count': args.count, 'usd': analytics.attack_cost(args.count)}])
    elif what == "fit":
        if not args.dataset:
            raise config.ConfigError("analyze fit needs --dataset")
        n = option_list(args.shards, "--shards")[0]
        degree = workload.fit_power_law(workload.degree_histogram(workload.load_dataset(args.dataset)))
        inshard = workload.fit_power_law(workload.inshard_histogram(workload.load_dataset(args.dataset), n))
        frame = pd.DataFrame([
            {'law': 'degree', 'scale': degree.scale, 'exponent': degree.exponent, 'x_max': degree.x_max},
            {'law': 'inshard', 'scale': inshard.scale, 'exponent': inshard.exponent, 'x_max': inshard.x_max},
        ])
    else:
        if not args.dataset:
            raise config.ConfigError("analyze empirical needs --dataset")
        rows = []
        for n in option_list(args.shards, "--shards"):
            fraction = analytics.affected_fraction_empirical(workload.load_dataset(args.dataset), n, args.target)
            rows.append({'shards': n, 'target': args.target, 'affected_fraction': fraction})
        frame = pd.DataFrame(rows)
    emit_csv(frame)
    settings.update({k: v for k, v in vars(args).items() if k not in ("func",)})
    finish(args, f"analyze {what}", settings, [])
    return EXIT_OK


def cmd_gen_workload(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    stream = workload.synth_generate(args.count, shardsim.law_spec(cfg.degree_law),
                                     shardsim.law_spec(cfg.inshard_law), cfg.shards,
                                     np.random.default_rng(cfg.seed), args.recency_window or cfg.workload.recency_window,
                                     byteorder=cfg.bit_order)
    written = workload.write_dataset(args.dataset_out, stream)
    logger.info(f"Generated {written} records")
    finish(args, "gen-workload", cfg.to_dict(), [cfg.seed], [args.dataset_out])
    return EXIT_OK


def cmd_gen_attack(args: argparse.Namespace) -> int:
    cfg = build_config(args).replace(injection_tps=args.rate, malicious_fraction=args.fraction)
    stream = (item.tx for item in shardsim.build_stream(cfg))
    if args.dataset_out:
        outputs = [args.dataset_out]
        workload.write_dataset(args.dataset_out, stream)
    else:
        outputs = []
        for tx in stream:
            sys.stdout.write(workload.format_record(tx) + "\n")
    finish(args, "gen-attack", cfg.to_dict(), [cfg.seed], outputs)
    return EXIT_OK


def cmd_countermeasure_demo(args: argparse.Namespace) -> int:
    forgeries = args.forgeries if args.forgeries is not None else (0 if args.adversary == "none" else 1)
    world_cfg = protocol.WorldConfig(shards=args.shards or 4, validators=args.validators, clients=args.clients,
                                     adversary=args.adversary, forgeries_per_tx=forgeries,
                                     seed=args.seed if args.seed is not None else 0)
    world = protocol.CountermeasureWorld(world_cfg)
    report = world.run(args.txs)

    transcript = pd.DataFrame(report.transcript)
    path = os.path.join(utils.ensure_output_dir(args.out), "transcript.csv")
    transcript.to_csv(path, index=False)
    emit_csv(transcript if args.transcript else pd.DataFrame([report.summary()]))
    finish(args, "countermeasure-demo", dataclasses.asdict(world_cfg), [world_cfg.seed], [path])

    if not report.sound:
        logger.error(f"Countermeasure invariants violated: {report.summary()}")
        return EXIT_FAILURE
    if report.verification_failures:
        logger.warning(f"{report.verification_failures} attestations failed verification")
        return EXIT_VERIFICATION
    return EXIT_OK


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment configuration JSON")
    parser.add_argument("--shards", type=int)
    parser.add_argument("--injection-tps", type=float)
    parser.add_argument("--malicious-fraction", type=float)
    parser.add_argument("--target", type=int, help="attacked shard")
    parser.add_argument("--sharder", choices=config.SHARDERS)
    parser.add_argument("--bit-order", choices=config.BIT_ORDERS, help="how a txid digest is read as an integer")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--count", type=int, help="workload transactions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardflood", description=config.APP_NAME)
    parser.add_argument("--out", default=config.OUTPUT_DIR, help="output directory")
    parser.add_argument("--log-level", default=config.LOG_LEVEL)
    parser.add_argument("--log-file")
    parser.add_argument("--debug-report", help="write the debug tracker report to this JSON file")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run the sharded simulator")
    add_config_flags(simulate)
    simulate.add_argument("--runs", type=int, default=1)
    simulate.add_argument("--workers", type=int, default=1)
    simulate.add_argument("--queue-shards", type=utils.parse_int_list)
    simulate.add_argument("--excel", action="store_true")
    simulate.add_argument("--plot", action="store_true")
    simulate.set_defaults(func=cmd_simulate)

    experiment = commands.add_parser("experiment", help="throughput, latency or queue sweeps")
    experiment.add_argument("kind", nargs="?", choices=EXPERIMENT_KINDS)
    experiment.add_argument("--recipe", help="experiments/*.json recipe")
    add_config_flags(experiment)
    experiment.add_argument("--shard-counts")
    experiment.add_argument("--fractions")
    experiment.add_argument("--runs", type=int, default=1)
    experiment.add_argument("--workers", type=int, default=1)
    experiment.add_argument("--plot", action="store_true")
    experiment.set_defaults(func=cmd_experiment)

    bench = commands.add_parser("attack-bench", help="hash-grinding rates")
    bench.add_argument("--shards", default="2,4,8,16,32,64")
    bench.add_argument("--seconds", type=float, default=5.0)
    bench.add_argument("--threads", type=int, default=1)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_attack_bench)

    analyze = commands.add_parser("analyze", help="closed-form and dataset analyses")
    analyze.add_argument("what", choices=("affected", "attempts", "cost", "fit", "empirical"))
    analyze.add_argument("--shards", default="16")
    analyze.add_argument("--inputs", default="2")
    analyze.add_argument("--samples", type=int, help="Monte Carlo samples per point")
    analyze.add_argument("--hash-rate", type=float, default=1e6)
    analyze.add_argument("--count", type=int, default=2500, help="malicious transactions to price")
    analyze.add_argument("--rate", type=float, help="sustained malicious tps to price")
    analyze.add_argument("--seconds", type=float, default=1.0)
    analyze.add_argument("--dataset")
    analyze.add_argument("--target", type=int, default=0)
    analyze.add_argument("--plot", action="store_true")
    analyze.set_defaults(func=cmd_analyze)

    gen = commands.add_parser("gen-workload", help="synthetic TaN dataset")
    add_config_flags(gen)
    gen.add_argument("--recency-window", type=int)
    gen.add_argument("--dataset-out", "-o", required=True)
    gen.set_defaults(func=cmd_gen_workload, count=10_000)

    attack = commands.add_parser("gen-attack", help="mixed attack stream in the dataset format")
    add_config_flags(attack)
    attack.add_argument("--rate", type=float, default=config.DEFAULT_INJECTION_TPS)
    attack.add_argument("--fraction", type=float, default=0.1)
    attack.add_argument("--dataset-out", "-o")
    attack.set_defaults(func=cmd_gen_attack, count=10_000)

    demo = commands.add_parser("countermeasure-demo", help="client/validator protocol against an adversary")
    demo.add_argument("--adversary", choices=protocol.ADVERSARIES, default="none")
    demo.add_argument("--txs", type=int, default=200)
    demo.add_argument("--shards", type=int)
    demo.add_argument("--validators", type=int, default=6)
    demo.add_argument("--clients", type=int, default=3)
    demo.add_argument("--forgeries", type=int, help="forged placements per transaction")
    demo.add_argument("--seed", type=int)
    demo.add_argument("--transcript", action="store_true", help="print the full transcript")
    demo.set_defaults(func=cmd_countermeasure_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    utils.setup_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except (config.ConfigError, InvalidShardCountError, FileNotFoundError) as e:
        logger.error(str(e))
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"{args.command} failed: {str(e)}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
