"""Command-line entry points.

Subcommands:
  run         - one continual-learning experiment from a flat key=value config
  toy2d       - trajectories of the three update rules on the 2-D landscape
  kroncheck   - Kronecker-sum approximation comparison over a Fisher sequence
  fishercheck - factored-approximation comparison against the exact Fisher
  grid        - rerun a config over a list of values for one parameter

Config files are flat `key = value` lines (# comments allowed). Keys mirror
the experiment and learner configuration fields; the dataset root comes from
`data_dir` or the CLLAB_DATA environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import bench, learners
from .bench import ExperimentConfig, MetricsRecord, emit_metrics
from .learners import LearnerConfig
from .tasks import Toy2dProblem

EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"learner"}
LEARNER_KEYS = {f.name for f in dataclasses.fields(LearnerConfig)}


def parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", ""):
        return None
    if "," in raw:
        return tuple(parse_value(v) for v in raw.split(","))
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def read_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            key, raw = line.split("=", 1)
            values[key.strip()] = parse_value(raw)
    return values


def config_from_values(values: dict) -> ExperimentConfig:
    unknown = set(values) - EXPERIMENT_KEYS - LEARNER_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    method = values.get("method", learners.NCL)
    task_set = values.get("task_set", "split_mnist_task")
    learner = bench.preset_learner(task_set, method)
    learner_overrides = {k: v for k, v in values.items() if k in LEARNER_KEYS}
    learner = dataclasses.replace(learner, **learner_overrides)
    experiment_overrides = {k: v for k, v in values.items() if k in EXPERIMENT_KEYS}
    if "hidden" in experiment_overrides and isinstance(experiment_overrides["hidden"], int):
        experiment_overrides["hidden"] = (experiment_overrides["hidden"],)
    if "task_order" in experiment_overrides and experiment_overrides["task_order"] is not None:
        experiment_overrides["task_order"] = list(experiment_overrides["task_order"])
    return ExperimentConfig(learner=learner, **experiment_overrides)


def cmd_run(args) -> int:
    config = config_from_values(read_config_file(args.config))
    records, trace = bench.run_continual_experiment(config)
    out = args.output or config.output_path
    if out:
        emit_metrics(records, out)
        print(f"wrote {len(records)} records to {out}")
    if args.trace and trace:
        emit_metrics(trace, args.trace)
        print(f"wrote {len(trace)} trace rows to {args.trace}")
    final = [r for r in records if r.task_learned == max(r.task_learned for r in records)]
    for metric in sorted({r.metric for r in final}):
        vals = [r.value for r in final if r.metric == metric]
        print(f"final mean {metric}: {np.mean(vals):.4f}")
    return 0


def cmd_toy2d(args) -> int:
    trajectories = bench.toy2d_trajectories(
        Toy2dProblem(), nonconvex=args.nonconvex,
        learning_rate=args.learning_rate, iters=args.iters,
    )
    for rule, rows in trajectories.items():
        if args.output:
            path = args.output.replace(".csv", f"_{rule}.csv")
            np.savetxt(
                path, rows, delimiter=",", fmt="%.17g",
                header="theta_x,theta_y,loss1,loss2,loss_total", comments="",
            )
            print(f"wrote {path}")
        final = rows[-1]
        print(
            f"{rule:>10}: end=({final[0]:+.4f},{final[1]:+.4f}) "
            f"loss1={final[2]:.5f} loss2={final[3]:.5f} total={final[4]:.5f} "
            f"max-transient-loss1={rows[:, 2].max():.5f}"
        )
    return 0


def cmd_kroncheck(args) -> int:
    if args.source == "random":
        pairs = bench.random_fisher_sequence(args.seed, n_tasks=args.tasks)
    else:
        pairs = bench.network_fisher_sequence(args.seed, n_tasks=args.tasks)
    rows = bench.compare_kron_sums(pairs)
    print("k,method,correlation,full_kl,scaled_kl")
    for row in rows:
        print(
            f"{row['k']},{row['method']},{row['correlation']:.6f},"
            f"{row['full_kl']:.6g},{row['scaled_kl']:.6g}"
        )
    return 0


def cmd_fishercheck(args) -> int:
    results = bench.compare_fisher_approximations(
        seed=args.seed, n_rotations=args.rotations, n_mc=args.samples
    )
    print("likelihood,block,method,scaled_kl")
    for likelihood, table in results.items():
        for block, entries in table.items():
            for method, value in entries.items():
                print(f"{likelihood},{block},{method},{value:.6g}")
    return 0


def cmd_grid(args) -> int:
    values = read_config_file(args.config)
    grid_values = [parse_value(v) for v in args.values.split(",")]
    all_records: list[MetricsRecord] = []
    for value in grid_values:
        values[args.param] = value
        config = config_from_values(values)
        records, _ = bench.run_continual_experiment(config)
        tagged = [
            dataclasses.replace(r, method=f"{r.method}[{args.param}={value}]")
            for r in records
        ]
        all_records.extend(tagged)
        last = max(r.task_learned for r in records)
        for metric in sorted({r.metric for r in records}):
            vals = [r.value for r in records if r.task_learned == last and r.metric == metric]
            print(f"{args.param}={value}: final mean {metric} = {np.mean(vals):.4f}")
    if args.output:
        emit_metrics(all_records, args.output)
        print(f"wrote {len(all_records)} records to {args.output}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cllab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a continual-learning experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output", default=None, help="metrics CSV path")
    p_run.add_argument("--trace", default=None, help="per-iteration loss trace CSV")
    p_run.set_defaults(func=cmd_run)

    p_toy = sub.add_parser("toy2d", help="trajectories on the 2-D landscape")
    p_toy.add_argument("--nonconvex", action="store_true")
    p_toy.add_argument("--learning-rate", type=float, default=0.01)
    p_toy.add_argument("--iters", type=int, default=6000)
    p_toy.add_argument("--output", default=None, help="per-rule CSV stem")
    p_toy.set_defaults(func=cmd_toy2d)

    p_kron = sub.add_parser("kroncheck", help="Kronecker-sum comparison")
    p_kron.add_argument("--seed", type=int, default=0)
    p_kron.add_argument("--tasks", type=int, default=5)
    p_kron.add_argument("--source", choices=("random", "network"), default="random")
    p_kron.set_defaults(func=cmd_kroncheck)

    p_fish = sub.add_parser("fishercheck", help="Fisher-approximation comparison")
    p_fish.add_argument("--seed", type=int, default=0)
    p_fish.add_argument("--rotations", type=int, default=500)
    p_fish.add_argument("--samples", type=int, default=20000)
    p_fish.set_defaults(func=cmd_fishercheck)

    p_grid = sub.add_parser("grid", help="sweep one parameter over values")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--param", required=True)
    p_grid.add_argument("--values", required=True, help="comma-separated values")
    p_grid.add_argument("--output", default=None)
    p_grid.set_defaults(func=cmd_grid)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
