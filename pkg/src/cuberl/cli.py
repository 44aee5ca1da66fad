"""Command-line entry point: gen-data, train, eval, verify-theorem,
sweep-delta, plot-data.

Exit codes: 0 success, 1 theorem violation, 2 config/usage error,
3 data error, 4 numeric abort. Every command takes one seed; derived
streams are documented in cuberl.rng. Run directories are timestamped
under the output root (env var CUBERL_RUNS_ROOT overrides) and never
overwritten without --force.
"""

import argparse
import csv
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as cfg
from . import oracle as oracle_mod
from .dataset import NormalizedStates, OrldError, load_dataset, save_dataset
from .envs import ReferenceReturns, generate_dataset, reference_returns
from .hypercube import GridSpec, build_cell_table, dump_cells_csv, init_champion_cache
from .nets import NonFiniteGradientError, load_checkpoint, save_checkpoint
from .oracle import ValueIterationError
from .trainer import (METRIC_COLUMNS, NumericAbortError, actor_policy,
                      evaluate, make_q_min, train)

EXIT_OK = 0
EXIT_THEOREM = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RUNS_ROOT_ENV = "CUBERL_RUNS_ROOT"


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run directories and artifacts

def _runs_root(config: cfg.RunConfig) -> Path:
    override = os.environ.get(RUNS_ROOT_ENV)
    return Path(override) if override else Path(config.output.root)


def make_run_dir(config: cfg.RunConfig, command: str) -> Path:
    if config.output.dir:
        run_dir = Path(config.output.dir)
        if run_dir.exists() and not config.output.force:
            raise DataError(f"run directory {run_dir} exists (use --force)")
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir
    root = _runs_root(config)
    stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{time.time_ns() % 1_000_000:06d}"
    run_dir = root / f"{command}-{stamp}"
    n = 1
    while run_dir.exists():
        n += 1
        run_dir = root / f"{command}-{stamp}-{n}"
    run_dir.mkdir(parents=True)
    return run_dir


def echo_config(config: cfg.RunConfig, run_dir: Path) -> None:
    (run_dir / "config.resolved.toml").write_text(cfg.resolved_text(config))


def _refs_from_sidecar(path: Path) -> ReferenceReturns:
    data = cfg.parse_sections(path.read_text())
    refs = data["references"]
    return ReferenceReturns(
        random_return=float(refs["random_return"]),
        expert_return=float(refs["expert_return"]),
        n_episodes=int(refs["n_episodes"]),
        seed=int(refs["seed"]),
    )


def _sidecar_path(dataset_path: str) -> Path:
    return Path(str(dataset_path) + ".meta")


def _load_refs(config: cfg.RunConfig, env) -> ReferenceReturns:
    sidecar = _sidecar_path(config.train.dataset)
    if sidecar.exists():
        return _refs_from_sidecar(sidecar)
    return reference_returns(env, config.train.seed)


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_data(config: cfg.RunConfig, args) -> int:
    env = cfg.build_env(config.env)
    spec = cfg.build_tier_spec(config.data)
    out_path = Path(config.data.path)
    sidecar = _sidecar_path(out_path)
    for p in (out_path, sidecar):
        if p.exists() and not config.output.force:
            raise DataError(f"{p} exists (use --force)")
    out_path.parent.mkdir(parents=True, exist_ok=True)

    dataset = generate_dataset(env, spec)
    save_dataset(dataset, out_path)

    refs = reference_returns(env, spec.seed)
    sidecar_data = {
        "provenance": {"tier": spec.tier, "n_transitions": spec.n_transitions,
                       "seed": spec.seed},
        "env": {f.name: getattr(config.env, f.name) for f in fields(config.env)},
        "references": {"random_return": refs.random_return,
                       "expert_return": refs.expert_return,
                       "n_episodes": refs.n_episodes, "seed": refs.seed},
    }
    sidecar.write_text(cfg.format_sections(sidecar_data))
    print(f"wrote {out_path} ({len(dataset)} transitions) and {sidecar}")
    return EXIT_OK


def cmd_train(config: cfg.RunConfig, args) -> int:
    dataset_path = Path(config.train.dataset)
    if not dataset_path.exists():
        raise DataError(f"dataset {dataset_path} not found")
    dataset = load_dataset(dataset_path)
    env = cfg.build_env(config.env)
    if env.state_dim != dataset.state_dim or env.action_dim != dataset.action_dim:
        raise DataError(
            f"env dims ({env.state_dim}, {env.action_dim}) do not match dataset "
            f"dims ({dataset.state_dim}, {dataset.action_dim})")
    train_config = cfg.build_train_config(config.train)
    refs = _load_refs(config, env)

    run_dir = make_run_dir(config, "train")
    echo_config(config, run_dir)

    def progress(record):
        print(f"epoch {record.epoch:4d} step {record.step:7d} "
              f"critic {record.critic_loss:.4f} bc {record.bc_loss:.4f} "
              f"score {record.normalized_score:.1f}")

    started = time.perf_counter()
    try:
        nets, norm, report = train(train_config, dataset, env, refs, progress)
    except (NumericAbortError, NonFiniteGradientError):
        # Flush at least the header so partial runs leave a parseable file.
        (run_dir / "metrics.csv").write_text(",".join(METRIC_COLUMNS) + "\n")
        raise
    elapsed = time.perf_counter() - started

    (run_dir / "metrics.csv").write_text(report.metrics_csv())
    (run_dir / "timing.csv").write_text(report.timing_csv())
    save_checkpoint(
        run_dir / "checkpoint.bin",
        nets={"actor": nets.actor, "critic1": nets.critic1, "critic2": nets.critic2,
              "target_actor": nets.target_actor, "target_critic1": nets.target_critic1,
              "target_critic2": nets.target_critic2},
        adams={"actor": nets.adam_actor, "critic1": nets.adam_critic1,
               "critic2": nets.adam_critic2},
        arrays={"state_mean": norm.mean, "state_std": norm.std,
                "norm_eps": np.array([norm.eps])},
    )
    per_epoch = elapsed / max(train_config.max_epochs, 1)
    (run_dir / "summary.txt").write_text(
        f"total_wall_time_s = {elapsed:.6f}\n"
        f"epochs = {train_config.max_epochs}\n"
        f"wall_time_per_epoch_s = {per_epoch:.6f}\n"
        f"use_hypercube = {str(train_config.use_hypercube).lower()}\n")

    if args.dump_cells:
        grid = GridSpec.from_dataset(dataset, train_config.delta)
        table = build_cell_table(grid, dataset)
        cache = init_champion_cache(table, dataset, make_q_min(nets, norm))
        dump_cells_csv(table, cache, run_dir / "cells.csv")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(config: cfg.RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} not found")
    nets, _, arrays = load_checkpoint(ckpt_path)
    if "actor" not in nets:
        raise DataError("checkpoint has no actor network")
    env = cfg.build_env(config.env)
    actor = nets["actor"]
    if actor.in_dim != env.state_dim:
        raise DataError(
            f"checkpoint actor expects {actor.in_dim}-dim states, env has {env.state_dim}")
    norm = NormalizedStates.from_stats(mean=arrays["state_mean"], std=arrays["state_std"],
                                       eps=float(arrays["norm_eps"][0]))
    refs = _load_refs(config, env)
    result = evaluate(actor_policy(actor, norm), env,
                      config.train.eval_episodes, config.train.seed, refs)
    run_dir = make_run_dir(config, "eval")
    echo_config(config, run_dir)
    text = (f"eval_return_mean = {result.mean_return!r}\n"
            f"eval_return_std = {result.std_return!r}\n"
            f"normalized_score = {result.score!r}\n")
    (run_dir / "eval.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_verify_theorem(config: cfg.RunConfig, args) -> int:
    oc = config.oracle
    if not oc.deltas:
        raise cfg.ConfigError("oracle.deltas must be non-empty")
    run_dir = make_run_dir(config, "verify-theorem")
    echo_config(config, run_dir)

    exact_ok = True
    thresholds = []
    lines = ["mdp,regime,result"]
    for i in range(oc.n_mdps):
        mdp = oracle_mod.random_mdp(oc.n_states, oc.n_actions, oc.state_dim,
                                    oc.gamma, oc.seed + i)
        exact_q = oracle_mod.solve_exact_q(mdp, tol=oc.vi_tol)
        dataset = oracle_mod.dataset_from_mdp(mdp, oc.seed + i)

        exact_reports = oracle_mod.sweep_delta(mdp, exact_q, dataset, oc.deltas, tol=oc.tol)
        (run_dir / f"mdp{i:02d}_exact.csv").write_text(oracle_mod.sweep_csv(exact_reports))
        all_exact = all(r.fraction_non_degraded >= 1.0 for r in exact_reports)
        exact_ok = exact_ok and all_exact
        lines.append(f"{i},exact,{'pass' if all_exact else 'FAIL'}")

        q_range = float(exact_q.max() - exact_q.min())
        noisy = oracle_mod.perturb_q(exact_q, oc.noise * q_range, oc.seed + i)
        noisy_reports = oracle_mod.sweep_delta(mdp, exact_q, dataset, oc.deltas,
                                               selection_q=noisy, tol=oc.tol)
        (run_dir / f"mdp{i:02d}_noisy.csv").write_text(oracle_mod.sweep_csv(noisy_reports))
        star = oracle_mod.threshold_delta(noisy_reports)
        thresholds.append(star)
        lines.append(f"{i},noisy,{'delta*=' + str(star) if star is not None else 'NO-THRESHOLD'}")

    (run_dir / "verify_summary.csv").write_text("\n".join(lines) + "\n")
    ok = exact_ok and all(star is not None for star in thresholds)
    print("\n".join(lines))
    print(f"run directory: {run_dir}")
    if not ok:
        print("theorem verification FAILED", file=sys.stderr)
        return EXIT_THEOREM
    return EXIT_OK


def cmd_sweep_delta(config: cfg.RunConfig, args) -> int:
    oc = config.oracle
    if not oc.deltas:
        raise cfg.ConfigError("oracle.deltas must be non-empty")
    run_dir = make_run_dir(config, "sweep-delta")
    echo_config(config, run_dir)

    if oc.mode == "oracle":
        mdp = oracle_mod.random_mdp(oc.n_states, oc.n_actions, oc.state_dim,
                                    oc.gamma, oc.seed)
        exact_q = oracle_mod.solve_exact_q(mdp, tol=oc.vi_tol)
        dataset = oracle_mod.dataset_from_mdp(mdp, oc.seed)
        selection = None
        if oc.noise > 0.0:
            q_range = float(exact_q.max() - exact_q.min())
            selection = oracle_mod.perturb_q(exact_q, oc.noise * q_range, oc.seed)
        reports = _parallel_sweep(mdp, exact_q, dataset, oc, selection, args.jobs)
        (run_dir / "sweep.csv").write_text(oracle_mod.sweep_csv(reports))
    elif oc.mode == "empirical":
        dataset_path = Path(config.train.dataset)
        if not dataset_path.exists():
            raise DataError(f"dataset {dataset_path} not found")
        dataset = load_dataset(dataset_path)
        env = cfg.build_env(config.env)
        refs = _load_refs(config, env)
        rows = []
        for delta in oc.deltas:
            section = cfg.TrainSection(**{f.name: getattr(config.train, f.name)
                                          for f in fields(config.train)})
            section.delta = int(delta)
            tc = cfg.build_train_config(section)
            _, _, report = train(tc, dataset, env, refs)
            last = report.records[-1]
            rows.append((int(delta), last.eval_return_mean, last.eval_return_std))
        (run_dir / "sweep.csv").write_text(oracle_mod.empirical_sweep_csv(rows))
    else:
        raise cfg.ConfigError(f"oracle.mode {oc.mode!r} unknown")
    print((run_dir / "sweep.csv").read_text(), end="")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _parallel_sweep(mdp, exact_q, dataset, oc, selection, jobs):
    deltas = list(oc.deltas)
    if jobs <= 1 or len(deltas) == 1:
        return oracle_mod.sweep_delta(mdp, exact_q, dataset, deltas,
                                      selection_q=selection, tol=oc.tol)
    from concurrent.futures import ThreadPoolExecutor
    bounds = (dataset.state_min, dataset.state_max)

    def one(delta):
        spec = GridSpec(delta=delta, mins=bounds[0], maxs=bounds[1])
        return oracle_mod.verify_improvement(mdp, exact_q, spec, dataset,
                                             selection_q=selection, tol=oc.tol)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, deltas))


def cmd_plot_data(config: cfg.RunConfig, args) -> int:
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        metrics = run_dir / "metrics.csv"
        if not metrics.exists():
            print(f"warning: {metrics} missing, skipping", file=sys.stderr)
            continue
        try:
            with open(metrics, newline="") as f:
                reader = csv.reader(f)
                header = next(reader)
                epoch_col = header.index("epoch")
                for record in reader:
                    for col, value in zip(header, record):
                        if col == "epoch":
                            continue
                        rows.append((run_dir.name, record[epoch_col], col, value))
        except (OSError, ValueError, StopIteration) as exc:
            print(f"warning: cannot read {metrics}: {exc}", file=sys.stderr)
            continue
    out_lines = ["run_id,epoch,metric,value"]
    out_lines += [",".join(r) for r in rows]
    text = "\n".join(out_lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument plumbing

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (TOML subset)")
    parser.add_argument("--force", action="store_true",
                        help="allow overwriting existing outputs")
    parser.add_argument("--out", help="explicit output directory/file")
    parser.add_argument("--jobs", type=int, default=1, help="worker cap for parallel parts")
    # One flag per config field, e.g. --train.seed 3 or --oracle.deltas [1,2,4]
    for dotted in cfg.dotted_keys(cfg.RunConfig()):
        parser.add_argument(f"--{dotted}", dest=f"set::{dotted}", metavar="V")


def _collect_overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith("set::") and value is not None:
            out[key[len("set::"):]] = value
    return out


def _normalize_override(config: cfg.RunConfig, dotted: str, raw: str) -> str:
    section, key = dotted.split(".", 1)
    default = getattr(getattr(config, section), key)
    if isinstance(default, tuple) and not raw.strip().startswith("["):
        return "[" + raw + "]"
    if isinstance(default, str) and not raw.strip().startswith('"'):
        return '"' + raw + '"'
    return raw


def build_config(args) -> cfg.RunConfig:
    config = cfg.load_config(args.config) if args.config else cfg.RunConfig()
    overrides = _collect_overrides(args)
    overrides = {k: _normalize_override(config, k, v) for k, v in overrides.items()}
    cfg.apply_overrides(config, overrides)
    if args.force:
        config.output.force = True
    if args.out:
        config.output.dir = args.out
    return config


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cuberl",
        description="Offline RL with hypercube policy regularization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a tiered dataset (ORLD + sidecar)")
    _add_common(p)

    p = sub.add_parser("train", help="train TD3-BC / TD3-BC-C on a dataset")
    _add_common(p)
    p.add_argument("--dump-cells", action="store_true",
                   help="write the hypercube diagnostic CSV")

    p = sub.add_parser("eval", help="evaluate an actor checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("verify-theorem", help="run the non-degradation oracle suite")
    _add_common(p)

    p = sub.add_parser("sweep-delta", help="grid-precision ablation sweep")
    _add_common(p)

    p = sub.add_parser("plot-data", help="consolidate metrics CSVs into long format")
    _add_common(p)
    p.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-theorem": cmd_verify_theorem,
    "sweep-delta": cmd_sweep_delta,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "plot-data":
            config = cfg.RunConfig()  # plot-data has no config surface beyond --out
        else:
            config = build_config(args)
        return COMMANDS[args.command](config, args)
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OrldError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbortError, NonFiniteGradientError, ValueIterationError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
