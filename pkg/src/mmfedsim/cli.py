"""``sim`` command line: run, sweep, diagnose and ablate subcommands."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, default_config, load_config, make_manifest, thread_cap
from .cost import FusionCostSpec, SweepSettings, scalability_sweep, write_cost_table
from .data import default_modalities, generate_population, pooled_test_set
from .diagnostics import (
    ablation_suite,
    embedding_distance_curve,
    entropy_vs_missing,
    mean_curve,
    mirl_pair,
    write_curve_csv,
)
from .engine import run_federation
from .errors import ConfigError

log = logging.getLogger("mmfedsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _g(x: float) -> str:
    return format(float(x), ".17g")


def _map(fn: Callable, jobs: Sequence, workers: int) -> list:
    """Order-preserving map; threads only when more than one worker is allowed."""
    workers = min(workers, len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _seeded(cfg: ExperimentConfig, seed: int, **population_changes):
    pop_cfg = replace(cfg.population, seed=seed, **population_changes)
    return pop_cfg, replace(cfg.fl, seed=seed)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------- run


def _train(cfg: ExperimentConfig, seed: int, strategies: Sequence[str], **population_changes):
    """One population per seed, shared by every strategy so comparisons are paired."""
    pop_cfg, fl = _seeded(cfg, seed, **population_changes)
    population = generate_population(pop_cfg)
    arch = replace(cfg, population=pop_cfg).build_arch()
    test_set = pooled_test_set(population)
    out = {}
    for name in strategies:
        out[name] = run_federation(population, replace(fl, strategy=name), arch, test_set=test_set)
    return population, out


def write_rounds_csv(path, runs: dict, num_clients: int) -> None:
    cols = ["t", "strategy", "macro_f1", "comm_seconds", "params_trained"]
    cols += [f"w_{k}" for k in range(num_clients)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for name, reports in runs.items():
            for r in reports:
                weights = [_g(r.weights[k]) if k in r.weights else "" for k in range(num_clients)]
                f1 = "" if r.eval is None else _g(r.macro_f1)
                w.writerow([r.round, name, f1, _g(r.comm_seconds), r.params_trained] + weights)


def _final_f1(reports) -> float:
    for r in reversed(reports):
        if r.eval is not None:
            return r.macro_f1
    return float("nan")


def _deltas(finals: dict) -> dict:
    if "flism" not in finals:
        return {}
    return {k: finals["flism"] - v for k, v in finals.items() if k != "flism"}


def _display(d: dict) -> dict:
    return {k: round(v, 3) for k, v in d.items()}


def cmd_run(cfg: ExperimentConfig, out_dir: str, workers: int) -> int:
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()

    def job(seed):
        start = time.perf_counter()
        _, runs = _train(cfg, seed, cfg.strategies)
        return seed, runs, time.perf_counter() - start

    files, finals_by_seed = {}, {}
    for seed, runs, seconds in _map(job, list(cfg.seeds), workers):
        sub = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(sub, exist_ok=True)
        write_rounds_csv(os.path.join(sub, "rounds.csv"), runs, cfg.population.num_clients)
        finals = {name: _final_f1(r) for name, r in runs.items()}
        finals_by_seed[seed] = finals
        deltas = _deltas(finals)
        _write_json(
            os.path.join(sub, "summary.json"),
            {
                "seed": seed,
                "p_inc": cfg.population.incomplete_ratio,
                "final_macro_f1": finals,
                "final_macro_f1_display": _display(finals),
                "delta_f1": deltas,
                "delta_f1_display": _display(deltas),
            },
        )
        names = [f"seed_{seed}/{n}" for n in ("rounds.csv", "summary.json", "manifest.json")]
        make_manifest(cfg, "run", {str(seed): names}, seconds).write(os.path.join(sub, "manifest.json"))
        files[str(seed)] = names
        log.info("seed %d: %s", seed, _display(finals))

    averaged = {
        name: float(np.mean([finals_by_seed[s][name] for s in cfg.seeds])) for name in cfg.strategies
    }
    spread = {
        name: float(np.std([finals_by_seed[s][name] for s in cfg.seeds])) for name in cfg.strategies
    }
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {
            "seeds": list(cfg.seeds),
            "averaged_macro_f1": averaged,
            "averaged_macro_f1_display": _display(averaged),
            "std_macro_f1": spread,
            "delta_f1": _deltas(averaged),
            "delta_f1_display": _display(_deltas(averaged)),
        },
    )
    files["all"] = ["summary.json", "manifest.json"]
    make_manifest(cfg, "run", files, time.perf_counter() - t0).write(os.path.join(out_dir, "manifest.json"))
    return EXIT_OK


# ------------------------------------------------------------------- sweep


def cmd_sweep(cfg: ExperimentConfig, out_dir: str, axis: str, workers: int) -> int:
    values = list(getattr(cfg.sweep, axis))
    if not values:
        raise ConfigError(f"sweep.{axis}", "axis list is empty")
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    path = os.path.join(out_dir, "sweep.csv")
    files = ["sweep.csv", "manifest.json"]
    if axis == "M" and cfg.sweep.cost_only:
        c = cfg.cost
        template = FusionCostSpec(
            per_modality_channels=c.per_modality_channels,
            window_len=c.window_len,
            num_classes=c.num_classes,
            fusion_shared_dim=c.fusion_shared_dim,
            bytes_per_param=c.bytes_per_param,
        )
        settings = SweepSettings(
            num_clients=c.num_clients,
            selection_fraction=c.selection_fraction,
            rounds=c.rounds,
            seed=cfg.seeds[0],
            harmony_unimodal_fraction=c.harmony_unimodal_fraction,
        )
        table = scalability_sweep(values, template, rounds=c.rounds, settings=settings)
        write_cost_table(table, path, os.path.join(out_dir, "sweep.json"))
        files.append("sweep.json")
    else:
        def changes(v):
            if axis == "p_inc":
                return {"incomplete_ratio": float(v)}
            return {"modalities": default_modalities(int(v))}

        jobs = [(v, s) for v in values for s in cfg.seeds]

        def job(vs):
            v, s = vs
            _, runs = _train(cfg, s, cfg.strategies, **changes(v))
            return {name: _final_f1(r) for name, r in runs.items()}

        results = dict(zip(jobs, _map(job, jobs, workers)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "seed", "strategy", "final_macro_f1"])
            for (v, s), finals in results.items():
                for name in cfg.strategies:
                    w.writerow([axis, v, s, name, _g(finals[name])])
            per_value = {}
            for v in values:
                for name in cfg.strategies:
                    m = float(np.mean([results[(v, s)][name] for s in cfg.seeds]))
                    per_value[(v, name)] = m
                    w.writerow([axis, v, "mean", name, _g(m)])
            for name in cfg.strategies:
                m = float(np.mean([per_value[(v, name)] for v in values]))
                w.writerow([axis, "averaged", "mean", name, _g(m)])
    make_manifest(cfg, f"sweep:{axis}", {"all": files}, time.perf_counter() - t0).write(
        os.path.join(out_dir, "manifest.json")
    )
    return EXIT_OK


# ------------------------------------------------------------------- diagnose

def diagnose_seed(cfg: ExperimentConfig, seed: int, with_pair: bool = True):
    """Entropy curve of the MIRL-trained model, plus both distance curves when paired."""
    pop_cfg, fl = _seeded(cfg, seed)
    population = generate_population(pop_cfg)
    arch = replace(cfg, population=pop_cfg).build_arch()
    x_test, y_test = pooled_test_set(population)
    with_cfg, without_cfg = mirl_pair(fl)
    model_with = run_federation(population, with_cfg, arch, test_set=(x_test, y_test))[-1].global_state
    entropy = entropy_vs_missing(model_with, x_test, y_test, pop_cfg.modalities)
    if not with_pair:
        return entropy, None
    model_without = run_federation(population, without_cfg, arch, test_set=(x_test, y_test))[-1].global_state
    pair = embedding_distance_curve(model_with, model_without, x_test, pop_cfg.modalities, cfg.embed_metric)
    return entropy, pair


def cmd_diagnose(cfg: ExperimentConfig, out_dir: str, workers: int, skip_pair: bool = False) -> int:
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    results = _map(lambda s: diagnose_seed(cfg, s, not skip_pair), list(cfg.seeds), workers)
    ent_rows = [(str(s), "mirl", e) for s, (e, _) in zip(cfg.seeds, results)]
    if len(cfg.seeds) > 1:
        ent_rows.append(("mean", "mirl", mean_curve([e for e, _ in results])))
    write_curve_csv(os.path.join(out_dir, "entropy_vs_missing.csv"), ent_rows)
    files = ["entropy_vs_missing.csv", "manifest.json"]
    if not skip_pair:
        rows = []
        for s, (_, (a, b)) in zip(cfg.seeds, results):
            rows += [(str(s), "mirl", a), (str(s), "no_mirl", b)]
        if len(cfg.seeds) > 1:
            rows.append(("mean", "mirl", mean_curve([p[0] for _, p in results])))
            rows.append(("mean", "no_mirl", mean_curve([p[1] for _, p in results])))
        write_curve_csv(os.path.join(out_dir, "embed_dist.csv"), rows)
        files.insert(1, "embed_dist.csv")
    make_manifest(cfg, "diagnose", {"all": files}, time.perf_counter() - t0).write(
        os.path.join(out_dir, "manifest.json")
    )
    return EXIT_OK


# ------------------------------------------------------------------- ablate

ABLATION_COLUMNS = ["seed", "config", "use_mirl", "use_mqaa", "use_gakd", "macro_f1"]


def cmd_ablate(cfg: ExperimentConfig, out_dir: str, workers: int) -> int:
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()

    def job(seed):
        pop_cfg, fl = _seeded(cfg, seed)
        population = generate_population(pop_cfg)
        return ablation_suite(population, fl, replace(cfg, population=pop_cfg).build_arch())

    tables = _map(job, list(cfg.seeds), workers)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for seed, rows in zip(cfg.seeds, tables):
            for r in rows:
                w.writerow([seed, r.name, int(r.use_mirl), int(r.use_mqaa), int(r.use_gakd), _g(r.macro_f1)])
        if len(cfg.seeds) > 1:
            for i, r in enumerate(tables[0]):
                m = float(np.mean([t[i].macro_f1 for t in tables]))
                w.writerow(["mean", r.name, int(r.use_mirl), int(r.use_mqaa), int(r.use_gakd), _g(m)])
    make_manifest(cfg, "ablate", {"all": ["ablation.csv", "manifest.json"]}, time.perf_counter() - t0).write(
        os.path.join(out_dir, "manifest.json")
    )
    return EXIT_OK


# ------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description="Multimodal federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "diagnose", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (default: shipped defaults)")
        p.add_argument("--strategy", action="append", help="override strategies (repeatable)")
        p.add_argument("--seed", action="append", type=int, help="override seeds (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--axis", choices=("p_inc", "M"), default="p_inc")
        if name == "diagnose":
            p.add_argument("--skip-mirl-pair", action="store_true", help="entropy curve only")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    changes = {}
    if args.strategy:
        changes["strategies"] = tuple(s.lower() for s in args.strategy)
    if args.seed:
        changes["seeds"] = tuple(args.seed)
    return replace(cfg, **changes) if changes else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        workers = thread_cap()
        out = args.out or cfg.output_dir
        if args.command == "run":
            return cmd_run(cfg, out, workers)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.axis, workers)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, out, workers, args.skip_mirl_pair)
        return cmd_ablate(cfg, out, workers)
    except ConfigError as exc:
        print(f"sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sim: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - surface any failure as a runtime exit code
        print(f"sim: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
