"""Command-line entry point: ``adaptfed {run, partition, gradcheck, bound, adapt}``.

Experiments are described by a JSON file (see :mod:`adaptfed.config`);
flags only cover paths, the seed, the worker count and verbosity.  The
output directory comes from ``--output-dir``, else ``$ADAPTFED_OUTPUT_DIR``,
else the config file.  Every output file is written atomically.

Exit codes: 0 success, 1 runtime failure (including a failed gradient
check), 2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import analysis, config as config_mod, gradcheck, sfda
from .checkpoint import atomic_write
from .datagen import (SyntheticTaskSpec, clients_from_plan, dirichlet_partition, make_client, make_pool,
                      make_synthetic, pachinko_partition, pathological_partition)
from .federation import (METRICS_SCHEMA_VERSION, adapt_new_client, deserialize_state, init_server,
                         run_experiment, serialize_state)
from .numcore import ConfigurationError, make_rng

log = logging.getLogger("adaptfed")
OUTPUT_ENV = "ADAPTFED_OUTPUT_DIR"
SUMMARY_SCHEMA_VERSION = 1


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _output_dir(args, cfg_dir: str) -> Path:
    return Path(args.output_dir or os.environ.get(OUTPUT_ENV) or cfg_dir)


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "seed", None) is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = config_mod.from_dict(raw)
    if getattr(args, "workers", None) is not None:
        cfg.rounds = replace(cfg.rounds, workers=args.workers)
    return cfg


def _partition_plan(cfg: config_mod.ExperimentConfig):
    p = cfg.partition
    pool = make_pool(replace(cfg.task, shift="none"), p.pool_size,
                     p.coarse_classes if p.scheme == "pachinko" else None)
    rng = make_rng(cfg.seed, "partition")
    n = cfg.task.num_clients
    if p.scheme == "pathological":
        plan = pathological_partition(pool, n, rng, p.low, p.high, p.min_samples)
    elif p.scheme == "dirichlet":
        plan = dirichlet_partition(pool, n, p.alpha, rng, p.min_samples)
    else:
        plan = pachinko_partition(pool, n, rng, p.alpha, p.beta, p.min_samples)
    return pool, plan


def build_clients(cfg: config_mod.ExperimentConfig):
    if cfg.partition.scheme == "synthetic":
        return make_synthetic(cfg.task)
    pool, plan = _partition_plan(cfg)
    return clients_from_plan(pool, plan, cfg.seed, cfg.task.train_frac)


def _run_federated(cfg, out: Path) -> None:
    clients = build_clients(cfg)
    h = cfg.hypernet
    server = init_server(cfg.strategy, cfg.arch, len(clients), cfg.seed, h.embed_dim, h.hidden, h.layers, h.rank)
    start = time.perf_counter()

    def progress(rec):
        if rec["client"] == 0:
            log.info("round %d evaluated (%.1fs)", rec["round"], time.perf_counter() - start)

    server, records, summary = run_experiment(server, clients, cfg.rounds, progress)
    atomic_write(out / "metrics.jsonl", _jsonl(records))
    atomic_write(out / "summary.csv", _csv([{"schema_version": SUMMARY_SCHEMA_VERSION, **r} for r in summary]))
    atomic_write(out / "checkpoint.bin", serialize_state(server))
    atomic_write(out / "cost.csv", analysis.cost_csv([analysis.report_for_state(server, len(clients))]))
    if server.embeddings is not None:
        atomic_write(out / "embeddings.csv", analysis.export_embeddings(server, [c.group for c in clients]))
    final = summary[-1]
    print(f"{cfg.strategy}: round {final['round']} mean test accuracy {final['mean_acc']:.4f}")


def _run_sfda(cfg, out: Path) -> None:
    s = cfg.sfda
    shift = sfda.make_domain_shift(cfg.task.input_dim, cfg.seed, s.angle, s.scale_spread, s.shift_std)
    pool, clients, styles = sfda.make_sfda_task(cfg.task, s.source_size, shift)
    pretrained = sfda.pretrain_source(pool, styles, cfg.arch, s.params, cfg.seed)
    del pool
    phase = sfda.start_adaptation(pretrained, cfg.arch, clients, s.params)
    before = sfda.adaptation_accuracy(phase, "pretrained")
    records = []

    def sink(rec):
        records.append({"schema_version": METRICS_SCHEMA_VERSION, "split": "train", **rec})

    phase = sfda.run_adaptation(phase, s.params, cfg.seed, sink)
    rows = [{"schema_version": SUMMARY_SCHEMA_VERSION, "model": m, "mean_acc": sfda.adaptation_accuracy(phase, m)}
            for m in ("pretrained", "students", "teachers")]
    atomic_write(out / "metrics.jsonl", _jsonl(records))
    atomic_write(out / "summary.csv", _csv(rows))
    print(f"sfda: frozen {before:.4f} -> students {rows[1]['mean_acc']:.4f}, teachers {rows[2]['mean_acc']:.4f}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _output_dir(args, cfg.output_dir)
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.experiment == "sfda":
        _run_sfda(cfg, out)
    else:
        _run_federated(cfg, out)
    return 0


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    if cfg.partition.scheme == "synthetic":
        raise ConfigurationError("partition.scheme: choose pathological, dirichlet or pachinko")
    pool, plan = _partition_plan(cfg)
    out = _output_dir(args, cfg.output_dir)
    atomic_write(out / "partition.json", plan.to_json())
    hist = plan.class_histogram(pool.labels)
    rows = [{"client": i, **{f"class_{k}": int(v) for k, v in enumerate(row)}} for i, row in enumerate(hist)]
    atomic_write(out / "class_histogram.csv", _csv(rows))
    print(f"{cfg.partition.scheme}: {plan.num_clients} clients, sizes {plan.counts.min()}..{plan.counts.max()}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(range(args.seed, args.seed + args.seeds))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        status = "PASS" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{status} {name:28s} max rel error {err:.3e}")
    return 0 if all(r.passed for r in results) else 1


def cmd_bound(args) -> int:
    raw = json.loads(Path(args.inputs).read_text())
    try:
        b = analysis.BoundInputs(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"bound inputs: {exc}") from None
    terms = analysis.theorem1_rhs(b)
    for name in ("sampling", "complexity", "generator", "shared"):
        print(f"{name:10s} {getattr(terms, name):.12g}")
    print(f"{'total':10s} {terms.total:.12g}")
    return 0


ADAPT_KEYS = {"task", "seed", "client", "group", "epochs", "lr", "batch_size"}


def cmd_adapt(args) -> int:
    shard = json.loads(Path(args.shard).read_text())
    unknown = sorted(set(shard) - ADAPT_KEYS)
    if unknown:
        raise ConfigurationError(f"shard.{unknown[0]}: unknown key (allowed: {', '.join(sorted(ADAPT_KEYS))})")
    server = deserialize_state(Path(args.checkpoint).read_bytes())
    seed = shard.get("seed", 0)
    spec = SyntheticTaskSpec(**{**shard.get("task", {}), "seed": seed})
    client = make_client(spec, shard.get("client", spec.num_clients), shard.get("group"), stream="task-novel")
    _, traj = adapt_new_client(server, client, shard.get("epochs", 5), shard.get("lr", 1.0),
                               shard.get("batch_size", 32), seed)
    rows = [{"epoch": e, "acc": a} for e, a in enumerate(traj)]
    target = Path(args.output) if args.output else _output_dir(args, ".") / "adapt_trajectory.csv"
    atomic_write(target, _csv(rows))
    print(" ".join(f"{a:.3f}" for a in traj))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int, help="parallel local-training workers (results do not depend on it)")
    run.add_argument("--output-dir")
    run.set_defaults(func=cmd_run)

    part = sub.add_parser("partition", help="partition a synthetic pool and export the plan")
    part.add_argument("config")
    part.add_argument("--seed", type=int)
    part.add_argument("--output-dir")
    part.set_defaults(func=cmd_partition)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every gradient path")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    gc.set_defaults(func=cmd_gradcheck)

    bd = sub.add_parser("bound", help="evaluate the generalisation bound from a JSON file")
    bd.add_argument("inputs")
    bd.set_defaults(func=cmd_bound)

    ad = sub.add_parser("adapt", help="fit an embedding for a new client against a checkpoint")
    ad.add_argument("checkpoint")
    ad.add_argument("shard")
    ad.add_argument("--output")
    ad.add_argument("--output-dir")
    ad.set_defaults(func=cmd_adapt)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, json.JSONDecodeError) else 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with a nonzero code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
