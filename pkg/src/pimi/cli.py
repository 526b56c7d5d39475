"""Command line entry point: ``pimi train|eval|synth|ablate``.

Results go to stdout; progress and errors go to stderr. Exit codes: 0 ok,
2 configuration or input problem, 3 divergence, 4 checkpoint problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from pimi import data as D
from pimi.config import ConfigError, RunConfig
from pimi.kernels import BACKEND
from pimi.model import CheckpointError, InputError, ModelConfig, load_checkpoint, save_checkpoint
from pimi.retrieval import MetricsReport, UserResult, evaluate, write_dump
from pimi.training import DivergenceError, TrainConfig, TrainReport, train

log = logging.getLogger("pimi")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

VARIANTS = {
    "PIMI": {},
    "PIMI-P": {"disable_periodicity": True},
    "PIMI-I": {"disable_interactivity": True},
    "PIMI-central_node": {"disable_central_node": True},
}


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        d=cfg.d, n=cfg.n, K=cfg.K, L=cfg.L, p=cfg.p, heads=cfg.heads, dropout_rate=cfg.dropout,
        disable_periodicity=cfg.disable_periodicity, disable_interactivity=cfg.disable_interactivity,
        disable_central_node=cfg.disable_central_node,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, negatives=cfg.negatives, max_iterations=cfg.max_iterations,
        eval_every=cfg.eval_every, patience=cfg.patience, lr=cfg.lr, seed=cfg.seed,
        negative_sampling=cfg.negative_sampling, early_stop_metric=cfg.early_stop_metric,
        topn=tuple(cfg.topn), eval_ratio=cfg.eval_ratio,
    )


@dataclass
class PreparedData:
    train: D.InteractionLog
    valid: D.InteractionLog
    test: D.InteractionLog
    dropped_rows: int


def prepare_data(cfg: RunConfig) -> PreparedData:
    raw = D.ingest(cfg.data)
    if raw.dropped:
        log.warning("dropped %d rows with unusable timestamps", raw.dropped)
    filtered = D.filter_min_count(raw, cfg.min_count)
    if filtered.num_users == 0:
        raise D.InputError(f"no users left after min_count={cfg.min_count} filtering")
    train_log, valid_log, test_log = D.split_users(filtered, seed=cfg.split_seed)
    return PreparedData(train_log, valid_log, test_log, raw.dropped)


@dataclass
class RunResult:
    metrics: MetricsReport
    report: TrainReport
    out: Path


def run_training(cfg: RunConfig, out: str | Path, dump_users: str | None = None) -> RunResult:
    """Train one configuration into ``out`` and evaluate it on the held-out test users."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.to_text())
    prepared = prepare_data(cfg)
    D.write_vocab(prepared.train.item_ids, out / "vocab.tsv")
    D.write_csv(prepared.test, out / "test.csv")
    log.info("%d train / %d valid / %d test users, %d items, kernels=%s", prepared.train.num_users,
             prepared.valid.num_users, prepared.test.num_users, prepared.train.num_items, BACKEND)

    started = time.perf_counter()
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        def on_record(record):
            fh.write(json.dumps({"iteration": record.iteration, "train_loss": record.train_loss,
                                 "metrics": record.metrics}, sort_keys=True) + "\n")
            fh.flush()

        params, report = train(prepared.train, prepared.valid, model_config(cfg), train_config(cfg),
                               on_record=on_record)
    log.info("training took %.1fs", time.perf_counter() - started)
    save_checkpoint(out / "checkpoint.pimi", params, prepared.train.item_ids)

    dump: list[UserResult] | None = [] if dump_users else None
    metrics = evaluate(params, prepared.test, cfg.topn, ratio=cfg.eval_ratio, dump=dump)
    if dump is not None:
        write_dump(dump, dump_users)
    (out / "metrics.txt").write_text(metrics.to_kv())
    summary = {
        "config": json.loads(json.dumps(cfg.__dict__)),
        "best_iteration": report.best_iteration,
        "iterations_run": report.iterations_run,
        "stopped_early": report.stopped_early,
        "best_validation": report.best_score if report.best_params is not None else None,
        "test": metrics.flat(),
        "test_users": metrics.users,
        "skipped_users": metrics.skipped,
        "num_items": prepared.train.num_items,
        "dropped_rows": prepared.dropped_rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(metrics, report, out)


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "data", None):
        changes["data"] = args.data
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "topn", None):
        changes["topn"] = args.topn
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    result = run_training(cfg, args.out, args.dump_users)
    sys.stdout.write(result.metrics.to_kv())
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval: --checkpoint is required")
    if not args.data:
        raise ConfigError("eval: --data is required")
    params, item_ids = load_checkpoint(args.checkpoint)
    if item_ids is None:
        raise CheckpointError(f"{args.checkpoint}: no item vocabulary stored")
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    topn = args.topn or cfg.topn
    raw = D.ingest(args.data)
    eval_log = D.remap(raw, item_ids)
    dump: list[UserResult] | None = [] if args.dump_users else None
    metrics = evaluate(params, eval_log, topn, ratio=cfg.eval_ratio, dump=dump)
    if dump is not None:
        write_dump(dump, args.dump_users)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.txt").write_text(metrics.to_kv())
    sys.stdout.write(metrics.to_kv())
    return EXIT_OK


def cmd_synth(args) -> int:
    if not args.out:
        raise ConfigError("synth: --out is required")
    cfg = D.SynthConfig.from_file(args.config) if args.config else D.SynthConfig()
    data = D.generate_synthetic(cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_csv(data.log, out)
    labels = out.with_suffix(".labels.tsv")
    D.write_labels(data, labels)
    sys.stdout.write(f"users={data.log.num_users}\nitems={data.log.num_items}\n"
                     f"interactions={data.log.num_interactions}\ndata={out}\nlabels={labels}\n")
    return EXIT_OK


def ablation_table(results: dict[str, MetricsReport], topn: list[int]) -> str:
    cols = [f"{m}@{n}" for n in sorted(topn) for m in ("recall", "ndcg", "hit_rate")]
    lines = ["variant\t" + "\t".join(cols)]
    for name, report in results.items():
        flat = report.flat()
        lines.append(name + "\t" + "\t".join(f"{flat[c]:.6f}" for c in cols))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = load_run_config(args)
    base.validate()
    out = Path(args.out)
    results = {}
    for name, flags in VARIANTS.items():
        log.info("variant %s", name)
        cleared = {"disable_periodicity": False, "disable_interactivity": False, "disable_central_node": False}
        cfg = base.replace(**{**cleared, **flags})
        results[name] = run_training(cfg, out / name).metrics
    table = ablation_table(results, base.topn)
    (out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def _topn(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {value!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("topn values must be positive")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimi", description="Multi-interest sequential recommender.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a CSV log and evaluate on held-out users")
    p.add_argument("--config", help="key=value run config")
    p.add_argument("--data", help="interaction CSV (overrides the config)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--topn", type=_topn, help="cutoffs, e.g. 20,50")
    p.add_argument("--dump-users", help="write per-user rankings (JSON lines) here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV log")
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--data", help="interaction CSV, e.g. test.csv from a run directory")
    p.add_argument("--config", help="run config (eval_ratio, topn)")
    p.add_argument("--topn", type=_topn)
    p.add_argument("--out", help="also write metrics.txt into this directory")
    p.add_argument("--dump-users", help="write per-user rankings (JSON lines) here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a planted-interest dataset")
    p.add_argument("--config", help="key=value generator config")
    p.add_argument("--out", help="CSV path; labels go next to it")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train the full model and its three ablations")
    p.add_argument("--config", help="key=value run config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--topn", type=_topn)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, D.InputError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
