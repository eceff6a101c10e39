"""Command-line entry point: prepare, route, run, gridsearch."""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import backtest as bt
from .config import MODELS, ROUTER_KINDS, ConfigError, RunConfig, load_config
from .features import build_window_samples, load_samples, sample_to_dict, save_samples, write_feature_dump
from .market_data import (
    LoadError, SplitSpec, generate_synthetic_series, load_series, split_sequence, write_series,
)
from .pipeline import (
    accuracy, decisions_digest, infer_llmoe, infer_single_mlp, infer_static_moe, save_policy,
    train_llmoe, train_single_mlp, train_static_moe,
)
from .router import (
    CachingRouter, DecisionCache, LlmRouter, ReplayRouter, RouterError, label_counts, route_all,
    route_oracle, route_rule,
)

log = logging.getLogger("llmoe")

MODEL_NAMES = {"llmoe": "LLMoE", "moe2": "MoE_2", "moe10": "MoE_10", "mlp": "MLP"}
# Row order of the results table.
ROW_ORDER = ("mlp", "moe10", "moe2", "llmoe")
METRIC_NAMES = {"tr": "TR", "sr": "SR", "cr": "CR", "sor": "SoR", "vol": "VOL", "dd": "DD", "mdd": "MDD"}


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _atomic_via(path: Path, writer, *args) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    writer(*args, tmp)
    os.replace(tmp, path)


def _paths(cfg: RunConfig) -> dict[str, Path]:
    out = cfg.output
    return {
        "train": out / "samples_train.jsonl",
        "test": out / "samples_test.jsonl",
        "features": out / "features.csv",
        "manifest": out / "dataset_manifest.json",
        "routing": out / "routing.json",
    }


# --------------------------------------------------------------------------- prepare

def _load_data(cfg: RunConfig):
    d = cfg.data
    if d.synthetic is not None:
        syn = d.synthetic
        return generate_synthetic_series(int(syn.get("seed", 0)), int(syn.get("days", 1000)), cfg.regime_spec())
    return load_series(d.prices, d.news, d.symbol)


def cmd_prepare(cfg: RunConfig) -> dict:
    series = _load_data(cfg)
    out = cfg.output
    if cfg.data.synthetic is not None:
        data_dir = out / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        tmp_prices, tmp_news = data_dir / ".prices.csv.tmp", data_dir / ".news.csv.tmp"
        write_series(series, tmp_prices, tmp_news)
        os.replace(tmp_prices, data_dir / "prices.csv")
        os.replace(tmp_news, data_dir / "news.csv")
    samples = build_window_samples(series)
    train, test = split_sequence(samples, cfg.data.split)
    paths = _paths(cfg)
    _atomic_via(paths["train"], save_samples, train)
    _atomic_via(paths["test"], save_samples, test)
    _atomic_via(paths["features"], write_feature_dump, samples)
    day_train = cfg.data.split.train_size(len(series))

    def span(items):
        return {"count": len(items),
                "first": items[0].anchor_date.isoformat() if items else None,
                "last": items[-1].anchor_date.isoformat() if items else None,
                "up_labels": sum(s.label for s in items)}

    manifest = {
        "symbol": series.symbol,
        "trading_days": len(series),
        "first_date": series.bars[0].date.isoformat(),
        "last_date": series.bars[-1].date.isoformat(),
        "news_days": sum(b.headline is not None for b in series.bars),
        "no_news_days": sum(b.headline is None for b in series.bars),
        "unmatched_news": series.unmatched_news,
        "train_fraction": cfg.data.train_fraction,
        "day_split": {"train": day_train, "test": len(series) - day_train},
        "samples": len(samples),
        "train": span(train),
        "test": span(test),
    }
    atomic_json(paths["manifest"], manifest)
    print(f"{series.symbol}: {len(series)} days ({manifest['no_news_days']} without news), "
          f"{len(samples)} samples -> {len(train)} train / {len(test)} test")
    return manifest


# --------------------------------------------------------------------------- route

def _load_prepared(cfg: RunConfig):
    paths = _paths(cfg)
    for key in ("train", "test"):
        if not paths[key].exists():
            raise ConfigError(f"{paths[key]} missing; run 'prepare' first")
    return load_samples(paths["train"]), load_samples(paths["test"])


def build_router(cfg: RunConfig, cache: Optional[DecisionCache] = None, persist: bool = True):
    kind = cfg.router.kind
    if kind in ("rule", "oracle"):
        base = route_rule if kind == "rule" else route_oracle
        return CachingRouter(base, cache) if (persist and cache is not None) else base
    if cache is None:
        cache = DecisionCache(cfg.cache_path)
    if kind == "llm":
        return LlmRouter(cfg.router.router_config(), cache)
    return ReplayRouter(cache, cfg.router.model)


def cmd_route(cfg: RunConfig) -> dict:
    train, test = _load_prepared(cfg)
    cache = DecisionCache(cfg.cache_path)
    before = len(cache)
    router = build_router(cfg, cache)
    decisions = route_all(train + test, router, cfg.router.concurrency)
    calls = getattr(router, "calls", 0)
    summary = {
        "router": cfg.router.kind,
        "samples": len(decisions),
        "train": label_counts(decisions[:len(train)]),
        "test": label_counts(decisions[len(train):]),
        "endpoint_calls": calls,
        "cache_entries_added": len(cache) - before,
        "cache": str(cfg.cache_path),
        "decision_digest": decisions_digest(decisions),
    }
    atomic_json(_paths(cfg)["routing"], summary)
    total = label_counts(decisions)
    print(f"routed {len(decisions)} samples with {cfg.router.kind}: "
          f"Optimistic={total['Optimistic']} Pessimistic={total['Pessimistic']}; endpoint calls: {calls}")
    return summary


# --------------------------------------------------------------------------- run

def _decisions(cfg: RunConfig, samples):
    # rule/oracle are recomputed; llm/cache go through the decision cache.
    return route_all(samples, build_router(cfg, persist=False), cfg.router.concurrency)


def _input_digest(train, test, decisions) -> str:
    h = hashlib.sha256()
    for s in list(train) + list(test):
        h.update(json.dumps(sample_to_dict(s), sort_keys=True).encode())
    h.update(decisions_digest(decisions).encode())
    return h.hexdigest()


def run_trial(model: str, seed: int, cfg: RunConfig, train, test, train_dec, test_dec):
    """Train one model with one seed and backtest it on the test samples."""
    tcfg = cfg.training.train_config(seed)
    policy = None
    if model == "llmoe":
        policy = train_llmoe(train, train_dec, tcfg, cfg.training.min_partition_size, cfg.router.kind)
        preds = infer_llmoe(policy, test, test_dec)
    elif model in ("moe2", "moe10"):
        moe = train_static_moe(train, 2 if model == "moe2" else 10, tcfg)
        preds = infer_static_moe(moe, test)
    elif model == "mlp":
        preds = infer_single_mlp(train_single_mlp(train, tcfg), test)
    else:
        raise ValueError(f"unknown model {model!r}")
    dates = [test[0].anchor_date] + [s.next_date for s in test] if test else []
    curve, daily = bt.simulate_all_in_all_out(preds, [s.next_return for s in test], 1.0, dates)
    metrics = bt.compute_metrics(curve, daily)
    return metrics, curve, accuracy(preds, test), policy, tcfg


def _seed_job(args):
    seed, cfg, models, train, test, train_dec, test_dec = args
    results = {}
    for model in models:
        try:
            results[model] = run_trial(model, seed, cfg, train, test, train_dec, test_dec)
        except Exception as exc:
            raise RuntimeError(f"trial failed (model={model}, seed={seed}): {exc}") from exc
    return seed, results


def format_summary(aggregates: dict) -> str:
    head = ["Model"] + [METRIC_NAMES[m] for m in bt.TABLE_ORDER]
    rows = [head]
    for model in ROW_ORDER:
        if model not in aggregates:
            continue
        agg = aggregates[model]
        cells = [MODEL_NAMES[model]]
        for m in bt.TABLE_ORDER:
            s = agg.metrics[m]
            cells.append("n/a" if s.mean is None else
                         f"{s.mean:.2f}±{s.std:.2f}" if s.std is not None else f"{s.mean:.2f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def cmd_run(cfg: RunConfig, jobs: int = 1) -> dict:
    train, test = _load_prepared(cfg)
    if not test:
        raise ConfigError("test partition is empty; nothing to backtest")
    decisions = _decisions(cfg, train + test)
    train_dec, test_dec = decisions[:len(train)], decisions[len(train):]
    models = [m for m in MODELS if m in cfg.experiment.models]
    seeds = list(cfg.training.seeds)
    digest = _input_digest(train, test, decisions)
    job_args = [(s, cfg, models, train, test, train_dec, test_dec) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_seed_job, job_args))
    else:
        results = dict(map(_seed_job, job_args))

    out = cfg.output
    aggregates = {}
    for model in models:
        reports = []
        for seed in seeds:
            metrics, curve, acc, policy, tcfg = results[seed][model]
            reports.append(metrics)
            rdir = out / "reports" / model
            atomic_json(rdir / f"seed_{seed}.json", {
                "model": MODEL_NAMES[model],
                "seed": seed,
                "metrics": metrics.as_dict(),
                "accuracy": acc,
                "router": cfg.router.kind if model == "llmoe" else None,
                "train_config": {k: getattr(tcfg, k) for k in ("learning_rate", "batch_size", "epochs", "optimizer", "seed")},
                "input_digest": digest,
            })
            _atomic_via(rdir / f"equity_seed_{seed}.csv", bt.write_equity_curve, curve)
            if policy is not None:
                save_policy(policy, rdir / f"policy_seed_{seed}", tcfg, train_dec)
        if len(reports) >= 2:
            aggregates[model] = bt.aggregate_trials(reports, seeds)
            atomic_json(out / "reports" / model / "aggregate.json", aggregates[model].as_dict())

    summary = {
        "columns": [METRIC_NAMES[m] for m in bt.TABLE_ORDER],
        "seeds": seeds,
        "router": cfg.router.kind,
        "input_digest": digest,
        # A list keeps the table's row order through sorted-key serialisation.
        "models": [{"model": MODEL_NAMES[m], "metrics": aggregates[m].as_dict()["metrics"]}
                   for m in ROW_ORDER if m in aggregates],
    }
    atomic_json(out / "summary.json", summary)
    if aggregates:
        table = format_summary(aggregates)
        atomic_write(out / "summary.txt", table)
        print(table, end="")
    return summary


# --------------------------------------------------------------------------- gridsearch

def cmd_gridsearch(cfg: RunConfig) -> dict:
    grid = cfg.experiment.grid
    lrs = list(grid.get("learning_rate", [cfg.training.learning_rate]))
    batches = list(grid.get("batch_size", [cfg.training.batch_size]))
    if not grid or not lrs or not batches:
        raise ConfigError("experiment.grid must define at least one non-empty axis")
    train, _ = _load_prepared(cfg)
    decisions = _decisions(cfg, train)
    # Validation = chronologically last 20% of the training samples.
    fit, val = split_sequence(train, SplitSpec(0.8))
    fit_dec, val_dec = decisions[:len(fit)], decisions[len(fit):]
    if not fit or not val:
        raise ConfigError("training set too small for a validation split")
    seed = cfg.training.seeds[0]
    rows = []
    for lr, batch in itertools.product(lrs, batches):
        tcfg = cfg.training.train_config(seed, learning_rate=float(lr), batch_size=int(batch))
        policy = train_llmoe(fit, fit_dec, tcfg, cfg.training.min_partition_size, cfg.router.kind)
        acc = accuracy(infer_llmoe(policy, val, val_dec), val)
        rows.append({"learning_rate": float(lr), "batch_size": int(batch), "val_accuracy": acc})
    best = min(rows, key=lambda r: (-r["val_accuracy"], r["learning_rate"], r["batch_size"]))
    report = {"seed": seed, "train": len(fit), "validation": len(val), "rows": rows, "best": best}
    atomic_json(cfg.output / "grid_report.json", report)
    for r in rows:
        print(f"lr={r['learning_rate']:<10g} batch={r['batch_size']:<5d} val_acc={r['val_accuracy']:.4f}")
    print(f"best: lr={best['learning_rate']:g} batch={best['batch_size']}")
    return report


# --------------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed trials")
    common.add_argument("--router", choices=ROUTER_KINDS, help="override router.kind")
    common.add_argument("--seeds", help="comma-separated seed list, overrides training.seeds")
    common.add_argument("--out", type=Path, help="override output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="llmoe", description="LLM-routed mixture-of-experts trading pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build window samples and the dataset manifest")
    sub.add_parser("route", parents=[common], help="route every sample and fill the decision cache")
    sub.add_parser("run", parents=[common], help="train/backtest all models over all seeds")
    sub.add_parser("gridsearch", parents=[common], help="lr x batch grid on a chronological validation split")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.router:
        cfg.router.kind = args.router
    if args.seeds:
        try:
            cfg.training.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.out:
        cfg.output = args.out
    return cfg.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        cfg.output.mkdir(parents=True, exist_ok=True)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "route":
            cmd_route(cfg)
        elif args.command == "run":
            cmd_run(cfg, jobs=max(1, args.jobs))
        else:
            cmd_gridsearch(cfg)
    except (ConfigError, LoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RouterError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
