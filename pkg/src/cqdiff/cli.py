"""Command-line entry point: ``cqdiff {gen-data,train,sample,eval,fewshot}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 I/O or file
format failure, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import logging
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import metric_report
from .persistence import (
    CheckpointError,
    SchemaError,
    _atomic_write,
    read_checkpoint,
    read_curves,
    read_dataset,
    save_checkpoint,
    write_curves,
    write_dataset,
)
from .scenario import generate_dataset
from .training import (
    NumericalError,
    evaluate,
    few_shot_protocol,
    generate,
    mean_predictor_nrmse,
    real_matrix,
    run_plan,
    split_by_user,
)

log = logging.getLogger("cqdiff")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_DRIFT_TOL = 1e-6


def _resolve(args) -> tuple[ExperimentConfig, int]:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    return cfg, seed


def _write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _metrics_table(rows: list[dict]) -> str:
    lines = [f"{'attribute':<10}{'JSD':>10}{'TV':>10}{'NRMSE':>10}"]
    for r in rows:
        lines.append(f"{r['attribute'].upper():<10}{r['jsd']:>10.4f}{r['tv']:>10.4f}{r['nrmse']:>10.4f}")
    return "\n".join(lines)


def _echo(cfg: ExperimentConfig, seed: int, command: str) -> dict:
    return {"command": command, "seed": seed, "config": cfg.flat(), "version": __version__}


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg, seed = _resolve(args)
    records = generate_dataset(cfg.scenario, seed, cfg.aois)
    write_dataset(records, args.out, _echo(cfg, seed, "gen-data"))
    counts = collections.Counter(r.aoi.value for r in records)
    print(f"wrote {len(records)} records to {args.out}")
    for aoi in cfg.aois:
        print(f"  {aoi}: {counts[aoi]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, seed = _resolve(args)
    records, _ = read_dataset(args.data)
    if not records:
        raise ValueError(f"{args.data} contains no records")
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    plan = cfg.plan.build()
    fit, test = split_by_user(records, cfg.metrics.test_fraction, [seed, 0x7E57])
    if not test:
        raise ValueError("dataset too small for a held-out test split")
    result = run_plan(fit, plan, train_cfg, cfg.schedule.build(), cfg.denoiser)
    rows = evaluate(result.model, result.schedule, test, cfg.metrics.n_samples, seed, cfg.metrics.bins)

    echo = _echo(cfg, seed, "train")
    save_checkpoint(result.model, result.schedule, args.out, train={"config": echo["config"], "plan": plan.to_dict()}, seed=seed)
    # metrics are recomputed from the stored float32 checkpoint to bound storage drift
    ck = read_checkpoint(args.out)
    reloaded = evaluate(ck.model, ck.schedule, test, cfg.metrics.n_samples, seed, cfg.metrics.bins)
    drift = max(abs(a[k] - b[k]) for a, b in zip(rows, reloaded) for k in ("jsd", "tv", "nrmse"))
    if drift > METRIC_DRIFT_TOL:
        raise NumericalError(f"metrics moved by {drift:.3g} after checkpoint round trip")

    report = {
        **echo,
        "plan": plan.to_dict(),
        "stages": result.histories,
        "n_train": len(result.train_records),
        "n_validation": len(result.val_records),
        "n_test": len(test),
        "metrics": reloaded,
        "checkpoint_metric_drift": drift,
        "mean_predictor_rsrp_nrmse": mean_predictor_nrmse(result.train_records, test),
    }
    report_path = args.report or f"{args.out}.report.json"
    _write_json(report_path, report)
    print(f"plan {plan.label}: stage epochs {[h['epochs'] for h in result.histories]}")
    print(_metrics_table(reloaded))
    print(f"checkpoint {args.out}, report {report_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.samples < 1:
        raise ValueError("--samples must be >= 1")
    ck = read_checkpoint(args.checkpoint)
    records, _ = read_dataset(args.data)
    if not records:
        raise ValueError(f"{args.data} contains no records")
    seed = 0 if args.seed is None else args.seed
    gen = generate(ck.model, ck.schedule, records, args.samples, seed)
    header = {
        "command": "sample",
        "seed": seed,
        "n_samples": args.samples,
        "checkpoint": str(args.checkpoint),
        "checkpoint_seed": ck.header.get("seed"),
        "config": (ck.header.get("train") or {}).get("config"),
        "version": __version__,
    }
    write_curves(args.out, [r.user_id for r in records], real_matrix(records), gen, header)
    print(f"wrote {len(records)} x {args.samples} generated series to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, real, gen, header = read_curves(args.data)
    bins = args.bins or (header.get("config") or {}).get("metrics.bins") or 50
    rows = metric_report(real, gen, bins=int(bins))
    print(_metrics_table(rows))
    if args.out:
        _write_json(args.out, {"source": str(args.data), "generator": header, "metrics": rows})
    return EXIT_OK


def cmd_fewshot(args) -> int:
    cfg, seed = _resolve(args)
    records, _ = read_dataset(args.data)
    fraction = 0.0 if args.mode == "zero" else args.fraction
    if args.mode == "few" and fraction is None:
        raise ValueError("--fraction is required with --mode few")
    plan = cfg.plan.build()
    report = few_shot_protocol(
        records, cfg.metrics.target_aoi, args.mode, fraction, plan, dataclasses.replace(cfg.train, seed=seed),
        cfg.schedule.build(), cfg.denoiser, n_samples=cfg.metrics.n_samples, bins=cfg.metrics.bins,
    )
    report.update(_echo(cfg, seed, "fewshot"))
    desc = "zero-shot" if report["mode"] == "zero" else f"{fraction:.0%} few-shot"
    print(f"{plan.label} gamma={plan.gamma} delta={plan.delta} {desc} on {report['target_aoi']} ({report['n_eval']} eval records)")
    print(_metrics_table(report["metrics"]))
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cqdiff", description="Physics-guided conditional diffusion for RSRP/SINR series.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train with the configured stage plan")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="report path (default: <out>.report.json)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate series for every record's conditions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="curve CSV path")
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="metrics for a curve CSV")
    e.add_argument("--data", required=True, help="curve CSV from 'sample'")
    e.add_argument("--out", help="write the metric rows as JSON")
    e.add_argument("--bins", type=int)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fewshot", help="zero-shot or few-shot transfer to metrics.target_aoi")
    f.add_argument("--config")
    f.add_argument("--data", required=True)
    f.add_argument("--mode", choices=("zero", "few"), required=True)
    f.add_argument("--fraction", type=float)
    f.add_argument("--out")
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fewshot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, SchemaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
