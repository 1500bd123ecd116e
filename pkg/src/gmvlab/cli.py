"""Command-line entry point: generate, analyze, train, ablate, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, render_config
from .core import SECONDS_PER_HOUR, SchemaError, UsageError, atomic_write_text
from .datagen import CalibrationError, generate, read_dataset, write_dataset
from .experiment import (
    METRIC_COLUMNS,
    SeedContext,
    metrics_row,
    render_log,
    render_rows,
    run_grid,
)
from .gradcheck import run_gradchecks
from .metrics import (
    compare_purchase_types,
    cumulative_fraction_curve,
    default_tau_grid,
    hourly_gmv_curve,
    regression_auc,
)
from .stream import PRESETS, ProtocolError, SampleTable

logger = logging.getLogger("gmvlab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, generator=replace(cfg.generator, seed=args.seed),
                      training=replace(cfg.training, seeds=(args.seed,)))
    if getattr(args, "regime", None) is not None:
        if args.regime not in PRESETS:
            raise ConfigError(f"unknown regime {args.regime!r}; known: {', '.join(PRESETS)}")
        cfg = replace(cfg, training=replace(cfg.training, regime=args.regime, regimes=(args.regime,)))
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    return out


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# --- subcommands -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = args.out or os.path.join(cfg.output.directory, f"data_seed{cfg.generator.seed}.jsonl")
    samples = generate(cfg.generator)
    write_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def analysis_tables(samples, window_seconds: int, n_bins: int = 40):
    """Rendered CSV text for the hourly, cumulative, distribution and KS analyses."""
    if not samples:
        raise UsageError("dataset is empty")
    hourly = hourly_gmv_curve(samples)
    taus = default_tau_grid(window_seconds)
    frac = cumulative_fraction_curve(samples, taus)
    comp = compare_purchase_types(samples, n_bins)
    centers = np.sqrt(comp.edges[:-1] * comp.edges[1:])
    tables = {
        "hourly_gmv.csv": "hour,mean_gmv\n" + "".join(f"{h},{_fmt(v)}\n" for h, v in enumerate(hourly)),
        "cumulative_fraction.csv": "tau_hours,fraction\n" + "".join(
            f"{_fmt(t / SECONDS_PER_HOUR)},{_fmt(f)}\n" for t, f in zip(taus, frac)),
        "gmv_distribution.csv": "bin,count_single,count_repurchase\n" + "".join(
            f"{_fmt(c)},{a},{b}\n" for c, a, b in zip(centers, comp.count_single, comp.count_repurchase)),
        "ks_test.csv": "statistic,p_value,n_single,n_repurchase,repurchase_fraction\n"
                       f"{_fmt(comp.ks_statistic)},{_fmt(comp.p_value)},{comp.n_single},{comp.n_repurchase},"
                       f"{_fmt(comp.n_repurchase / len(samples))}\n",
    }
    return tables, comp


def cmd_analyze(args) -> int:
    cfg = _config(args)
    if args.data:
        samples = read_dataset(args.data, cfg.generator.window_seconds)
    else:
        samples = generate(cfg.generator)
    out = _out_dir(args, cfg)
    tables, comp = analysis_tables(samples, cfg.generator.window_seconds)
    for name, text in tables.items():
        atomic_write_text(os.path.join(out, name), text)
    print(f"{len(samples)} samples, repurchase share {comp.n_repurchase / len(samples):.4f}, "
          f"KS D={comp.ks_statistic:.4f} p={comp.p_value:.3g}; tables in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.training.seeds[0] if args.seed is None else args.seed
    samples = read_dataset(args.data, cfg.generator.window_seconds) if args.data else None
    out = _out_dir(args, cfg)
    ctx = SeedContext(cfg, seed, samples)
    preset = cfg.training.regime
    result = ctx.run_cell(preset)
    result.model.save(os.path.join(out, "model.ckpt"), {"regime": preset, "seed": seed, "lr": result.lr})
    atomic_write_text(os.path.join(out, "inference_log.csv"), render_log(result.log))
    atomic_write_text(os.path.join(out, "metrics.csv"),
                      render_rows([metrics_row(preset, seed, result.lr, result.metrics)], METRIC_COLUMNS))
    zones = result.zone_counts
    atomic_write_text(os.path.join(out, "zones.csv"),
                      "zone,count\n" + "".join(f"{z},{c}\n" for z, c in zones.items()))
    info = {"regime": preset, "seed": seed, "lr": result.lr,
            "validation_auc": {repr(k): v for k, v in ctx.pretrained(result.regime.family).validation_auc.items()},
            "counters": vars(result.counters), "zones": zones}
    if result.model.config.is_dual:
        table = SampleTable.build(ctx.online, result.model)
        info["router_auc_online"] = regression_auc(result.model.router_prob(table.buckets),
                                                   (table.n > 1).astype(float))
    atomic_write_text(os.path.join(out, "replay.json"), json.dumps(info, indent=2, sort_keys=True) + "\n")
    m = result.metrics
    print(f"{preset} seed {seed} lr {result.lr:g}: auc {m.auc:.4f} acc {m.acc:.4f} alpr {m.alpr:.4f} "
          f"({m.n_samples} clicks); outputs in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    atomic_write_text(os.path.join(out, "config.txt"), render_config(cfg))
    rows = run_grid(cfg, out)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)} cells ok, {len(failed)} failed; results in {out}")
    for r in failed:
        print(f"  {r['regime']} seed {r['seed']}: {r['status']}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = (args.seed,) if args.seed is not None else (0, 1, 2)
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    results = run_gradchecks(seeds, args.points, cfg.model)
    lines = [f"{r.target:<11s} seed={r.seed} point={r.point:<3d} max_rel_err={r.report.worst:.3e} "
             f"{'ok' if r.passed else 'FAIL'}" for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    failed = [r for r in results if not r.passed]
    worst = max(r.report.worst for r in results)
    print(f"{len(results)} checks, {len(failed)} failed, worst relative error {worst:.3e}")
    for r in failed:
        print("\n".join(r.report.lines()), file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_config(args) -> int:
    text = render_config(_config(args))
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmvlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=False, regime=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat section.key = value config file")
        p.add_argument("--out", help="output path or directory")
        p.add_argument("--seed", type=int, help="override the seed (generator and training)")
        if regime:
            p.add_argument("--regime", choices=sorted(PRESETS), help="regime preset")
        if data:
            p.add_argument("--data", help="JSONL dataset (default: generate from the config)")
        p.set_defaults(func=fn)
        return p

    add("generate", cmd_generate, "write a synthetic JSONL dataset")
    add("analyze", cmd_analyze, "hourly, cumulative-fraction and distribution analyses", data=True)
    add("train", cmd_train, "pretrain and replay one regime", data=True, regime=True)
    add("ablate", cmd_ablate, "run the regime x seed grid", regime=True)
    gc = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    gc.add_argument("--points", type=int, default=10, help="random points per seed")
    add("config", cmd_config, "print the effective config", regime=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"gmvlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, CalibrationError, ProtocolError, ValueError, OSError) as exc:
        print(f"gmvlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
