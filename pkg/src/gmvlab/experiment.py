"""Experiment cells and grids: data, learning-rate selection, replay, reports.

A cell is one (regime, seed) pair. Pretrained models are cached per seed and
family, so every regime of a family starts from the same weights. The
learning rate of a family is the grid value whose pretrained model has the
best validation AUC on a held-out slice of the pretrain range; the same rate
is used for the streaming stage.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .core import ClickSample, atomic_write_text
from .datagen import generate
from .metrics import MetricsReport, regression_auc
from .reader import ZONES, ModelConfig, ReaderModel
from .stream import (
    PRESETS,
    InferenceRecord,
    OnlineRunner,
    ReplayCounters,
    SampleTable,
    TrainingRegime,
    build_stream,
    pretrain_calibrator,
    pretrain_predictor,
    pretrain_router,
    snapshot_eval,
)

logger = logging.getLogger(__name__)

_VALIDATION_STREAM = 0x7A11D

# Groupings of the presets into comparison tables, used in the summary.
TABLE_GROUPS: Dict[str, Tuple[str, ...]] = {
    "baselines": ("pre_single", "offline_single", "online_single", "oracle_single",
                  "pre_dual", "offline_dual", "online_dual", "oracle_dual"),
    "debiasing": ("online_dual", "reader_calib", "reader_calib_gra", "reader"),
    "architecture": ("oracle_single", "oracle_dual_independent", "oracle_dual_frozen", "oracle_dual"),
    "routing": ("online_dual_hard", "online_dual"),
}

METRIC_COLUMNS = ("regime", "branch", "routing", "calibrator", "gra", "plu", "seed", "lr",
                  "auc", "acc", "alpr", "n_samples", "status")
LOG_COLUMNS = ("click_id", "click_ts", "y_hat", "y_star", "zone", "r")


@dataclass
class PretrainedFamily:
    family: str
    lr: float
    model: ReaderModel
    validation_auc: Dict[float, Optional[float]]


@dataclass
class CellResult:
    preset: str
    regime: TrainingRegime
    seed: int
    lr: float
    metrics: MetricsReport
    log: List[InferenceRecord]
    counters: ReplayCounters
    model: ReaderModel
    seconds: float = 0.0

    @property
    def zone_counts(self) -> Dict[str, int]:
        counts = Counter(rec.zone for rec in self.log)
        return {z: counts.get(z, 0) for z in ZONES}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


class SeedContext:
    """Everything one seed's cells share: the dataset, the stream and pretrained models."""

    def __init__(self, cfg: ExperimentConfig, seed: int, samples: Optional[Sequence[ClickSample]] = None):
        self.cfg = cfg
        self.seed = seed
        self.window = cfg.generator.window_seconds
        if samples is None:
            samples = generate(replace(cfg.generator, seed=seed))
        self.samples = list(samples)
        split = cfg.split
        pre = [s for s in self.samples if split.in_pretrain(s)]
        self.online = [s for s in self.samples if split.in_online(s)]
        if not pre:
            raise ValueError("no samples fall in the pretrain day range")
        if not self.online:
            raise ValueError("no samples fall in the online day range")
        order = np.random.default_rng([seed, _VALIDATION_STREAM]).permutation(len(pre))
        n_val = max(1, int(round(cfg.training.validation_fraction * len(pre))))
        if n_val >= len(pre):
            n_val = len(pre) - 1 if len(pre) > 1 else 0
        val_idx = set(order[:n_val].tolist())
        self.pretrain_samples = [s for i, s in enumerate(pre) if i not in val_idx]
        self.validation_samples = [s for i, s in enumerate(pre) if i in val_idx]
        self.events = build_stream(self.samples, self.window, split)
        self._aux: Dict[float, ReaderModel] = {}
        self._families: Dict[str, PretrainedFamily] = {}
        self._tables: Dict[int, Tuple[SampleTable, SampleTable]] = {}

    # pretraining ----------------------------------------------------------------------
    def model_config(self, branch_mode: str) -> ModelConfig:
        return replace(self.cfg.model, branch_mode=branch_mode)

    def _tables_for(self, model: ReaderModel):
        key = model.config.buckets
        if key not in self._tables:
            self._tables[key] = (SampleTable.build(self.pretrain_samples, model),
                                 SampleTable.build(self.validation_samples, model))
        return self._tables[key]

    def _aux_model(self, lr: float) -> ReaderModel:
        """Router and calibrator pretrained at ``lr``; independent of the predictor family."""
        if lr not in self._aux:
            t = self.cfg.training
            model = ReaderModel(self.model_config("dual_shared"), seed=self.seed, lr=lr)
            train, _ = self._tables_for(model)
            pretrain_router(model, train, t.epochs, t.batch_size, self.seed)
            pretrain_calibrator(model, train, self.window, t.epochs, t.batch_size, self.seed)
            self._aux[lr] = model
        return self._aux[lr]

    def _pretrain_at(self, family: str, lr: float) -> ReaderModel:
        t = self.cfg.training
        model = ReaderModel(self.model_config(family), seed=self.seed, lr=lr)
        train, _ = self._tables_for(model)
        pretrain_predictor(model, train, t.epochs, t.batch_size, self.seed)
        if model.config.is_dual:
            aux = self._aux_model(lr)
            for name in ("router", "calibrator"):
                model.blocks[name] = aux.blocks[name].copy()
                model.opt[name] = aux.opt[name].copy()
        return model

    def validation_auc(self, model: ReaderModel) -> Optional[float]:
        if len(self.validation_samples) < 2:
            return None
        _, val = self._tables_for(model)
        routing = "hybrid" if model.config.is_dual else "single"
        return regression_auc(model.predict(val.buckets, routing)[0], val.y_star)

    def pretrained(self, family: str) -> PretrainedFamily:
        """Best-validation-AUC pretrained model of a family (ties and undefined AUCs: grid order)."""
        if family not in self._families:
            best, scores = None, {}
            for lr in self.cfg.training.lr_grid:
                model = self._pretrain_at(family, lr)
                auc = self.validation_auc(model)
                scores[lr] = auc
                score = -np.inf if auc is None else auc
                if best is None or score > best[0]:
                    best = (score, lr, model)
            _, lr, model = best
            self._families[family] = PretrainedFamily(family, lr, model, scores)
            logger.info("seed %d family %s: lr %g (validation AUC %s)", self.seed, family, lr, scores)
        return self._families[family]

    # cells ------------------------------------------------------------------------------
    def run_cell(self, preset: str) -> CellResult:
        regime = PRESETS[preset]
        start = time.perf_counter()
        chosen = self.pretrained(regime.family)
        model = chosen.model.copy()
        t = self.cfg.training
        runner = OnlineRunner(model, regime, self.online, self.window, batch_size=t.batch_size,
                              seed=self.seed, purity_check_every=t.purity_check_every,
                              router_close_bce=t.router_close_bce)
        log = runner.run(self.events)
        runner.check_conservation(self.online)
        preds, labels = snapshot_eval(log, self.online)
        metrics = MetricsReport.compute(preds, labels)
        return CellResult(preset, regime, self.seed, chosen.lr, metrics, log, runner.counters, model,
                          time.perf_counter() - start)


# --- serialization ---------------------------------------------------------------------

def render_log(log: Sequence[InferenceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for rec in log:
        w.writerow([rec.click_id, rec.click_ts, _fmt(rec.y_hat), _fmt(rec.y_star), rec.zone, _fmt(rec.r)])
    return buf.getvalue()


def read_log(path: str) -> List[InferenceRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [InferenceRecord(int(row["click_id"]), int(row["click_ts"]), float(row["y_hat"]),
                                float(row["y_star"]), row["zone"], float(row["r"]))
                for row in csv.DictReader(fh)]


def metrics_row(preset: str, seed: int, lr: Optional[float], metrics: Optional[MetricsReport],
                status: str = "ok") -> Dict[str, str]:
    regime = PRESETS[preset]
    return {
        "regime": preset, "branch": regime.branch_mode, "routing": regime.inference_routing,
        "calibrator": _fmt(regime.calibrator), "gra": _fmt(regime.gra), "plu": _fmt(regime.plu),
        "seed": str(seed), "lr": _fmt(lr),
        "auc": _fmt(metrics.auc) if metrics else "", "acc": _fmt(metrics.acc) if metrics else "",
        "alpr": _fmt(metrics.alpr) if metrics else "",
        "n_samples": str(metrics.n_samples) if metrics else "", "status": status,
    }


def render_rows(rows: Sequence[Dict[str, str]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_rows(path: str) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: Sequence[Dict[str, str]]) -> List[Dict[str, str]]:
    """Median over seeds of each metric, per table group and regime (failed cells left out)."""
    by_regime: Dict[str, List[Dict[str, str]]] = {}
    for row in rows:
        if row["status"] == "ok":
            by_regime.setdefault(row["regime"], []).append(row)
    present = {row["regime"] for row in rows}
    out = []
    groups = list(TABLE_GROUPS.items())
    ungrouped = tuple(sorted(present - {r for _, members in groups for r in members}))
    if ungrouped:
        groups.append(("other", ungrouped))
    for group, members in groups:
        for preset in members:
            if preset not in present:
                continue
            ok = by_regime.get(preset, [])
            entry = {"table": group, "regime": preset, "n_seeds": str(len(ok))}
            for col in ("auc", "acc", "alpr"):
                values = [float(r[col]) for r in ok if r[col] != ""]
                entry[col] = _fmt(statistics.median(values)) if values else ""
            out.append(entry)
    return out


SUMMARY_COLUMNS = ("table", "regime", "n_seeds", "auc", "acc", "alpr")


def write_cell_outputs(result: CellResult, out_dir: str) -> None:
    name = f"{result.preset}_seed{result.seed}"
    atomic_write_text(os.path.join(out_dir, "logs", f"{name}.csv"), render_log(result.log))


def run_grid(cfg: ExperimentConfig, out_dir: str, presets: Optional[Sequence[str]] = None,
             seeds: Optional[Sequence[int]] = None,
             on_cell: Optional[Callable[[CellResult], None]] = None,
             write_logs: bool = True) -> List[Dict[str, str]]:
    """Run every (preset, seed) cell; failures become error rows and the grid continues."""
    presets = list(presets or cfg.training.regimes)
    seeds = list(seeds if seeds is not None else cfg.training.seeds)
    rows: List[Dict[str, str]] = []
    selection: List[Dict[str, str]] = []
    for seed in seeds:
        try:
            ctx = SeedContext(cfg, seed)
        except Exception as exc:  # noqa: BLE001 - recorded per cell, grid continues
            logger.error("seed %d: data preparation failed: %s", seed, exc)
            rows.extend(metrics_row(p, seed, None, None, f"error: {type(exc).__name__}: {exc}")
                        for p in presets)
            continue
        for preset in presets:
            try:
                result = ctx.run_cell(preset)
            except Exception as exc:  # noqa: BLE001
                logger.error("cell %s seed %d failed: %s", preset, seed, exc)
                rows.append(metrics_row(preset, seed, None, None, f"error: {type(exc).__name__}: {exc}"))
                continue
            rows.append(metrics_row(preset, seed, result.lr, result.metrics))
            if write_logs:
                write_cell_outputs(result, out_dir)
            if on_cell is not None:
                on_cell(result)
            logger.info("%s seed %d: auc %.4f acc %.4f alpr %.4f (%.1fs)", preset, seed,
                        result.metrics.auc or float("nan"), result.metrics.acc, result.metrics.alpr,
                        result.seconds)
        for fam in sorted(ctx._families.values(), key=lambda f: f.family):
            for lr, auc in fam.validation_auc.items():
                selection.append({"seed": str(seed), "family": fam.family, "lr": _fmt(lr),
                                  "validation_auc": _fmt(auc), "selected": _fmt(lr == fam.lr)})
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), render_rows(rows, METRIC_COLUMNS))
    atomic_write_text(os.path.join(out_dir, "summary.csv"), render_rows(summarize(rows), SUMMARY_COLUMNS))
    atomic_write_text(os.path.join(out_dir, "lr_selection.csv"),
                       render_rows(selection, ("seed", "family", "lr", "validation_auc", "selected")))
    return rows
