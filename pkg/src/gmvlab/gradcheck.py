"""Finite-difference checks of every trainable block's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .nnkit import GradCheckReport, Gradients, grad_check
from .reader import LossTerm, ModelConfig, ReaderModel, window_close_terms

CHECK_BATCH = 6
CHECK_BUCKETS = 64


@dataclass
class GradCheckResult:
    target: str
    seed: int
    point: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _arrays(model: ReaderModel, grads: Dict[str, Gradients]):
    params, analytic = {}, {}
    for name, g in grads.items():
        net = model.blocks[name]
        params[f"{name}.theta"] = net.theta
        analytic[f"{name}.theta"] = g.dense
        if net.has_embedding:
            params[f"{name}.table"] = net.table
            analytic[f"{name}.table"] = net.dense_table_grad(g)
    return params, analytic


def _inputs(model: ReaderModel, rng: np.random.Generator):
    feats = rng.integers(0, 1000, size=(CHECK_BATCH, model.config.n_fields))
    return model.buckets(feats)


def check_router(model: ReaderModel, rng: np.random.Generator, **kw) -> GradCheckReport:
    b = _inputs(model, rng)
    labels = rng.integers(0, 2, size=CHECK_BATCH).astype(float)
    _, grads = model.router_objective(b, labels)
    params, analytic = _arrays(model, grads)
    return grad_check(lambda: model.router_objective(b, labels, with_grads=False)[0],
                      analytic, params, rng=rng, **kw)


def check_calibrator(model: ReaderModel, rng: np.random.Generator, **kw) -> GradCheckReport:
    b = _inputs(model, rng)
    delta_t = rng.uniform(0.0, 1.0, CHECK_BATCH)
    n_t = rng.integers(1, 10, CHECK_BATCH)
    gaps = rng.uniform(0.0, 3.0, CHECK_BATCH)
    _, grads = model.calibrator_objective(b, delta_t, n_t, gaps)
    params, analytic = _arrays(model, grads)
    return grad_check(lambda: model.calibrator_objective(b, delta_t, n_t, gaps, with_grads=False)[0],
                      analytic, params, rng=rng, **kw)


def check_predictor(model: ReaderModel, rng: np.random.Generator, **kw) -> GradCheckReport:
    """Online log-MAE under hybrid routing plus the window-close GRA and PLU terms."""
    b = _inputs(model, rng)
    n = rng.integers(1, 5, CHECK_BATCH)
    y_star = rng.uniform(0.5, 5.0, CHECK_BATCH)
    y_t = y_star * rng.uniform(0.2, 1.0, CHECK_BATCH)
    cached = y_star * rng.uniform(0.8, 1.6, CHECK_BATCH)
    terms: List[LossTerm] = [LossTerm(y_t, 1.0, "hybrid")]
    terms += window_close_terms(model, n, y_star, cached)
    _, step = model.predictor_objective(b, terms)
    params, analytic = _arrays(model, step.grads)
    return grad_check(lambda: model.predictor_objective(b, terms, with_grads=False)[0],
                      analytic, params, rng=rng, **kw)


CHECKS = {"router": check_router, "calibrator": check_calibrator, "predictor": check_predictor}


def run_gradchecks(seeds: Sequence[int] = (0, 1, 2), points: int = 10,
                   config: Optional[ModelConfig] = None, h: float = 1e-5,
                   tolerance: float = 1e-4) -> List[GradCheckResult]:
    """Check router, calibrator and the shared-bottom dual-branch stack.

    Each (seed, point) draws a fresh model and batch. Tables are shrunk to
    CHECK_BUCKETS rows per field so that colliding buckets get exercised.
    """
    base = config or ModelConfig()
    base = replace(base, buckets=CHECK_BUCKETS, branch_mode="dual_shared", calibrator_frozen=False)
    results = []
    for seed in seeds:
        for point in range(points):
            for target, fn in CHECKS.items():
                model = ReaderModel(base, seed=seed * 1000 + point)
                rng = np.random.default_rng([seed, point, len(target)])
                report = fn(model, rng, h=h, tolerance=tolerance)
                results.append(GradCheckResult(target, seed, point, report))
    return results
