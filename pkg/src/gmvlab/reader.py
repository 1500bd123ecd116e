"""Repurchase-aware dual-branch GMV predictor with router and label calibrator.

Blocks of a dual model:

* ``bottom`` - shared embedding + MLP encoder producing ``h``
* ``single`` / ``repurchase`` - towers on ``h`` with softplus GMV heads
* ``router`` - its own embedding + MLP, logit of P(N > 1)
* ``calibrator`` - its own embedding + MLP over (features, elapsed fraction,
  purchases so far), softplus head giving the log-space label gap

``dual_independent`` gives each tower a private bottom (``bottom_single``,
``bottom_repurchase``). A ``single`` model has only ``bottom`` and ``single``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .nnkit import (
    VALUE_CEILING,
    EmbeddingSpec,
    Gradients,
    Network,
    OptimizerState,
    adam_step,
    bce_loss,
    hash_buckets,
    load_networks,
    save_networks,
    sigmoid,
)

BRANCH_MODES = ("single", "dual_shared", "dual_independent", "dual_frozen_bottom")
ROUTING_MODES = ("hybrid", "hard", "oracle")
ZONES = ("single", "hybrid", "repurchase")
ZONE_SINGLE, ZONE_HYBRID, ZONE_REPURCHASE = 0, 1, 2
HARD_THRESHOLD = 0.5
PURCHASE_COUNT_SCALE = 10.0
_LOG_CEILING = math.log(VALUE_CEILING)


@dataclass(frozen=True)
class ModelConfig:
    n_fields: int = 8
    embed_dim: int = 8
    buckets: int = 4096
    bottom_sizes: Tuple[int, ...] = (64, 32)
    tower_sizes: Tuple[int, ...] = (32,)
    router_sizes: Tuple[int, ...] = (64, 32)
    calibrator_sizes: Tuple[int, ...] = (64, 32)
    tau1: float = 0.1
    tau2: float = 0.9
    temperature: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 0.5
    branch_mode: str = "dual_shared"
    calibrator_frozen: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau1 < self.tau2 < 1.0:
            raise ValueError(f"need 0 < tau1 < tau2 < 1, got {self.tau1}, {self.tau2}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def is_dual(self) -> bool:
        return self.branch_mode != "single"


@dataclass
class RoutedPrediction:
    y_hat: float
    y_s: float
    y_r: float
    r: float
    zone: str


# --- label algebra ------------------------------------------------------------

def true_gap(y_star, y_t):
    """log(1 + y*) - log(1 + y_t); the gap the calibrator learns."""
    y_star = np.asarray(y_star, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if np.any(y_t < 0) or np.any(y_t > y_star):
        raise ValueError("partial label must satisfy 0 <= y_t <= y*")
    out = np.log1p(y_star) - np.log1p(y_t)
    return float(out) if out.ndim == 0 else out


def pseudo_label(y_t, gap):
    """(1 + y_t) * exp(gap) - 1, capped at VALUE_CEILING."""
    y_t = np.asarray(y_t, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    log_val = np.minimum(np.log1p(y_t) + gap, _LOG_CEILING)
    out = np.minimum(np.expm1(log_val), VALUE_CEILING)
    return float(out) if out.ndim == 0 else out


def online_target(y_t, r, gap):
    """Convex mix of the raw partial label and its calibrated version, weighted by r."""
    y_t = np.asarray(y_t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    out = (1.0 - r) * y_t + r * pseudo_label(y_t, gap)
    return float(out) if out.ndim == 0 else out


def overall_online_loss(l_online: float, l_gra: float, l_plu: float,
                        lambda1: float = 0.1, lambda2: float = 0.5) -> float:
    return l_online + lambda1 * (l_gra - lambda2 * l_plu)


def calibrator_extras(delta_t, n_t) -> np.ndarray:
    delta_t = np.atleast_1d(np.asarray(delta_t, dtype=np.float64))
    n_t = np.atleast_1d(np.asarray(n_t, dtype=np.float64))
    if np.any(delta_t < 0) or np.any(delta_t > 1):
        raise ValueError("elapsed fraction delta_t must lie in [0, 1]")
    return np.stack([delta_t, n_t / PURCHASE_COUNT_SCALE], axis=1)


# --- routing ------------------------------------------------------------------

def routing_weights(mode: str, r=None, n=None, tau1=0.1, tau2=0.9):
    """Per-row (w_single, w_repurchase, router_grad_mask, zone) for a routing rule.

    ``mode`` is one of hybrid, hard, oracle, single. The router mask marks rows
    whose prediction depends smoothly on r (the hybrid zone only).
    """
    if mode == "single":
        size = len(r) if r is not None else len(n)
        ones = np.ones(size)
        return ones, np.zeros(size), np.zeros(size, dtype=bool), np.full(size, ZONE_SINGLE)
    if mode == "oracle":
        n = np.asarray(n)
        if np.any(n < 1):
            raise ValueError("purchase count must be >= 1")
        rep = n > 1
        zone = np.where(rep, ZONE_REPURCHASE, ZONE_SINGLE)
        return (~rep).astype(float), rep.astype(float), np.zeros(len(n), dtype=bool), zone
    r = np.asarray(r, dtype=np.float64)
    if mode == "hard":
        rep = r >= HARD_THRESHOLD
        zone = np.where(rep, ZONE_REPURCHASE, ZONE_SINGLE)
        return (~rep).astype(float), rep.astype(float), np.zeros(len(r), dtype=bool), zone
    if mode == "hybrid":
        # 0 = single (r <= tau1), 1 = hybrid, 2 = repurchase (r >= tau2)
        zone = (r > tau1).astype(np.int64) + (r >= tau2)
        hybrid = zone == ZONE_HYBRID
        pure = zone * 0.5
        return np.where(hybrid, 1.0 - r, 1.0 - pure), np.where(hybrid, r, pure), hybrid, zone
    raise ValueError(f"unknown routing mode {mode!r}")


def combine(ys, yr, ws, wr, zone):
    """Routed prediction; pure-zone rows return the tower output bit-for-bit."""
    mixed = ws * ys + wr * yr
    return np.where(zone == ZONE_SINGLE, ys, np.where(zone == ZONE_REPURCHASE, yr, mixed))


# --- model --------------------------------------------------------------------

@dataclass
class LossTerm:
    """One log-MAE term: coef * mean |log1p(y_hat) - log1p(target)| under a routing rule."""
    target: np.ndarray
    coef: float = 1.0
    routing: str = "hybrid"
    n: Optional[np.ndarray] = None


@dataclass
class StepGrads:
    grads: Dict[str, Gradients]
    idle: set = field(default_factory=set)


class ReaderModel:
    def __init__(self, config: ModelConfig, seed: int = 0, lr: float = 1e-3):
        self.config = config
        c = config
        self.blocks: Dict[str, Network] = {}
        emb = EmbeddingSpec(c.n_fields, c.buckets, c.embed_dim)
        bottom_sizes = [emb.width, *c.bottom_sizes]
        h_dim = bottom_sizes[-1]
        tower = [h_dim, *c.tower_sizes, 1]
        tower_acts = ["relu"] * len(c.tower_sizes) + ["softplus"]
        bottom_acts = ["relu"] * len(c.bottom_sizes)

        def rng(name):
            return np.random.default_rng([seed, sum(ord(ch) * 31 ** i for i, ch in enumerate(name)) % 2**31])

        if c.branch_mode == "dual_independent":
            for side in ("single", "repurchase"):
                self.blocks[f"bottom_{side}"] = Network(bottom_sizes, bottom_acts, emb, rng(f"bottom_{side}"))
        else:
            self.blocks["bottom"] = Network(bottom_sizes, bottom_acts, emb, rng("bottom"))
        self.blocks["single"] = Network(tower, tower_acts, rng=rng("single"))
        if c.is_dual:
            self.blocks["repurchase"] = Network(tower, tower_acts, rng=rng("repurchase"))
            self.blocks["router"] = Network(
                [emb.width, *c.router_sizes, 1], ["relu"] * len(c.router_sizes) + ["identity"],
                emb, rng("router"))
            cal_emb = EmbeddingSpec(c.n_fields, c.buckets, c.embed_dim, n_extra=2)
            self.blocks["calibrator"] = Network(
                [cal_emb.width, *c.calibrator_sizes, 1],
                ["relu"] * len(c.calibrator_sizes) + ["softplus"], cal_emb, rng("calibrator"))
        self.opt: Dict[str, OptimizerState] = {}
        self.set_lr(lr)

    # housekeeping ---------------------------------------------------------------
    def set_lr(self, lr: float) -> None:
        for name, net in self.blocks.items():
            if name in self.opt:
                self.opt[name].lr = lr
            else:
                self.opt[name] = OptimizerState.for_network(net, lr)

    def copy(self) -> "ReaderModel":
        other = ReaderModel.__new__(ReaderModel)
        other.config = self.config
        other.blocks = {k: v.copy() for k, v in self.blocks.items()}
        other.opt = {k: v.copy() for k, v in self.opt.items()}
        return other

    def checksums(self) -> Dict[str, int]:
        return {k: v.checksum() for k, v in self.blocks.items()}

    def versions(self) -> Dict[str, int]:
        return {k: v.version for k, v in self.blocks.items()}

    def buckets(self, features) -> np.ndarray:
        return hash_buckets(features, self.config.buckets)

    def save(self, path: str, meta: Optional[dict] = None) -> None:
        info = {"model_config": asdict(self.config)}
        info.update(meta or {})
        save_networks(self.blocks, path, info)

    @classmethod
    def load(cls, path: str) -> "ReaderModel":
        nets, meta = load_networks(path)
        raw = dict(meta["model_config"])
        for key in ("bottom_sizes", "tower_sizes", "router_sizes", "calibrator_sizes"):
            raw[key] = tuple(raw[key])
        model = cls(ModelConfig(**raw))
        for name, net in nets.items():
            model.blocks[name].theta[...] = net.theta
            if net.has_embedding:
                model.blocks[name].table[...] = net.table
        return model

    # forward pieces ---------------------------------------------------------------
    def towers(self, buckets) -> Tuple[np.ndarray, np.ndarray]:
        """Single- and repurchase-tower outputs, shape (B,) each (y_r = y_s for single models)."""
        if self.config.branch_mode == "dual_independent":
            hs = self.blocks["bottom_single"].forward(buckets=buckets)
            hr = self.blocks["bottom_repurchase"].forward(buckets=buckets)
        else:
            hs = hr = self.blocks["bottom"].forward(buckets=buckets)
        ys = self.blocks["single"].forward(hs)[:, 0]
        if not self.config.is_dual:
            return ys, ys
        yr = self.blocks["repurchase"].forward(hr)[:, 0]
        return ys, yr

    def router_logit(self, buckets) -> np.ndarray:
        return self.blocks["router"].forward(buckets=buckets)[:, 0]

    def router_prob(self, buckets) -> np.ndarray:
        if not self.config.is_dual:
            raise ValueError("single-branch models have no router")
        return sigmoid(self.router_logit(buckets) / self.config.temperature)

    def gap(self, buckets, delta_t, n_t) -> np.ndarray:
        extra = calibrator_extras(delta_t, n_t)
        return self.blocks["calibrator"].forward(buckets=buckets, extra=extra)[:, 0]

    def predict(self, buckets, routing: str, n=None):
        """Batch prediction: (y_hat, y_s, y_r, r, zone); r is NaN where no router is used."""
        ys, yr = self.towers(buckets)
        mode = routing if self.config.is_dual else "single"
        r = self.router_prob(buckets) if mode in ("hybrid", "hard") else np.full(len(ys), np.nan)
        ws, wr, _, zone = routing_weights(mode, r=r, n=n, tau1=self.config.tau1, tau2=self.config.tau2)
        return combine(ys, yr, ws, wr, zone), ys, yr, r, zone

    # training --------------------------------------------------------------------
    def predictor_objective(self, buckets, terms: Sequence[LossTerm], with_grads: bool = True):
        """Summed log-MAE terms over a batch, and per-block gradients if requested.

        Targets are constants; the router receives gradient only through the
        hybrid-zone mixture weights.
        """
        c = self.config
        ys, yr = self.towers(buckets)
        batch = len(ys)
        needs_router = c.is_dual and any(t.routing in ("hybrid", "hard") for t in terms)
        r = self.router_prob(buckets) if needs_router else None
        loss = 0.0
        dys = np.zeros(batch)
        dyr = np.zeros(batch)
        dr = np.zeros(batch)
        for term in terms:
            mode = term.routing if c.is_dual else "single"
            ws, wr, hybrid, zone = routing_weights(mode, r=r if r is not None else ys,
                                                   n=term.n, tau1=c.tau1, tau2=c.tau2)
            y_hat = combine(ys, yr, ws, wr, zone)
            diff = np.log1p(y_hat) - np.log1p(np.asarray(term.target, dtype=np.float64))
            loss += term.coef * float(np.mean(np.abs(diff)))
            if with_grads:
                g = term.coef * np.sign(diff) / (1.0 + y_hat) / batch
                dys += ws * g
                dyr += wr * g
                if r is not None:
                    dr += np.where(hybrid, (yr - ys) * g, 0.0)
        if not with_grads:
            return loss, None
        grads: Dict[str, Gradients] = {}
        dual = c.is_dual
        if not dual:
            dys = dys + dyr
        g_single = self.blocks["single"].backward(dys[:, None])
        grads["single"] = g_single
        if dual:
            grads["repurchase"] = self.blocks["repurchase"].backward(dyr[:, None])
        if c.branch_mode == "dual_independent":
            grads["bottom_single"] = self.blocks["bottom_single"].backward(g_single.input)
            grads["bottom_repurchase"] = self.blocks["bottom_repurchase"].backward(grads["repurchase"].input)
        else:
            dh = g_single.input + (grads["repurchase"].input if dual else 0.0)
            grads["bottom"] = self.blocks["bottom"].backward(dh)
        if r is not None:
            dlogit = dr * r * (1.0 - r) / c.temperature
            grads["router"] = self.blocks["router"].backward(dlogit[:, None])
        # a tower outside every active routing zone (and its private bottom) sits out the step
        idle = set()
        if not dys.any():
            idle.update(("single", "bottom_single"))
        if not dyr.any():
            idle.update(("repurchase", "bottom_repurchase"))
        if not dr.any():
            idle.add("router")
        return loss, StepGrads(grads, idle)

    def apply(self, step: "StepGrads", frozen: Iterable[str] = ()) -> List[str]:
        """Adam-step every block that took part in the loss; returns stepped names."""
        skip = set(frozen) | step.idle
        if self.config.calibrator_frozen:
            skip.add("calibrator")
        stepped = []
        for name, g in step.grads.items():
            if name in skip:
                continue
            adam_step(self.blocks[name], self.opt[name], g)
            stepped.append(name)
        return stepped

    def predictor_step(self, buckets, terms: Sequence[LossTerm], frozen: Iterable[str] = ()) -> float:
        loss, grads = self.predictor_objective(buckets, terms)
        self.apply(grads, frozen)
        return loss

    def router_objective(self, buckets, labels, with_grads: bool = True):
        logit = self.router_logit(buckets)
        r = sigmoid(logit / self.config.temperature)
        loss, dlogit = bce_loss(r, labels)
        value = float(np.mean(loss))
        if not with_grads:
            return value, None
        dz = dlogit / self.config.temperature / len(r)
        return value, {"router": self.blocks["router"].backward(dz[:, None])}

    def router_step(self, buckets, labels) -> float:
        loss, grads = self.router_objective(buckets, labels)
        adam_step(self.blocks["router"], self.opt["router"], grads["router"])
        return loss

    def calibrator_objective(self, buckets, delta_t, n_t, gaps, with_grads: bool = True):
        pred = self.gap(buckets, delta_t, n_t)
        diff = pred - np.asarray(gaps, dtype=np.float64)
        value = float(np.mean(np.abs(diff)))
        if not with_grads:
            return value, None
        d = np.sign(diff) / len(pred)
        return value, {"calibrator": self.blocks["calibrator"].backward(d[:, None])}

    def calibrator_step(self, buckets, delta_t, n_t, gaps) -> float:
        loss, grads = self.calibrator_objective(buckets, delta_t, n_t, gaps)
        adam_step(self.blocks["calibrator"], self.opt["calibrator"], grads["calibrator"])
        return loss


# --- single-sample convenience API ----------------------------------------------------

def _one(model: ReaderModel, features) -> np.ndarray:
    return model.buckets(np.asarray(features, dtype=np.int64)[None, :])


def _routed(y_hat, ys, yr, r, zone) -> RoutedPrediction:
    return RoutedPrediction(float(y_hat[0]), float(ys[0]), float(yr[0]), float(r[0]), ZONES[int(zone[0])])


def route_predict(model: ReaderModel, features) -> RoutedPrediction:
    return _routed(*model.predict(_one(model, features), "hybrid"))


def hard_route_predict(model: ReaderModel, features) -> RoutedPrediction:
    return _routed(*model.predict(_one(model, features), "hard"))


def oracle_route_predict(model: ReaderModel, features, n: int) -> RoutedPrediction:
    if n < 1:
        raise ValueError("purchase count must be >= 1")
    return _routed(*model.predict(_one(model, features), "oracle", n=np.array([n])))


def calibrator_gap(model: ReaderModel, features, delta_t: float, n_t: int) -> float:
    if not 0.0 <= delta_t <= 1.0:
        raise ValueError("delta_t must lie in [0, 1]")
    return float(model.gap(_one(model, features), [delta_t], [n_t])[0])


def gra_loss(model: ReaderModel, features, n, y_star) -> float:
    """Mean log-MAE against final labels, routed by the true purchase count."""
    if len(y_star) == 0:
        return 0.0
    buckets = model.buckets(features)
    term = LossTerm(np.asarray(y_star, dtype=np.float64), routing="oracle", n=np.asarray(n))
    return model.predictor_objective(buckets, [term], with_grads=False)[0]


def plu_loss(model: ReaderModel, features, n, cached_targets) -> float:
    """Mean log-MAE against the cached last-purchase targets; NaN entries are skipped."""
    cached = np.asarray(cached_targets, dtype=np.float64)
    keep = ~np.isnan(cached)
    if not np.any(keep):
        return 0.0
    feats = np.asarray(features)[keep]
    term = LossTerm(cached[keep], routing="oracle", n=np.asarray(n)[keep])
    return model.predictor_objective(model.buckets(feats), [term], with_grads=False)[0]


def window_close_terms(model: ReaderModel, n, y_star, cached=None, use_plu: bool = True) -> List[LossTerm]:
    """Loss terms for lambda1 * (L_GRA - lambda2 * L_PLU)."""
    c = model.config
    n = np.asarray(n)
    terms = [LossTerm(np.asarray(y_star, dtype=np.float64), c.lambda1, "oracle", n)]
    if use_plu and cached is not None and c.lambda2 != 0.0:
        terms.append(LossTerm(np.asarray(cached, dtype=np.float64), -c.lambda1 * c.lambda2, "oracle", n))
    return terms
