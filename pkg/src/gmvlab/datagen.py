"""Synthetic click/purchase-sequence generator with a known ground truth.

Every random draw comes from a Philox stream keyed by the config seed and
addressed by (click_id, phase), so any subset of samples can be regenerated
independently and in any order.

The laws used here (uniform categorical features, logistic repurchase
propensity, truncated-geometric purchase counts, exponential-mixture delays,
lognormal prices) are stand-ins chosen to hit a handful of aggregate targets:
the repurchase share, the share of GMV realized instantly, hourly price
spikes and a slow day-level drift.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .core import (
    SECONDS_PER_DAY,
    SECONDS_PER_HOUR,
    ClickSample,
    PurchaseEvent,
    SchemaError,
    atomic_write_text,
    parse_sample,
    render_sample,
)

logger = logging.getLogger(__name__)

_PHASE_FEATURES = 1
_PHASE_OUTCOME = 2
_PHASE_TIMING = 3
_WORLD = 2**32 - 1

MAX_EXTRA_PURCHASES = 9


def _default_hourly() -> Tuple[float, ...]:
    mult = [1.0] * 24
    for hour, peak in ((0, 1.7), (9, 1.5), (19, 1.6)):
        mult[hour] = peak
    return tuple(mult)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_clicks: int = 20_000
    timeline_days: int = 82
    window_seconds: int = 7 * SECONDS_PER_DAY
    field_cardinalities: Tuple[int, ...] = (4, 8, 16, 64, 256, 1024, 2048, 4096)
    repurchase_base_rate: float = 0.5355
    immediate_gmv_target: float = 0.40
    price_log_mean: float = 0.0
    price_log_sigma: float = 0.35
    repurchase_price_log_sigma: float = 0.4
    # sd of the per-value log-price effects, shared by both purchase types
    price_effect_scale: float = 0.35
    # sd of per-value log-price effects that apply to repurchase samples only
    repurchase_shift_scale: float = 0.1
    daily_drift_sigma: float = 0.15
    # daily random-walk sd of every per-value log-price effect (concept drift)
    effect_drift_sigma: float = 0.01
    hourly_multipliers: Tuple[float, ...] = field(default_factory=_default_hourly)
    repurchase_logit_weights: Tuple[float, ...] = (1.0, 0.85, 0.7, 0.5, 0.25, 0.2, 0.15, 0.15)
    extra_purchase_p: float = 0.3
    # clicks with a higher repurchase propensity stop buying later: the
    # stopping logit moves by -depth_coupling per sd of the repurchase logit
    depth_coupling: float = 1.5
    delay_mean_hours: Tuple[float, ...] = (4.0, 36.0, 120.0)
    delay_weights: Tuple[float, ...] = (0.45, 0.35, 0.2)

    def __post_init__(self):
        problems = []
        if self.n_clicks < 0:
            problems.append("n_clicks must be nonnegative")
        if self.timeline_days <= 0 or self.window_seconds <= 0:
            problems.append("timeline_days and window_seconds must be positive")
        if any(c < 2 for c in self.field_cardinalities) or not self.field_cardinalities:
            problems.append("every field cardinality must be >= 2")
        for name in ("repurchase_base_rate", "immediate_gmv_target", "extra_purchase_p"):
            if not 0.0 < getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in (0, 1)")
        if len(self.hourly_multipliers) != 24 or any(m <= 0 for m in self.hourly_multipliers):
            problems.append("hourly_multipliers needs 24 positive values")
        if len(self.repurchase_logit_weights) != len(self.field_cardinalities):
            problems.append("repurchase_logit_weights needs one weight per field")
        if len(self.delay_mean_hours) != len(self.delay_weights) or not self.delay_weights:
            problems.append("delay_mean_hours and delay_weights must have equal nonzero length")
        if any(m <= 0 for m in self.delay_mean_hours) or any(w < 0 for w in self.delay_weights) \
                or sum(self.delay_weights) <= 0:
            problems.append("delay means must be positive and weights nonnegative")
        if self.daily_drift_sigma < 0 or self.effect_drift_sigma < 0:
            problems.append("drift sigmas must be nonnegative")
        if self.price_log_sigma <= 0 or self.repurchase_price_log_sigma <= 0:
            problems.append("price sigmas must be positive")
        if problems:
            raise SchemaError("; ".join(problems))

    @property
    def n_fields(self) -> int:
        return len(self.field_cardinalities)


class CalibrationError(ValueError):
    """A calibration target cannot be reached with the given config."""


def substream(seed: int, click_id: int, phase: int) -> np.random.Generator:
    """Counter-based stream for one (sample, phase) pair."""
    key = seed & (2**64 - 1)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, click_id, phase, 0]))


@dataclass
class World:
    """Ground-truth parameters shared by all samples of one dataset."""
    repurchase_effects: List[np.ndarray]
    price_effects: List[np.ndarray]
    repurchase_shifts: List[np.ndarray]
    day_levels: np.ndarray
    effect_drift: List[np.ndarray]      # per field, shape (timeline_days, cardinality)

    def stop_probability(self, cfg: GeneratorConfig, features: Sequence[int]) -> float:
        """Per-purchase probability that a repurchase sequence ends."""
        scale = math.sqrt(sum(w * w for w in cfg.repurchase_logit_weights))
        z = math.log(cfg.extra_purchase_p / (1.0 - cfg.extra_purchase_p))
        z -= cfg.depth_coupling * self.repurchase_logit(features) / scale
        return 1.0 / (1.0 + math.exp(-z))

    def repurchase_logit(self, features: Sequence[int]) -> float:
        return float(sum(tab[v] for tab, v in zip(self.repurchase_effects, features)))

    def log_price_mean(self, cfg: GeneratorConfig, features: Sequence[int], click_ts: int,
                       repurchase: bool) -> float:
        day = min(click_ts // SECONDS_PER_DAY, len(self.day_levels) - 1)
        mu = cfg.price_log_mean + sum(tab[v] + walk[day, v] for tab, walk, v
                                      in zip(self.price_effects, self.effect_drift, features))
        if repurchase:
            mu += sum(tab[v] for tab, v in zip(self.repurchase_shifts, features))
        hour = (click_ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR
        return float(mu + self.day_levels[day] + math.log(cfg.hourly_multipliers[hour]))


def build_world(cfg: GeneratorConfig) -> World:
    rng = substream(cfg.seed, _WORLD, 0)
    rep = [rng.normal(0.0, 1.0, size=c) * w
           for c, w in zip(cfg.field_cardinalities, cfg.repurchase_logit_weights)]
    price = [rng.normal(0.0, cfg.price_effect_scale, size=c) for c in cfg.field_cardinalities]
    shift = [rng.normal(0.0, cfg.repurchase_shift_scale, size=c) for c in cfg.field_cardinalities]
    walk = np.cumsum(rng.normal(0.0, cfg.daily_drift_sigma, size=cfg.timeline_days))
    drift = [np.cumsum(rng.normal(0.0, cfg.effect_drift_sigma, size=(cfg.timeline_days, c)), axis=0)
             for c in cfg.field_cardinalities]
    return World(rep, price, shift, walk - walk.mean(), drift)


def calibrate_bias(logits: np.ndarray, target: float, tol: float = 0.03) -> float:
    """Intercept b with mean(sigmoid(logits + b)) == target, by bisection."""
    if logits.size == 0:
        return math.log(target / (1.0 - target))
    lo, hi = -40.0, 40.0

    def rate(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(logits + b)))))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    bias = 0.5 * (lo + hi)
    if abs(rate(bias) - target) > tol:
        raise CalibrationError(
            f"repurchase bias calibration reached {rate(bias):.4f}, target {target:.4f}")
    return bias


def _truncated_delay(rng: np.random.Generator, cfg: GeneratorConfig, remaining: int) -> int:
    """Delay in whole seconds from an exponential mixture truncated to [0, remaining]."""
    if remaining <= 0:
        return 0
    weights = np.asarray(cfg.delay_weights, dtype=float)
    comp = int(rng.choice(len(weights), p=weights / weights.sum()))
    mean = cfg.delay_mean_hours[comp] * SECONDS_PER_HOUR
    u = rng.random()
    d = -mean * math.log1p(-u * -math.expm1(-remaining / mean))
    return min(int(d), remaining)


def _purchase_count(rng: np.random.Generator, repurchase: bool, p: float) -> int:
    if not repurchase:
        return 1
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    # geometric on 1..MAX_EXTRA_PURCHASES by inverse CDF
    u = rng.random()
    total = 1.0 - (1.0 - p) ** MAX_EXTRA_PURCHASES
    k = math.ceil(math.log1p(-u * total) / math.log1p(-p))
    return 1 + min(max(k, 1), MAX_EXTRA_PURCHASES)


def generate(cfg: GeneratorConfig) -> List[ClickSample]:
    """Draw ``cfg.n_clicks`` samples; identical output for identical configs."""
    world = build_world(cfg)
    horizon = cfg.timeline_days * SECONDS_PER_DAY

    click_ts = np.empty(cfg.n_clicks, dtype=np.int64)
    features = np.empty((cfg.n_clicks, cfg.n_fields), dtype=np.int64)
    for i in range(cfg.n_clicks):
        rng = substream(cfg.seed, i, _PHASE_FEATURES)
        click_ts[i] = rng.integers(0, horizon)
        features[i] = [rng.integers(0, c) for c in cfg.field_cardinalities]

    logits = np.array([world.repurchase_logit(f) for f in features])
    bias = calibrate_bias(logits, cfg.repurchase_base_rate)

    counts = np.empty(cfg.n_clicks, dtype=np.int64)
    prices: List[np.ndarray] = []
    for i in range(cfg.n_clicks):
        rng = substream(cfg.seed, i, _PHASE_OUTCOME)
        prob = 1.0 / (1.0 + math.exp(-(logits[i] + bias)))
        repurchase = rng.random() < prob
        n = _purchase_count(rng, repurchase, world.stop_probability(cfg, features[i]))
        mu = world.log_price_mean(cfg, features[i], int(click_ts[i]), repurchase)
        sigma = cfg.repurchase_price_log_sigma if repurchase else cfg.price_log_sigma
        counts[i] = n
        prices.append(np.exp(mu + sigma * rng.standard_normal(n)))

    # The first purchase is instant with probability q; q is set so that the
    # expected instant share of GMV matches the target.
    first_share = np.array([p[0] / math.fsum(p) for p in prices]) if prices else np.ones(1)
    q = cfg.immediate_gmv_target / float(first_share.mean())
    if q > 1.0:
        raise CalibrationError(
            f"immediate_gmv_target {cfg.immediate_gmv_target} unreachable: even all-instant "
            f"first purchases give {first_share.mean():.4f}")
    logger.debug("repurchase bias %.4f, instant-first probability %.4f", bias, q)

    samples = []
    for i in range(cfg.n_clicks):
        rng = substream(cfg.seed, i, _PHASE_TIMING)
        t0 = int(click_ts[i])
        end = t0 + cfg.window_seconds
        if rng.random() < q:
            t = t0
        else:
            t = min(t0 + max(1, _truncated_delay(rng, cfg, cfg.window_seconds)), end)
        stamps = [t]
        for _ in range(int(counts[i]) - 1):
            t += _truncated_delay(rng, cfg, end - t)
            stamps.append(t)
        samples.append(ClickSample(
            click_id=i,
            features=tuple(int(v) for v in features[i]),
            click_ts=t0,
            purchases=tuple(PurchaseEvent(ts=s, price=float(p)) for s, p in zip(stamps, prices[i])),
        ))
    return samples


def write_dataset(samples: Sequence[ClickSample], path: str) -> None:
    text = "".join(render_sample(s) + "\n" for s in samples)
    atomic_write_text(path, text)


def read_dataset(path: str, window_seconds: int = 7 * SECONDS_PER_DAY) -> List[ClickSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(parse_sample(line, window_seconds))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return samples
