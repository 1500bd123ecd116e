"""Event replay: pretraining on closed windows, then streaming updates.

Within one second, inference precedes purchase updates, which precede
window closes; remaining ties break on click id and purchase index. Every
regime replays the same ordered stream and differs only in what it does per
event.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import SECONDS_PER_DAY, ClickSample, cumulative_prices, final_label
from .reader import (
    LossTerm,
    ModelConfig,
    ReaderModel,
    ZONES,
    online_target,
    true_gap,
    window_close_terms,
)

logger = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """The event stream or the replay bookkeeping broke an invariant."""


class EventKind(IntEnum):
    CLICK_INFERENCE = 0
    PURCHASE_UPDATE = 1
    WINDOW_CLOSE = 2


@dataclass(frozen=True)
class StreamEvent:
    ts: int
    kind: EventKind
    click_id: int
    index: int = 0          # purchase index for PURCHASE_UPDATE
    y_t: float = 0.0        # cumulative label after this purchase
    n_t: int = 0            # purchases observed so far
    y_star: float = 0.0     # final label, WINDOW_CLOSE only
    n: int = 0              # total purchases, WINDOW_CLOSE only

    @property
    def key(self) -> Tuple[int, int, int, int]:
        return (self.ts, int(self.kind), self.click_id, self.index)


@dataclass(frozen=True)
class ExperimentSplit:
    pretrain_days: Tuple[int, int] = (0, 50)
    online_days: Tuple[int, int] = (57, 82)

    def validate(self, window_seconds: int) -> None:
        (p0, p1), (o0, o1) = self.pretrain_days, self.online_days
        if p0 > p1 or o0 > o1:
            raise ValueError("day ranges must be ordered (first <= last)")
        if not p1 < o0:
            raise ValueError("pretrain and online ranges must be disjoint, pretrain first")
        if (o0 - p1) * SECONDS_PER_DAY < window_seconds:
            raise ValueError("gap between pretrain and online ranges is shorter than the window")

    def in_pretrain(self, s: ClickSample) -> bool:
        return self.pretrain_days[0] <= s.day <= self.pretrain_days[1]

    def in_online(self, s: ClickSample) -> bool:
        return self.online_days[0] <= s.day <= self.online_days[1]


REGIME_NAMES = ("PreOnly", "OfflineDaily", "OnlineVanilla", "OnlineReader", "OracleFirstPurchase")


@dataclass(frozen=True)
class TrainingRegime:
    name: str
    branch_mode: str = "dual_shared"
    routing_mode: str = "hybrid"
    calibrator: bool = False
    gra: bool = False
    plu: bool = False

    def __post_init__(self):
        from .reader import BRANCH_MODES, ROUTING_MODES
        if self.name not in REGIME_NAMES:
            raise ValueError(f"unknown regime {self.name!r}")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"unknown branch mode {self.branch_mode!r}")
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.routing_mode!r}")
        online = self.name in ("OnlineVanilla", "OnlineReader")
        if (self.calibrator or self.gra or self.plu) and not online:
            raise ValueError("debiasing flags apply to online regimes only")
        if self.calibrator and (self.name != "OnlineReader" or self.branch_mode == "single"):
            raise ValueError("the calibrator needs the OnlineReader regime and a dual-branch model")
        if self.plu and not self.gra:
            raise ValueError("PLU runs on the ground-truth alignment path; enable gra")
        if self.routing_mode == "oracle" and self.name != "OracleFirstPurchase":
            raise ValueError("oracle routing at inference is reserved for the oracle regime")
        if self.name == "OracleFirstPurchase" and self.branch_mode != "single" \
                and self.routing_mode != "oracle":
            raise ValueError("dual oracle regimes route by the true purchase count")

    @property
    def family(self) -> str:
        """Pretraining family: regimes in one family share pretrained weights."""
        if self.branch_mode == "dual_frozen_bottom":
            return "dual_shared"
        return self.branch_mode

    @property
    def inference_routing(self) -> str:
        return "single" if self.branch_mode == "single" else self.routing_mode

    @property
    def is_dual(self) -> bool:
        return self.branch_mode != "single"


# Named cells of the experiment grid.
PRESETS: Dict[str, TrainingRegime] = {
    "pre_single": TrainingRegime("PreOnly", "single"),
    "offline_single": TrainingRegime("OfflineDaily", "single"),
    "online_single": TrainingRegime("OnlineVanilla", "single"),
    "oracle_single": TrainingRegime("OracleFirstPurchase", "single", "oracle"),
    "pre_dual": TrainingRegime("PreOnly"),
    "offline_dual": TrainingRegime("OfflineDaily"),
    "online_dual": TrainingRegime("OnlineVanilla"),
    "online_dual_hard": TrainingRegime("OnlineVanilla", routing_mode="hard"),
    "reader_calib": TrainingRegime("OnlineReader", calibrator=True),
    "reader_calib_gra": TrainingRegime("OnlineReader", calibrator=True, gra=True),
    "reader": TrainingRegime("OnlineReader", calibrator=True, gra=True, plu=True),
    "oracle_dual": TrainingRegime("OracleFirstPurchase", "dual_shared", "oracle"),
    "oracle_dual_frozen": TrainingRegime("OracleFirstPurchase", "dual_frozen_bottom", "oracle"),
    "oracle_dual_independent": TrainingRegime("OracleFirstPurchase", "dual_independent", "oracle"),
}


def regime_from_name(name: str) -> TrainingRegime:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown regime preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- stream construction -----------------------------------------------------------

def sample_events(sample: ClickSample, window_seconds: int) -> List[StreamEvent]:
    events = [StreamEvent(sample.click_ts, EventKind.CLICK_INFERENCE, sample.click_id)]
    for i, (p, y_t) in enumerate(zip(sample.purchases, cumulative_prices(sample))):
        events.append(StreamEvent(p.ts, EventKind.PURCHASE_UPDATE, sample.click_id, i, y_t, i + 1))
    events.append(StreamEvent(sample.click_ts + window_seconds, EventKind.WINDOW_CLOSE, sample.click_id,
                              len(sample.purchases), y_star=final_label(sample), n=len(sample.purchases)))
    return events


def build_stream(samples: Iterable[ClickSample], window_seconds: int,
                 split: Optional[ExperimentSplit] = None) -> List[StreamEvent]:
    """Totally ordered events for every sample (restricted to the online range if ``split``)."""
    events: List[StreamEvent] = []
    for s in samples:
        if split is None or split.in_online(s):
            events.extend(sample_events(s, window_seconds))
    events.sort(key=lambda e: e.key)
    return events


# --- dataset arrays ------------------------------------------------------------------

@dataclass
class SampleTable:
    """Column view of a sample list with pre-hashed embedding buckets."""
    samples: List[ClickSample]
    buckets: np.ndarray
    y_star: np.ndarray
    n: np.ndarray
    index: Dict[int, int]

    @classmethod
    def build(cls, samples: Sequence[ClickSample], model: ReaderModel) -> "SampleTable":
        samples = list(samples)
        feats = np.array([s.features for s in samples], dtype=np.int64).reshape(len(samples), -1)
        return cls(samples, model.buckets(feats) if samples else np.zeros((0, model.config.n_fields), np.int64),
                   np.array([final_label(s) for s in samples]),
                   np.array([s.n_purchases for s in samples], dtype=np.int64),
                   {s.click_id: i for i, s in enumerate(samples)})

    def __len__(self) -> int:
        return len(self.samples)


def calibrator_pairs(samples: Sequence[ClickSample], rng: np.random.Generator, window_seconds: int):
    """Training pairs for the label calibrator from repurchase samples.

    One observation time is drawn per incomplete purchase prefix k < N,
    uniformly in [t_k, t_{k+1}); the target is the log gap to the final label.
    Returns (row index, elapsed fraction, purchases so far, gap).
    """
    rows, delta_t, n_t, gaps = [], [], [], []
    for i, s in enumerate(samples):
        if not s.is_repurchase:
            continue
        cum = cumulative_prices(s)
        y_star = cum[-1]
        for k in range(1, s.n_purchases):
            lo = s.purchases[k - 1].ts
            hi = s.purchases[k].ts
            t = lo if hi <= lo else int(rng.integers(lo, hi))
            rows.append(i)
            delta_t.append((t - s.click_ts) / window_seconds)
            n_t.append(k)
            gaps.append(true_gap(y_star, cum[k - 1]))
    return (np.array(rows, dtype=np.int64), np.array(delta_t), np.array(n_t, dtype=np.int64),
            np.array(gaps))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


_PRETRAIN_STREAMS = {"predictor": 0x5EED01, "router": 0x5EED02, "calibrator": 0x5EED03}


def _pretrain_rng(seed: int, part: str) -> np.random.Generator:
    return np.random.default_rng([seed, _PRETRAIN_STREAMS[part]])


def pretrain_predictor(model: ReaderModel, table: SampleTable, epochs: int = 1, batch_size: int = 1,
                       seed: int = 0) -> None:
    """Log-MAE on final labels; dual models route each sample by its true purchase count."""
    rng = _pretrain_rng(seed, "predictor")
    routing = "oracle" if model.config.is_dual else "single"
    for _ in range(epochs):
        for idx in _minibatches(len(table), batch_size, rng):
            model.predictor_step(table.buckets[idx],
                                 [LossTerm(table.y_star[idx], routing=routing, n=table.n[idx])])


def pretrain_router(model: ReaderModel, table: SampleTable, epochs: int = 1, batch_size: int = 1,
                    seed: int = 0) -> None:
    """Binary cross-entropy on the repurchase indicator."""
    rng = _pretrain_rng(seed, "router")
    for _ in range(epochs):
        for idx in _minibatches(len(table), batch_size, rng):
            model.router_step(table.buckets[idx], (table.n[idx] > 1).astype(float))


def pretrain_calibrator(model: ReaderModel, table: SampleTable, window_seconds: int, epochs: int = 1,
                        batch_size: int = 1, seed: int = 0) -> None:
    """MAE on the log gap, over prefixes of repurchase samples (fresh observation times per epoch)."""
    rng = _pretrain_rng(seed, "calibrator")
    for _ in range(epochs):
        rows, delta_t, n_t, gaps = calibrator_pairs(table.samples, rng, window_seconds)
        for idx in _minibatches(len(rows), batch_size, rng):
            model.calibrator_step(table.buckets[rows[idx]], delta_t[idx], n_t[idx], gaps[idx])


def pretrain(model: ReaderModel, samples: Sequence[ClickSample], lr: float, window_seconds: int,
             epochs: int = 1, batch_size: int = 1, seed: int = 0,
             table: Optional[SampleTable] = None) -> ReaderModel:
    """Fit predictor, router and calibrator on closed-window data.

    The three parts draw from separate random streams, so each can also be
    trained on its own (and shared between models) with identical results.
    """
    if not samples:
        raise ValueError("pretraining needs at least one sample")
    table = table if table is not None else SampleTable.build(samples, model)
    model.set_lr(lr)
    pretrain_predictor(model, table, epochs, batch_size, seed)
    if model.config.is_dual:
        pretrain_router(model, table, epochs, batch_size, seed)
        pretrain_calibrator(model, table, window_seconds, epochs, batch_size, seed)
    return model


# --- online replay -------------------------------------------------------------------

@dataclass
class InferenceRecord:
    click_id: int
    click_ts: int
    y_hat: float
    y_star: float
    zone: str
    r: float


@dataclass
class ReplayCounters:
    clicks: int = 0
    purchase_updates: int = 0
    window_closes: int = 0
    optimizer_updates: int = 0
    plu_skipped: int = 0
    offline_flushes: int = 0
    purity_checks: int = 0


class OnlineRunner:
    """Replays an ordered event stream against one model under one regime."""

    def __init__(self, model: ReaderModel, regime: TrainingRegime, samples: Sequence[ClickSample],
                 window_seconds: int, batch_size: int = 1, seed: int = 0,
                 purity_check_every: int = 0, router_close_bce: bool = True):
        if model.config.branch_mode != regime.branch_mode and not (
                regime.branch_mode == "dual_frozen_bottom" and model.config.branch_mode == "dual_shared"):
            raise ValueError("model branch mode does not match the regime")
        self.model = model
        self.regime = regime
        self.window = window_seconds
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0x0FF1])
        self.table = SampleTable.build(samples, model)
        self.purity_check_every = purity_check_every
        self.router_close_bce = router_close_bce
        self.counters = ReplayCounters()
        self.log: List[InferenceRecord] = []
        self.frozen = {"bottom"} if regime.branch_mode == "dual_frozen_bottom" else set()
        self._cache: Dict[int, float] = {}
        self._buffer: List[int] = []
        self._day: Optional[int] = None
        self._last_key = None

    # helpers -----------------------------------------------------------------------
    def _row(self, click_id: int) -> int:
        try:
            return self.table.index[click_id]
        except KeyError:
            raise ProtocolError(f"event for unknown click {click_id}") from None

    def _step(self, buckets, terms) -> None:
        self.model.predictor_step(buckets, terms, self.frozen)
        self.counters.optimizer_updates += 1

    # event handlers -------------------------------------------------------------------
    def _click(self, ev: StreamEvent) -> None:
        i = self._row(ev.click_id)
        b = self.table.buckets[i:i + 1]
        before = self.model.versions()
        check = self.purity_check_every and self.counters.clicks % self.purity_check_every == 0
        if check:
            sums = self.model.checksums()
        n = self.table.n[i:i + 1] if self.regime.inference_routing == "oracle" else None
        y_hat, _, _, r, zone = self.model.predict(b, self.regime.inference_routing, n=n)
        if self.model.versions() != before or (check and self.model.checksums() != sums):
            raise ProtocolError("inference mutated model parameters")
        self.counters.purity_checks += bool(check)
        self.counters.clicks += 1
        self.log.append(InferenceRecord(ev.click_id, ev.ts, float(y_hat[0]), float(self.table.y_star[i]),
                                        ZONES[int(zone[0])], float(r[0])))

    def _purchase(self, ev: StreamEvent) -> None:
        self.counters.purchase_updates += 1
        regime = self.regime
        name = regime.name
        if name in ("PreOnly", "OfflineDaily"):
            return
        i = self._row(ev.click_id)
        b = self.table.buckets[i:i + 1]
        if name == "OracleFirstPurchase":
            if ev.index == 0:
                routing = "oracle" if regime.is_dual else "single"
                self._step(b, [LossTerm(self.table.y_star[i:i + 1], routing=routing, n=self.table.n[i:i + 1])])
            return
        # a second purchase reveals a repurchase click; only the first one is routed by r
        known_repeat = regime.is_dual and ev.n_t >= 2
        routing = "oracle" if known_repeat else regime.inference_routing
        target = ev.y_t
        if regime.calibrator:
            r = 1.0 if known_repeat else float(self.model.router_prob(b)[0])
            delta_t = min(1.0, (ev.ts - self.table.samples[i].click_ts) / self.window)
            gap = self.model.gap(b, [delta_t], [ev.n_t])[0]
            target = online_target(ev.y_t, r, gap)
        if regime.gra:
            self._cache[ev.click_id] = target
        self._step(b, [LossTerm(np.array([target]), routing=routing, n=np.array([ev.n_t]))])

    def _window_close(self, ev: StreamEvent) -> None:
        self.counters.window_closes += 1
        regime = self.regime
        if regime.name == "OfflineDaily":
            self._buffer.append(self._row(ev.click_id))
            return
        if regime.name not in ("OnlineVanilla", "OnlineReader"):
            return
        i = self._row(ev.click_id)
        if regime.is_dual and self.router_close_bce:
            # the repurchase indicator is final once the window closes
            self.model.router_step(self.table.buckets[i:i + 1], np.array([float(ev.n > 1)]))
        if not regime.gra:
            return
        cached = self._cache.pop(ev.click_id, None)
        if regime.plu and cached is None:
            self.counters.plu_skipped += 1
        cached_arr = None if cached is None else np.array([cached])
        terms = window_close_terms(self.model, np.array([ev.n]), np.array([ev.y_star]), cached_arr,
                                   use_plu=regime.plu)
        if not regime.is_dual:
            for t in terms:
                t.routing = "single"
        self._step(self.table.buckets[i:i + 1], terms)

    def _flush_offline(self) -> None:
        if not self._buffer:
            return
        rows = np.array(self._buffer, dtype=np.int64)
        self._buffer = []
        self.counters.offline_flushes += 1
        routing = "oracle" if self.regime.is_dual else "single"
        for idx in _minibatches(len(rows), self.batch_size, self.rng):
            sel = rows[idx]
            b = self.table.buckets[sel]
            self._step(b, [LossTerm(self.table.y_star[sel], routing=routing, n=self.table.n[sel])])
            if self.regime.is_dual:
                self.model.router_step(b, (self.table.n[sel] > 1).astype(float))

    # driver ---------------------------------------------------------------------------
    def run(self, events: Sequence[StreamEvent]) -> List[InferenceRecord]:
        handlers = {
            EventKind.CLICK_INFERENCE: self._click,
            EventKind.PURCHASE_UPDATE: self._purchase,
            EventKind.WINDOW_CLOSE: self._window_close,
        }
        offline = self.regime.name == "OfflineDaily"
        for ev in events:
            key = ev.key
            if self._last_key is not None and key < self._last_key:
                raise ProtocolError(f"event {key} arrived after {self._last_key}")
            self._last_key = key
            if offline:
                day = ev.ts // SECONDS_PER_DAY
                if self._day is not None and day > self._day:
                    self._flush_offline()
                self._day = day
            handlers[ev.kind](ev)
        if offline:
            self._flush_offline()
        return self.log

    def check_conservation(self, samples: Sequence[ClickSample]) -> None:
        expected_purchases = sum(s.n_purchases for s in samples)
        c = self.counters
        if c.purchase_updates != expected_purchases:
            raise ProtocolError(f"{c.purchase_updates} purchase updates, expected {expected_purchases}")
        if c.window_closes != len(samples) or c.clicks != len(samples):
            raise ProtocolError(f"{c.clicks} clicks / {c.window_closes} window closes for {len(samples)} samples")


def run_online(model: ReaderModel, events: Sequence[StreamEvent], regime: TrainingRegime,
               samples: Sequence[ClickSample], window_seconds: int, **kwargs):
    """Replay ``events``; returns (model, inference log, counters)."""
    runner = OnlineRunner(model, regime, samples, window_seconds, **kwargs)
    log = runner.run(events)
    return model, log, runner.counters


def snapshot_eval(log: Sequence[InferenceRecord], samples: Sequence[ClickSample]):
    """Pair each click's logged prediction with its final label, in sample order."""
    by_id: Dict[int, InferenceRecord] = {}
    for rec in log:
        if rec.click_id in by_id:
            raise ProtocolError(f"click {rec.click_id} logged twice")
        by_id[rec.click_id] = rec
    preds, labels = [], []
    for s in samples:
        rec = by_id.get(s.click_id)
        if rec is None:
            raise ProtocolError(f"click {s.click_id} has no logged prediction")
        preds.append(rec.y_hat)
        labels.append(final_label(s))
    return np.array(preds), np.array(labels)
