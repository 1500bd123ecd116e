"""Domain types and label arithmetic for post-click GMV samples.

A click converts into one or more purchases inside a fixed attribution
window. The regression target is the summed price of those purchases; before
the window closes only a prefix of the purchases is visible.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400
DEFAULT_WINDOW_SECONDS = 7 * SECONDS_PER_DAY


class SchemaError(ValueError):
    """A sample or dataset line violates the documented schema."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


@dataclass(frozen=True)
class PurchaseEvent:
    ts: int
    price: float


@dataclass(frozen=True)
class AttributionConfig:
    window_seconds: int = DEFAULT_WINDOW_SECONDS
    timeline_days: int = 82

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise SchemaError("window_seconds must be positive")
        if self.timeline_days <= 0:
            raise SchemaError("timeline_days must be positive")


@dataclass(frozen=True)
class ClickSample:
    click_id: int
    features: Tuple[int, ...]
    click_ts: int
    purchases: Tuple[PurchaseEvent, ...]

    @property
    def n_purchases(self) -> int:
        return len(self.purchases)

    @property
    def is_repurchase(self) -> bool:
        return len(self.purchases) > 1

    @property
    def day(self) -> int:
        return self.click_ts // SECONDS_PER_DAY

    @property
    def hour(self) -> int:
        return (self.click_ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR


@dataclass(frozen=True)
class LabelView:
    partial: float
    final: float
    purchases_so_far: int
    is_complete: bool


def validate_sample(sample: ClickSample, window_seconds: int = DEFAULT_WINDOW_SECONDS) -> None:
    """Raise SchemaError if ``sample`` breaks any ClickSample invariant."""
    if not sample.purchases:
        raise SchemaError(f"click {sample.click_id}: at least one purchase is required")
    prev = None
    for p in sample.purchases:
        if not (isinstance(p.price, float) or isinstance(p.price, int)) or not math.isfinite(p.price) or p.price <= 0:
            raise SchemaError(f"click {sample.click_id}: price must be positive and finite, got {p.price!r}")
        if p.ts < sample.click_ts or p.ts > sample.click_ts + window_seconds:
            raise SchemaError(f"click {sample.click_id}: purchase at {p.ts} outside attribution window")
        if prev is not None and p.ts < prev:
            raise SchemaError(f"click {sample.click_id}: purchases are not sorted by timestamp")
        prev = p.ts


def final_label(sample: ClickSample) -> float:
    return math.fsum(p.price for p in sample.purchases)


def partial_label(sample: ClickSample, t: int,
                  window_seconds: int = DEFAULT_WINDOW_SECONDS) -> LabelView:
    """Cumulative GMV observed at time ``t`` (purchases with ts <= t)."""
    if t < sample.click_ts:
        raise UsageError(f"query time {t} precedes click time {sample.click_ts}")
    seen = [p.price for p in sample.purchases if p.ts <= t]
    complete = t >= sample.click_ts + window_seconds
    final = final_label(sample)
    # fsum over the full prefix keeps partial == final bit-exact at window close
    partial = final if len(seen) == len(sample.purchases) else math.fsum(seen)
    return LabelView(partial=partial, final=final, purchases_so_far=len(seen), is_complete=complete)


def cumulative_prices(sample: ClickSample) -> List[float]:
    """Partial label right after each purchase, in purchase order."""
    out = []
    for k in range(1, len(sample.purchases) + 1):
        if k == len(sample.purchases):
            out.append(final_label(sample))
        else:
            out.append(math.fsum(p.price for p in sample.purchases[:k]))
    return out


# --- JSONL schema -----------------------------------------------------------

def sample_to_dict(sample: ClickSample) -> dict:
    return {
        "click_id": sample.click_id,
        "features": list(sample.features),
        "click_ts": sample.click_ts,
        "purchases": [{"ts": p.ts, "price": p.price} for p in sample.purchases],
    }


def render_sample(sample: ClickSample) -> str:
    return json.dumps(sample_to_dict(sample), separators=(",", ":"))


_KEYS = {"click_id", "features", "click_ts", "purchases"}


def _require_int(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{what} must be an integer, got {value!r}")
    return value


def sample_from_dict(obj: dict, window_seconds: int = DEFAULT_WINDOW_SECONDS) -> ClickSample:
    if not isinstance(obj, dict) or set(obj) != _KEYS:
        raise SchemaError(f"expected exactly the keys {sorted(_KEYS)}")
    feats = obj["features"]
    if not isinstance(feats, list):
        raise SchemaError("features must be a list")
    purchases = obj["purchases"]
    if not isinstance(purchases, list):
        raise SchemaError("purchases must be a list")
    events = []
    for p in purchases:
        if not isinstance(p, dict) or set(p) != {"ts", "price"}:
            raise SchemaError("each purchase must have exactly the keys ts, price")
        price = p["price"]
        if isinstance(price, bool) or not isinstance(price, (int, float)):
            raise SchemaError(f"price must be a number, got {price!r}")
        events.append(PurchaseEvent(ts=_require_int(p["ts"], "purchase ts"), price=float(price)))
    sample = ClickSample(
        click_id=_require_int(obj["click_id"], "click_id"),
        features=tuple(_require_int(f, "feature") for f in feats),
        click_ts=_require_int(obj["click_ts"], "click_ts"),
        purchases=tuple(events),
    )
    validate_sample(sample, window_seconds)
    return sample


def parse_sample(line: str, window_seconds: int = DEFAULT_WINDOW_SECONDS) -> ClickSample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}") from exc
    return sample_from_dict(obj, window_seconds)


def total_purchases(samples: Iterable[ClickSample]) -> int:
    return sum(len(s.purchases) for s in samples)


def day_range_filter(samples: Sequence[ClickSample], first_day: int, last_day: int) -> List[ClickSample]:
    """Samples whose click day lies in the inclusive range [first_day, last_day]."""
    return [s for s in samples if first_day <= s.day <= last_day]


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
