import dataclasses

import numpy as np
import pytest

from gmvlab.core import SECONDS_PER_DAY
from gmvlab.datagen import GeneratorConfig, generate
from gmvlab.reader import ModelConfig, ReaderModel, true_gap
from gmvlab.stream import (
    PRESETS,
    EventKind,
    ExperimentSplit,
    InferenceRecord,
    OnlineRunner,
    ProtocolError,
    SampleTable,
    StreamEvent,
    TrainingRegime,
    build_stream,
    calibrator_pairs,
    pretrain,
    pretrain_calibrator,
    pretrain_predictor,
    pretrain_router,
    regime_from_name,
    run_online,
    snapshot_eval,
)
from conftest import make_sample

W = 7 * SECONDS_PER_DAY
SMALL = ModelConfig(buckets=128, bottom_sizes=(16,), tower_sizes=(8,), router_sizes=(8,), calibrator_sizes=(8,))


@pytest.fixture(scope="module")
def data():
    cfg = GeneratorConfig(seed=9, n_clicks=600, timeline_days=30)
    samples = generate(cfg)
    split = ExperimentSplit(pretrain_days=(0, 14), online_days=(22, 29))
    pre = [s for s in samples if split.in_pretrain(s)]
    online = [s for s in samples if split.in_online(s)]
    return samples, pre, online, build_stream(samples, W, split)


def model_for(regime, seed=0):
    mode = "dual_shared" if regime.branch_mode == "dual_frozen_bottom" else regime.branch_mode
    return ReaderModel(dataclasses.replace(SMALL, branch_mode=mode), seed=seed)


def test_same_second_ordering():
    a = make_sample(0, click_ts=100, purchases=((100, 1.0), (100, 2.0)))
    b = make_sample(1, click_ts=100 - W, purchases=((100 - W, 1.0),))
    events = build_stream([a, b], W)
    at_100 = [(e.kind, e.click_id, e.index) for e in events if e.ts == 100]
    assert at_100 == [(EventKind.CLICK_INFERENCE, 0, 0), (EventKind.PURCHASE_UPDATE, 0, 0),
                      (EventKind.PURCHASE_UPDATE, 0, 1), (EventKind.WINDOW_CLOSE, 1, 1)]


def test_stream_contents(data):
    samples, _, online, events = data
    assert len(events) == sum(s.n_purchases + 2 for s in online)
    assert [e.key for e in events] == sorted(e.key for e in events)
    closes = {e.click_id: e for e in events if e.kind == EventKind.WINDOW_CLOSE}
    for s in online:
        assert closes[s.click_id].n == s.n_purchases
    last = [e for e in events if e.kind == EventKind.PURCHASE_UPDATE]
    for e in last:
        assert e.n_t == e.index + 1


@pytest.mark.parametrize("kwargs", [
    dict(name="Nope"),
    dict(name="PreOnly", gra=True),
    dict(name="OnlineVanilla", calibrator=True),
    dict(name="OnlineReader", branch_mode="single", calibrator=True),
    dict(name="OnlineReader", plu=True),
    dict(name="OnlineVanilla", routing_mode="oracle"),
    dict(name="OracleFirstPurchase", routing_mode="hybrid"),
])
def test_invalid_regimes(kwargs):
    with pytest.raises(ValueError):
        TrainingRegime(**kwargs)


def test_presets_and_lookup():
    assert regime_from_name("reader").plu
    assert PRESETS["oracle_dual_frozen"].family == "dual_shared"
    assert PRESETS["online_single"].inference_routing == "single"
    with pytest.raises(ValueError):
        regime_from_name("bogus")


def test_split_validation():
    with pytest.raises(ValueError):
        ExperimentSplit((0, 50), (52, 82)).validate(W)
    with pytest.raises(ValueError):
        ExperimentSplit((10, 5), (57, 82)).validate(W)
    ExperimentSplit().validate(W)


def test_calibrator_pairs_lie_between_purchases():
    s = make_sample(0, click_ts=0, purchases=((0, 1.0), (1000, 2.0), (5000, 3.0)))
    single = make_sample(1, click_ts=0, purchases=((0, 1.0),))
    rows, dt, nt, gaps = calibrator_pairs([single, s], np.random.default_rng(0), W)
    assert rows.tolist() == [1, 1] and nt.tolist() == [1, 2]
    assert 0 <= dt[0] * W < 1000 and 1000 <= dt[1] * W < 5000
    np.testing.assert_allclose(gaps, [true_gap(6.0, 1.0), true_gap(6.0, 3.0)])


def test_pretrain_parts_compose(data):
    _, pre, _, _ = data
    a = ReaderModel(SMALL, seed=1)
    pretrain(a, pre, 1e-3, W, seed=4)
    b = ReaderModel(SMALL, seed=1, lr=1e-3)
    table = SampleTable.build(pre, b)
    pretrain_calibrator(b, table, W, seed=4)
    pretrain_router(b, table, seed=4)
    pretrain_predictor(b, table, seed=4)
    assert a.checksums() == b.checksums()
    with pytest.raises(ValueError):
        pretrain(ReaderModel(SMALL), [], 1e-3, W)


EXPECTED_UPDATES = {
    "PreOnly": lambda s: 0,
    "OfflineDaily": lambda s: len(s),
    "OracleFirstPurchase": lambda s: len(s),
    "OnlineVanilla": lambda s: sum(x.n_purchases for x in s),
}


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_every_preset_conserves_events_and_keeps_inference_pure(data, preset):
    _, _, online, events = data
    regime = PRESETS[preset]
    runner = OnlineRunner(model_for(regime), regime, online, W, purity_check_every=1)
    log = runner.run(events)
    runner.check_conservation(online)
    c = runner.counters
    assert c.clicks == c.window_closes == len(online) == len(log)
    assert c.purchase_updates == sum(s.n_purchases for s in online)
    assert c.purity_checks == len(online)
    if regime.name in EXPECTED_UPDATES:
        assert c.optimizer_updates == EXPECTED_UPDATES[regime.name](online)
    if regime.gra:
        assert c.optimizer_updates == c.purchase_updates + c.window_closes
        assert c.plu_skipped == 0
    preds, labels = snapshot_eval(log, online)
    assert np.all(preds >= 0) and np.all(labels > 0)


def test_pre_only_leaves_parameters_unchanged(data):
    _, _, online, events = data
    model = model_for(PRESETS["pre_dual"])
    sums = model.checksums()
    _, log, _ = run_online(model, events, PRESETS["pre_dual"], online, W)
    assert model.checksums() == sums
    b = SampleTable.build(online, model).buckets
    direct = dict(zip([s.click_id for s in online], model.predict(b, "hybrid")[0]))
    assert all(direct[r.click_id] == r.y_hat for r in log)


def test_frozen_bottom_is_not_updated(data):
    _, _, online, events = data
    model = model_for(PRESETS["oracle_dual_frozen"])
    before = model.blocks["bottom"].checksum()
    run_online(model, events, PRESETS["oracle_dual_frozen"], online, W)
    assert model.blocks["bottom"].checksum() == before


def test_predictions_are_snapshots_before_updates(data):
    # replaying a prefix of the stream reproduces the logged prediction of the next click
    _, _, online, events = data
    regime = PRESETS["reader"]
    model = model_for(regime, seed=3)
    _, log, _ = run_online(model.copy(), events, regime, online, W)
    clicks = [i for i, e in enumerate(events) if e.kind == EventKind.CLICK_INFERENCE]
    k = clicks[len(clicks) // 2]
    partial = model.copy()
    runner = OnlineRunner(partial, regime, online, W)
    runner.run(events[:k + 1])
    assert runner.log[-1].y_hat == log[len(runner.log) - 1].y_hat


def test_replay_is_deterministic(data):
    _, _, online, events = data
    regime = PRESETS["offline_dual"]
    a = run_online(model_for(regime), events, regime, online, W, seed=2)
    b = run_online(model_for(regime), events, regime, online, W, seed=2)
    assert a[0].checksums() == b[0].checksums()
    assert a[1] == b[1]


def test_out_of_order_stream_raises(data):
    _, _, online, events = data
    swapped = [events[1], events[0]] + list(events[2:])
    regime = PRESETS["online_single"]
    if events[0].key == events[1].key:
        pytest.skip("tie")
    with pytest.raises(ProtocolError):
        run_online(model_for(regime), swapped, regime, online, W)


def test_unknown_click_and_mismatched_model(data):
    _, _, online, _ = data
    regime = PRESETS["online_single"]
    bad = [StreamEvent(0, EventKind.CLICK_INFERENCE, 10**9)]
    with pytest.raises(ProtocolError):
        run_online(model_for(regime), bad, regime, online, W)
    with pytest.raises(ValueError):
        OnlineRunner(ReaderModel(SMALL), regime, online, W)


def test_conservation_violation_detected(data):
    _, _, online, events = data
    regime = PRESETS["online_single"]
    runner = OnlineRunner(model_for(regime), regime, online, W)
    runner.run([e for e in events if e.kind != EventKind.WINDOW_CLOSE])
    with pytest.raises(ProtocolError):
        runner.check_conservation(online)


def test_snapshot_eval_errors():
    s = make_sample(0)
    rec = InferenceRecord(0, 0, 1.0, 1.0, "single", float("nan"))
    with pytest.raises(ProtocolError):
        snapshot_eval([rec, rec], [s])
    with pytest.raises(ProtocolError):
        snapshot_eval([], [s])
