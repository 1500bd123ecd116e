import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmvlab.reader import (
    ZONE_HYBRID,
    ZONE_REPURCHASE,
    ZONE_SINGLE,
    LossTerm,
    ModelConfig,
    ReaderModel,
    calibrator_gap,
    combine,
    gra_loss,
    hard_route_predict,
    online_target,
    oracle_route_predict,
    overall_online_loss,
    plu_loss,
    pseudo_label,
    route_predict,
    routing_weights,
    true_gap,
    window_close_terms,
)

SMALL = ModelConfig(buckets=64, bottom_sizes=(16,), tower_sizes=(8,), router_sizes=(8,), calibrator_sizes=(8,))


def test_calibration_identity_on_random_pairs():
    rng = np.random.default_rng(0)
    y_star = rng.uniform(0, 1e6, 1000) * rng.choice([1e-6, 1e-3, 1.0], 1000)
    y_t = y_star * rng.uniform(0, 1, 1000)
    back = pseudo_label(y_t, true_gap(y_star, y_t))
    rel = np.abs(back - y_star) / np.maximum(y_star, 1e-300)
    assert np.all((rel <= 1e-9) | (np.abs(back - y_star) <= 1e-12))


@given(st.floats(0, 1e6), st.floats(0, 1))
def test_calibration_identity_property(y_star, frac):
    y_t = y_star * frac
    assert pseudo_label(y_t, true_gap(y_star, y_t)) == pytest.approx(y_star, rel=1e-9, abs=1e-12)


def test_true_gap_rejects_overshoot():
    with pytest.raises(ValueError):
        true_gap(1.0, 2.0)
    with pytest.raises(ValueError):
        true_gap(1.0, -0.1)


def test_pseudo_label_is_capped():
    assert np.isfinite(pseudo_label(1.0, 1e6))


def test_online_target_mixes_by_r():
    y, gap = 2.0, np.log(2.0)
    assert online_target(y, 0.0, gap) == 2.0
    assert online_target(y, 1.0, gap) == pytest.approx(5.0)
    assert online_target(y, 0.5, gap) == pytest.approx(3.5)


def test_overall_loss_worked_example():
    assert overall_online_loss(1.0, 0.5, 0.2, lambda1=0.1, lambda2=0.5) == 1.04
    assert overall_online_loss(1.0, 0.5, 0.2) == 1.04


def test_three_zone_routing():
    r = np.array([0.0, 0.1, 0.10001, 0.5, 0.89999, 0.9, 1.0])
    ws, wr, hybrid, zone = routing_weights("hybrid", r=r)
    assert zone.tolist() == [ZONE_SINGLE, ZONE_SINGLE, ZONE_HYBRID, ZONE_HYBRID, ZONE_HYBRID,
                             ZONE_REPURCHASE, ZONE_REPURCHASE]
    np.testing.assert_array_equal(wr[hybrid], r[hybrid])
    np.testing.assert_array_equal(ws + wr, np.ones(7))
    ys = np.full(7, 0.1 + 0.2)   # an inexact value: pure zones must not touch it
    yr = np.full(7, 1.0 / 3.0)
    out = combine(ys, yr, ws, wr, zone)
    assert out[0] == ys[0] and out[1] == ys[1]
    assert out[5] == yr[5] and out[6] == yr[6]
    assert out[3] == pytest.approx(0.5 * ys[3] + 0.5 * yr[3])


def test_hard_and_oracle_routing():
    _, wr, mask, zone = routing_weights("hard", r=np.array([0.49, 0.5]))
    assert wr.tolist() == [0.0, 1.0] and not mask.any()
    _, wr, _, _ = routing_weights("oracle", n=np.array([1, 2, 5]))
    assert wr.tolist() == [0.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        routing_weights("oracle", n=np.array([0]))
    with pytest.raises(ValueError):
        routing_weights("mystery", r=np.array([0.5]))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(tau1=0.9, tau2=0.1)
    with pytest.raises(ValueError):
        ModelConfig(branch_mode="triple")
    with pytest.raises(ValueError):
        ModelConfig(temperature=0.0)


@pytest.mark.parametrize("mode, blocks", [
    ("single", {"bottom", "single"}),
    ("dual_shared", {"bottom", "single", "repurchase", "router", "calibrator"}),
    ("dual_frozen_bottom", {"bottom", "single", "repurchase", "router", "calibrator"}),
    ("dual_independent", {"bottom_single", "bottom_repurchase", "single", "repurchase", "router", "calibrator"}),
])
def test_block_layout(mode, blocks):
    model = ReaderModel(dataclasses.replace(SMALL, branch_mode=mode))
    assert set(model.blocks) == blocks


def test_single_sample_api_consistent_with_batch():
    model = ReaderModel(SMALL, seed=1)
    feats = [3, 1, 4, 1, 5, 9, 2, 6]
    p = route_predict(model, feats)
    assert p.zone in ("single", "hybrid", "repurchase")
    assert p.y_hat >= 0 and 0 <= p.r <= 1
    h = hard_route_predict(model, feats)
    assert h.y_hat == (h.y_r if h.r >= 0.5 else h.y_s)
    assert oracle_route_predict(model, feats, 1).y_hat == p.y_s
    assert oracle_route_predict(model, feats, 3).y_hat == p.y_r
    with pytest.raises(ValueError):
        oracle_route_predict(model, feats, 0)
    assert calibrator_gap(model, feats, 0.5, 2) >= 0
    with pytest.raises(ValueError):
        calibrator_gap(model, feats, 1.5, 2)


def test_gra_and_plu_losses_match_direct_formula():
    model = ReaderModel(SMALL, seed=2)
    feats = np.random.default_rng(0).integers(0, 50, size=(4, 8))
    n = np.array([1, 2, 3, 1])
    y_star = np.array([1.0, 2.0, 3.0, 4.0])
    ys, yr = model.towers(model.buckets(feats))
    y_hat = np.where(n > 1, yr, ys)
    assert gra_loss(model, feats, n, y_star) == pytest.approx(np.mean(np.abs(np.log1p(y_hat) - np.log1p(y_star))))
    cached = np.array([np.nan, 2.5, np.nan, 5.0])
    keep = ~np.isnan(cached)
    expect = np.mean(np.abs(np.log1p(y_hat[keep]) - np.log1p(cached[keep])))
    assert plu_loss(model, feats, n, cached) == pytest.approx(expect)
    assert gra_loss(model, feats[:0], n[:0], y_star[:0]) == 0.0


def test_window_close_terms_compose_overall_loss():
    model = ReaderModel(SMALL, seed=3)
    feats = np.random.default_rng(1).integers(0, 50, size=(3, 8))
    n, y_star, cached = np.array([1, 2, 4]), np.array([1.0, 2.0, 6.0]), np.array([1.5, 2.5, 4.0])
    value, _ = model.predictor_objective(model.buckets(feats), window_close_terms(model, n, y_star, cached),
                                         with_grads=False)
    direct = overall_online_loss(0.0, gra_loss(model, feats, n, y_star), plu_loss(model, feats, n, cached))
    assert value == pytest.approx(direct, rel=1e-12)
    assert len(window_close_terms(model, n, y_star, cached, use_plu=False)) == 1


def test_router_gets_no_gradient_in_pure_zones():
    model = ReaderModel(SMALL, seed=4)
    feats = np.random.default_rng(2).integers(0, 50, size=(1, 8))
    b = model.buckets(feats)
    net = model.blocks["router"]
    net.theta[-1] = 50.0   # output bias: r ~ 1, pure repurchase zone
    _, step = model.predictor_objective(b, [LossTerm(np.array([3.0]))])
    assert "router" in step.idle and "single" in step.idle
    stepped = model.apply(step)
    assert "router" not in stepped and "repurchase" in stepped


def test_calibrator_frozen_online_by_default():
    model = ReaderModel(SMALL, seed=5)
    before = model.blocks["calibrator"].checksum()
    b = model.buckets(np.zeros((1, 8), dtype=np.int64))
    model.predictor_step(b, [LossTerm(np.array([2.0]))])
    assert model.blocks["calibrator"].checksum() == before


def test_frozen_blocks_are_skipped():
    model = ReaderModel(SMALL, seed=6)
    before = model.blocks["bottom"].checksum()
    b = model.buckets(np.zeros((1, 8), dtype=np.int64))
    model.predictor_step(b, [LossTerm(np.array([2.0]), routing="oracle", n=np.array([2]))], frozen={"bottom"})
    assert model.blocks["bottom"].checksum() == before


def test_training_steps_reduce_losses():
    model = ReaderModel(SMALL, seed=7, lr=1e-2)
    b = model.buckets(np.random.default_rng(3).integers(0, 40, size=(8, 8)))
    labels = np.array([0, 1] * 4, dtype=float)
    first = model.router_objective(b, labels, with_grads=False)[0]
    for _ in range(50):
        model.router_step(b, labels)
    assert model.router_objective(b, labels, with_grads=False)[0] < first
    term = [LossTerm(np.linspace(1, 5, 8), routing="oracle", n=np.array([1, 2] * 4))]
    first = model.predictor_objective(b, term, with_grads=False)[0]
    for _ in range(50):
        model.predictor_step(b, term)
    assert model.predictor_objective(b, term, with_grads=False)[0] < first


def test_model_checkpoint_round_trip(tmp_path):
    model = ReaderModel(dataclasses.replace(SMALL, branch_mode="dual_independent"), seed=8)
    path = str(tmp_path / "m.ckpt")
    model.save(path, {"lr": 1e-3})
    loaded = ReaderModel.load(path)
    assert loaded.config == model.config
    assert loaded.checksums() == model.checksums()
    feats = np.random.default_rng(4).integers(0, 50, size=(5, 8))
    b = model.buckets(feats)
    for routing in ("hybrid", "hard"):
        np.testing.assert_array_equal(model.predict(b, routing)[0], loaded.predict(b, routing)[0])
