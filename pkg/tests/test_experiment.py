import os

import numpy as np
import pytest

from gmvlab.config import parse_config
from gmvlab.experiment import (
    METRIC_COLUMNS,
    SeedContext,
    read_log,
    read_rows,
    render_log,
    run_grid,
    summarize,
)
from toy import TOY_CONFIG


@pytest.fixture(scope="module")
def cfg():
    return parse_config(TOY_CONFIG)


def test_seed_context_split_and_lr_selection(cfg):
    ctx = SeedContext(cfg, 0)
    assert ctx.pretrain_samples and ctx.validation_samples and ctx.online
    ids = {s.click_id for s in ctx.pretrain_samples}
    assert ids.isdisjoint(s.click_id for s in ctx.validation_samples)
    fam = ctx.pretrained("dual_shared")
    assert fam.lr in cfg.training.lr_grid
    scored = {lr: auc for lr, auc in fam.validation_auc.items() if auc is not None}
    assert fam.validation_auc[fam.lr] == max(scored.values())
    # router and calibrator are shared between the dual families
    other = ctx.pretrained("dual_independent")
    if other.lr == fam.lr:
        assert other.model.blocks["router"].checksum() == fam.model.blocks["router"].checksum()


def test_cell_and_log_round_trip(cfg, tmp_path):
    ctx = SeedContext(cfg, 1)
    result = ctx.run_cell("reader")
    assert result.metrics.n_samples == len(ctx.online)
    assert sum(result.zone_counts.values()) == len(ctx.online)
    path = tmp_path / "log.csv"
    path.write_text(render_log(result.log))
    back = read_log(str(path))
    assert [r.click_id for r in back] == [r.click_id for r in result.log]
    assert [r.y_hat for r in back] == [r.y_hat for r in result.log]


def test_grid_outputs_and_determinism(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    rows = run_grid(cfg, str(a))
    run_grid(cfg, str(b))
    assert len(rows) == 8 and all(r["status"] == "ok" for r in rows)
    names = ["metrics.csv", "summary.csv", "lr_selection.csv"] + [f"logs/{f}" for f in sorted(os.listdir(a / "logs"))]
    assert len(names) == 3 + 8
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert list(read_rows(str(a / "metrics.csv"))[0]) == list(METRIC_COLUMNS)


def test_grid_records_failures(cfg, tmp_path, monkeypatch):
    import gmvlab.experiment as ex

    original = ex.SeedContext.run_cell

    def flaky(self, preset):
        if preset == "reader":
            raise RuntimeError("boom")
        return original(self, preset)

    monkeypatch.setattr(ex.SeedContext, "run_cell", flaky)
    rows = run_grid(cfg, str(tmp_path), seeds=[0], write_logs=False)
    status = {r["regime"]: r["status"] for r in rows}
    assert status["reader"].startswith("error: RuntimeError")
    assert status["oracle_dual"] == "ok"


def test_summarize_takes_medians():
    rows = [{"regime": "online_dual", "status": "ok", "auc": str(v), "acc": "0.5", "alpr": "1.0"}
            for v in (0.6, 0.7, 0.9)]
    rows.append({"regime": "online_dual", "status": "error: x", "auc": "", "acc": "", "alpr": ""})
    out = [r for r in summarize(rows) if r["table"] == "debiasing"]
    assert out[0]["auc"] == "0.7" and out[0]["n_seeds"] == "3"
