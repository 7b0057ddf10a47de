import csv
import math

import numpy as np
import pytest
from PIL import Image

from core.errors import GateError, LabError
from core.evaluation import (
    MetricReport,
    SeedScores,
    VariantResult,
    _aggregate,
    backbone_gate,
    evaluate_backbone,
    evaluate_model,
    evaluate_seed,
    export_figures,
    export_sample_grid,
    predict_segmentations,
)
from core.metrics import METRIC_NAMES
from tests.conftest import CONTEXT


def _scores(value, frames=4):
    return SeedScores(
        per_frame={name: [value] * frames for name in METRIC_NAMES},
        overall={name: value for name in METRIC_NAMES},
        state_mae=[0.1] * frames,
        num_samples=2,
    )


def test_aggregate_skips_empty_frames():
    videos = [
        {name: np.array([0.2, 0.4, 0.6]) for name in METRIC_NAMES},
        {name: np.array([1.0, 1.0, np.nan]) for name in METRIC_NAMES},
    ]
    scores = _aggregate(videos, [np.array([0.0, 1.0, 2.0]), np.array([2.0, 1.0, 0.0])])
    assert scores.num_samples == 2
    assert scores.per_frame["miou"] == pytest.approx([60.0, 70.0, 60.0])
    # headline number is the mean of the plotted curve, even with empty frames
    assert scores.overall["ari"] == pytest.approx(190.0 / 3)
    assert scores.state_mae == [1.0, 1.0, 1.0]
    assert _aggregate(videos, []).state_mae is None


def test_overall_is_mean_of_curve():
    rng = np.random.default_rng(0)
    videos = [{name: rng.random(6) for name in METRIC_NAMES} for _ in range(5)]
    scores = _aggregate(videos, [])
    for name in METRIC_NAMES:
        assert abs(scores.overall[name] - np.mean(scores.per_frame[name])) < 1e-12


def test_variant_summary_uses_population_std():
    row = VariantResult("ours", seeds={"0": _scores(10.0), "1": _scores(20.0), "2": _scores(30.0)})
    summary = row.summary()["miou"]
    assert summary["mean"] == pytest.approx(20.0)
    assert summary["std"] == pytest.approx(math.sqrt(200 / 3))
    assert summary["n"] == 3
    assert VariantResult("empty").summary()["ari"]["n"] == 0
    assert row.mean_curve("ari_fg") == pytest.approx([20.0] * 4)


def test_report_save_load(tmp_path):
    report = MetricReport("baseline", meta={"config_hash": "abc"})
    report.row("ours").seeds["0"] = _scores(50.0)
    report.row("ours").errors["1"] = "DivergenceError: non-finite loss"
    loaded = MetricReport.load(report.save(tmp_path / "report.json"))
    assert loaded.meta == {"config_hash": "abc"}
    assert loaded.rows["ours"].seeds["0"] == report.rows["ours"].seeds["0"]
    assert loaded.rows["ours"].errors == {"1": "DivergenceError: non-finite loss"}
    assert loaded.rows["ours"].completed == ["0"]


def test_export_figures(tmp_path):
    report = MetricReport("baseline")
    report.row("ours").seeds["0"] = _scores(50.0)
    report.row("slotformer").seeds["0"] = _scores(40.0)
    report.row("broken")
    paths = export_figures(report, tmp_path / "a")
    with paths["csv"].open() as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 2 * 4
    assert rows[0] == ["variant", "frame", *METRIC_NAMES, "state_mae"]
    assert paths["curve"].name == "baseline_miou_curve.png"
    again = export_figures(report, tmp_path / "b")
    assert again["csv"].read_bytes() == paths["csv"].read_bytes()
    assert again["curve"].read_bytes() == paths["curve"].read_bytes()


def test_export_sample_grid(tmp_path):
    gt = np.zeros((6, 8, 10), dtype=np.uint8)
    gt[:, 2:5, 3:7] = 1
    path = export_sample_grid(gt, {"ours": gt, "slotformer": np.zeros_like(gt)}, [1, 3, 6], tmp_path / "grid.png")
    with Image.open(path) as image:
        assert image.size == (80 + 20 * 3, 16 + 16 * 3)
    with pytest.raises(LabError):
        export_sample_grid(gt, {}, [0, 7], tmp_path / "bad.png")


def test_pure_rollout_tracks_dataset_states(rollout_factory, frozen_encoder, reader):
    model = rollout_factory("ours_pure")
    scores = evaluate_seed(model, frozen_encoder, reader, reader.split("test"), horizon=4, batch_size=2)
    assert scores.num_samples == 2
    assert all(len(curve) == 4 for curve in scores.per_frame.values())
    assert max(scores.state_mae) < 1e-5
    assert 0.0 <= scores.overall["miou"] <= 100.0
    assert scores.overall["ari"] <= 100.0


def test_evaluate_model_over_seeds(rollout_factory, frozen_encoder, reader):
    models = {0: rollout_factory("slotformer"), 1: rollout_factory("slotformer")}
    result = evaluate_model(models, frozen_encoder, reader, "test", horizon=2, provenance={0: {"steps": 4}})
    assert result.variant == "slotformer"
    assert result.completed == ["0", "1"]
    assert result.seeds["0"].state_mae is None
    assert result.provenance == {"0": {"steps": 4}}
    # same weights, same scores
    assert result.summary()["miou"]["std"] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(LabError):
        evaluate_model({0: rollout_factory("ours"), 1: rollout_factory("slotformer")}, frozen_encoder, reader, "test", horizon=2)


def test_backbone_gate(frozen_encoder, reader):
    score = backbone_gate(frozen_encoder, reader, "val", threshold=-1.0)
    assert -1.0 <= score <= 1.0
    with pytest.raises(GateError) as info:
        backbone_gate(frozen_encoder, reader, "val", threshold=1.1)
    assert info.value.details["threshold"] == 1.1


def test_evaluate_backbone(frozen_encoder, reader):
    scores = evaluate_backbone(frozen_encoder, reader, reader.split("test"), start=CONTEXT, length=5)
    assert len(scores.per_frame["miou"]) == 5
    assert scores.state_mae is None


def test_predict_segmentations(rollout_factory, frozen_encoder, reader):
    segs = predict_segmentations({"ours": rollout_factory("ours")}, frozen_encoder, reader, 6, horizon=4)
    assert set(segs) == {"gt", "ours"}
    assert segs["ours"].shape == segs["gt"].shape == (4, 32, 32)
