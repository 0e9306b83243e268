import json
import os

import numpy as np
import pytest
from pydantic import ValidationError

from checkpoint import load_checkpoint, save_checkpoint
from evaluator import (
    ExperimentSpec,
    config_hash,
    evaluate_checkpoint,
    fusion_weight_stats,
    fusion_weight_stats_from_params,
    rmse,
    run_experiment,
    truncate_series,
)
from flowgrid import FlowSeries, GridSpec, Segment
from report_generator import write_experiment_report, write_fusion_summary
from stresnet import ModelConfig, init_params
from synthcity import SynthConfig, generate
from trainer import TrainHyper, make_instances, train


def _synth(**overrides):
    base = {
        "grid": {"lon_min": 0.0, "lon_max": 1.0, "lat_min": 0.0, "lat_max": 1.0,
                 "rows": 4, "cols": 4, "interval_seconds": 1800},
        "n_agents": 30,
        "n_intervals": 112,
        "period_intervals": 8,
        "seed": 3,
    }
    base.update(overrides)
    return base


def _spec(**overrides):
    doc = {
        "name": "tiny",
        "dataset": {"synth": _synth()},
        "test_intervals": 8,
        "base_model": {"len_closeness": 2, "len_period": 1, "len_trend": 1, "period": 8,
                       "trend_span": 56, "residual_units": 1, "filters": 4},
        "variants": [
            {"name": "full", "overrides": {}},
            {"name": "closeness", "overrides": {"len_period": 0, "len_trend": 0}, "use_externals": False},
        ],
        "hyper": {"batch_size": 16, "max_epochs": 2, "finetune_epochs": 1},
        "seeds": [0],
        "baselines": ["HA", "HA-tod", "Persistence"],
    }
    doc.update(overrides)
    return ExperimentSpec.model_validate(doc)


def test_rmse_over_every_element():
    assert rmse([[1.0, 2.0]], [[1.0, 4.0]]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        rmse(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        rmse(np.zeros(0), np.zeros(0))


def test_fusion_weight_fractions():
    w_c = np.full((2, 2, 2), 0.5)
    w_p = np.zeros((2, 2, 2))
    w_p[0, 0, 0] = 1.0
    stats = fusion_weight_stats(w_c, w_p, None, threshold=0.3)
    assert stats.fractions == {"closeness": 0.0, "period": pytest.approx(7 / 8)}
    assert stats.maps["period"].shape == (2, 2)
    assert stats.maps["period"][0, 0] == pytest.approx(0.5)


def test_fusion_weight_stats_from_sum_model_is_empty():
    cfg = ModelConfig(rows=2, cols=2, fusion="sum")
    assert fusion_weight_stats_from_params(init_params(cfg)).fractions == {}


def test_config_hash_is_stable_and_sensitive():
    a, b = _spec(), _spec()
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(_spec(seeds=[1]))


def test_spec_validation():
    with pytest.raises(ValidationError):
        _spec(baselines=["ARIMA"])
    with pytest.raises(ValidationError):
        _spec(variants=[{"name": "x"}, {"name": "x"}])
    with pytest.raises(ValidationError):
        ExperimentSpec.model_validate({"name": "x", "dataset": {}, "test_intervals": 1,
                                       "variants": [{"name": "a"}]})


def test_truncate_series():
    grid = GridSpec(lon_min=0, lon_max=1, lat_min=0, lat_max=1, rows=1, cols=1, interval_seconds=60)
    series = FlowSeries(grid=grid, segments=[Segment(0, np.zeros((5, 2, 1, 1))),
                                             Segment(8, np.zeros((5, 2, 1, 1)))])
    assert truncate_series(series, 10).indices() == [0, 1, 2, 3, 4, 8, 9]
    assert truncate_series(series, 3).indices() == [0, 1, 2]


def test_run_experiment_ranks_models_and_baselines(tmp_path, capsys):
    report = run_experiment(_spec(horizon=2))
    printed = capsys.readouterr().out
    assert f"{report.name}: RMSE ranking" in printed
    assert "\u2014" not in printed
    models = set(report.results["model"])
    # too little history for a same-weekday average over the test span
    assert models == {"full", "closeness", "HA-tod", "Persistence"}
    assert list(report.results["rank"]) == list(range(1, 5))
    assert report.results["rmse"].is_monotonic_increasing
    assert set(report.per_step["step"]) == {1, 2}
    assert len(report.per_step) == 4
    assert report.metadata["test_start"] == 104

    paths = write_experiment_report(report, str(tmp_path))
    assert all(os.path.isfile(p) for p in paths.values())
    with open(paths["json"], encoding="utf-8") as fh:
        payload = json.load(fh)
    assert payload["config_hash"] == report.config_hash
    with open(paths["markdown"], encoding="utf-8") as fh:
        markdown = fh.read()
    assert "Multi-step RMSE" in markdown
    assert "| Persistence | n/a |" in markdown


def test_experiment_rejects_oversized_test_span():
    with pytest.raises(ValueError):
        run_experiment(_spec(test_intervals=112))


def test_evaluate_checkpoint_reproduces_validation_rmse(tmp_path):
    result = generate(SynthConfig.model_validate(_synth()))
    cfg = ModelConfig(rows=4, cols=4, len_closeness=2, len_period=1, len_trend=0, period=8,
                      residual_units=1, filters=4)
    hyper = TrainHyper(batch_size=16, max_epochs=2, finetune_epochs=1)
    trained = train(make_instances(result.truth, None, cfg), cfg, hyper, seed=4)
    meta = {"hyper": hyper.model_dump(mode="json"), "seed": 4, "final_val_rmse": trained.final_val_rmse}
    path = save_checkpoint(trained.params, trained.stats, cfg, str(tmp_path / "m.strn"), meta)
    scores = evaluate_checkpoint(load_checkpoint(path), result.truth, [])
    assert scores["val_rmse"] == pytest.approx(trained.final_val_rmse, rel=1e-12)
    assert scores["recorded_val_rmse"] == trained.final_val_rmse


def test_write_fusion_summary(tmp_path):
    stats = fusion_weight_stats(np.zeros((1, 2, 2)), None, None)
    path = write_fusion_summary(stats, str(tmp_path / "f.json"))
    with open(path, encoding="utf-8") as fh:
        assert json.load(fh)["fraction_below"] == {"closeness": 1.0}
