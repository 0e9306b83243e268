import json

import numpy as np
import pytest

from data_manager import decode_flw1, load_series
from externals import ExternalRecord, ExternalSchema
from flowgrid import FlowSeries, GridSpec, Segment
from forecaster import (
    ForecastCache,
    ForecastRecord,
    InsufficientHistoryError,
    LoadedModel,
    encode_forecast,
    export_counts,
    export_forecasts,
    future_externals,
    predict_multi,
    required_indices,
    retention_intervals,
)
from stresnet import ModelConfig, ModelInputs, forward, init_params
from trainer import NormStats, minmax_apply, minmax_invert


@pytest.fixture
def grid():
    return GridSpec(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0,
                    rows=3, cols=3, interval_seconds=1800)


def _model(ext_dim=0, **overrides):
    base = dict(rows=3, cols=3, len_closeness=2, len_period=1, len_trend=0,
                period=3, residual_units=1, filters=4, ext_dim=ext_dim)
    base.update(overrides)
    cfg = ModelConfig(**base)
    return LoadedModel(params=init_params(cfg, seed=2), config=cfg,
                       stats=NormStats(0.0, 40.0), checkpoint_id="abc123")


def _history(grid, n=12, seed=0, start=0):
    rng = np.random.default_rng(seed)
    return FlowSeries(grid=grid, segments=[Segment(start, rng.integers(0, 40, size=(n,) + grid.shape))])


def test_single_step_equals_one_forward_pass(grid):
    model = _model()
    history = _history(grid)
    n = 12
    norm = lambda t: minmax_apply(history.get(t), model.stats)
    inputs = ModelInputs(
        closeness=np.concatenate([norm(n - 2), norm(n - 1)])[None],
        period=norm(n - 3)[None],
    )
    want = minmax_invert(forward(model.params, model.config, inputs)[0], model.stats)
    (record,) = predict_multi(model, history, None, 1, produced_at=5.0)
    assert record.t == n and record.step == 1
    assert record.produced_at == 5.0 and record.checkpoint_id == "abc123"
    np.testing.assert_array_equal(record.tensor, want)


def test_rollout_matches_hand_composed_oracle(grid):
    model = _model()
    history = _history(grid, seed=1)
    n, k = 12, 4
    seen = {t: minmax_apply(history.get(t), model.stats) for t in history.indices()}
    want = []
    for t in range(n, n + k):
        inputs = ModelInputs(
            closeness=np.concatenate([seen[t - 2], seen[t - 1]])[None],
            period=seen[t - 3][None],
        )
        pred = forward(model.params, model.config, inputs)[0]
        seen[t] = pred
        want.append(minmax_invert(pred, model.stats))
    records = predict_multi(model, history, None, k)
    assert [r.t for r in records] == [12, 13, 14, 15]
    assert [r.step for r in records] == [1, 2, 3, 4]
    for rec, w in zip(records, want):
        np.testing.assert_array_equal(rec.tensor, w)


def test_rollout_reads_predictions_for_future_intervals(grid):
    model = _model()
    log = []
    predict_multi(model, _history(grid), None, 4, access_log=log)
    assert (2, "pred", 13) in log and (2, "pred", 12) in log
    assert (3, "pred", 12) in log      # period lag 3
    assert (0, "obs", 9) in log
    assert not any(kind == "obs" and idx >= 12 for _, kind, idx in log)


def test_missing_history_reports_earliest_index(grid):
    model = _model()
    history = FlowSeries(grid=grid, segments=[
        Segment(0, np.zeros((9,) + grid.shape, dtype=np.int64)),
        Segment(10, np.zeros((2,) + grid.shape, dtype=np.int64)),
    ])
    assert required_indices(model.config, 12) == [9, 10, 11]
    with pytest.raises(InsufficientHistoryError) as exc:
        predict_multi(model, history, None, 2)
    assert exc.value.missing_index == 9


def test_gap_needed_only_by_a_later_step_is_reported(grid):
    model = _model(period=5)
    history = FlowSeries(grid=grid, segments=[
        Segment(7, np.zeros((1,) + grid.shape, dtype=np.int64)),
        Segment(9, np.zeros((3,) + grid.shape, dtype=np.int64)),
    ])
    assert required_indices(model.config, 12) == [7, 10, 11]
    assert required_indices(model.config, 12, k=2) == [7, 8, 10, 11]
    (record,) = predict_multi(model, history, None, 1)
    assert record.t == 12
    with pytest.raises(InsufficientHistoryError) as exc:
        predict_multi(model, history, None, 2)
    assert exc.value.missing_index == 8


def test_empty_history(grid):
    with pytest.raises(InsufficientHistoryError):
        predict_multi(_model(), FlowSeries(grid=grid), None, 1)


def test_externals_are_required_for_external_models(grid):
    model = _model(ext_dim=15)
    with pytest.raises(ValueError):
        predict_multi(model, _history(grid), [np.zeros(15)], 2)
    records = predict_multi(model, _history(grid), [np.zeros(15), np.ones(15)], 2)
    assert len(records) == 2


def test_hold_last_externals_keep_weather_and_roll_calendar(grid):
    schema = ExternalSchema(n_weather=4, temperature_range=(0.0, 20.0), wind_range=(0.0, 10.0))
    known = [ExternalRecord(interval=5, weather_code=2, temperature=10.0, wind_speed=5.0),
             ExternalRecord(interval=3, weather_code=0, temperature=1.0, wind_speed=1.0)]
    records, vectors = future_externals("hold-last", grid, schema, 47, 3, known)
    assert [r.interval for r in records] == [47, 48, 49]
    assert all(r.weather_code == 2 and r.temperature == 10.0 for r in records)
    # interval 48 starts 1970-01-02, a Friday
    assert vectors[0][3] == 1.0 and vectors[1][4] == 1.0
    assert all(len(v) == schema.dim for v in vectors)


def test_forecast_supplied_needs_every_interval(grid):
    schema = ExternalSchema()
    known = [ExternalRecord(interval=10), ExternalRecord(interval=11)]
    with pytest.raises(ValueError):
        future_externals("forecast-supplied", grid, schema, 10, 3, known)
    records, _ = future_externals("forecast-supplied", grid, schema, 10, 2, known)
    assert [r.interval for r in records] == [10, 11]


def test_retention_window_is_two_days_of_half_hours():
    assert retention_intervals(2, 1800) == 96


def test_cache_never_returns_records_beyond_retention():
    cache = ForecastCache(retention=96)
    for t in range(300):
        cache.put(ForecastRecord(t=t, tensor=np.zeros(1), produced_at=0.0, checkpoint_id=""))
    removed = cache.evict(now=299)
    assert removed == 204
    assert min(r.t for r in cache.records()) == 204
    assert cache.get(203) is None
    assert not cache.put(ForecastRecord(t=100, tensor=np.zeros(1), produced_at=0.0, checkpoint_id=""))
    # the watermark never moves back
    cache.evict(now=150)
    assert len(cache) == 96


def test_export_counts_round_and_clamp():
    counts = export_counts(np.array([[-3.2, 0.4], [2.5, 7.6]]))
    np.testing.assert_array_equal(counts, [[0, 0], [2, 8]])
    assert counts.dtype == np.int64


def test_export_forecasts_writes_flw1_and_sidecar(grid, tmp_path):
    records = predict_multi(_model(), _history(grid), None, 3, produced_at=123.0)
    path = export_forecasts(records, grid, str(tmp_path / "pred.flw"))
    back = load_series(path, grid)
    assert back.indices() == [12, 13, 14]
    for rec in records:
        np.testing.assert_array_equal(back.get(rec.t), export_counts(rec.tensor))
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["horizon"] == 3 and meta["first_interval"] == 12
    assert meta["checkpoint_id"] == "abc123" and meta["produced_at"] == 123.0
    single = decode_flw1(encode_forecast(records[0], grid), grid)
    assert single.indices() == [12]
