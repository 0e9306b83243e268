import numpy as np
import pytest

from baselines import (
    ALL_BASELINES,
    HistoricalAverage,
    NoMatchingHistoryError,
    PersistenceBaseline,
    ha_predict,
    persistence_predict,
)
from flowgrid import FlowSeries, GridSpec, Segment

WEEK = 336


def _grid():
    return GridSpec(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0,
                    rows=2, cols=3, interval_seconds=1800)


def _brute_force_ha(series, t, tod_only=False):
    """Calendar key from plain integer arithmetic (epoch day 0 is a Thursday)."""
    def key(j):
        seconds = j * 1800
        dow = (seconds // 86400 + 3) % 7
        slot = (seconds % 86400) // 1800
        return slot if tod_only else (dow, slot)

    total, count = np.zeros(series.grid.shape), 0
    for j in series.indices():
        if j < t and key(j) == key(t):
            total = total + series.get(j)
            count += 1
    return total / count


def test_registry_names():
    assert [b.name for b in ALL_BASELINES] == ["HA", "HA-tod", "Persistence"]


@pytest.mark.parametrize("tod_only", [False, True])
def test_ha_matches_brute_force_average(tod_only):
    rng = np.random.default_rng(0)
    grid = _grid()
    series = FlowSeries(grid=grid, segments=[
        Segment(0, rng.integers(0, 100, size=(700,) + grid.shape)),
        Segment(800, rng.integers(0, 100, size=(400,) + grid.shape)),
    ])
    ha = HistoricalAverage(time_of_day_only=tod_only)
    targets = [WEEK + 5, 2 * WEEK, 900, 1199]
    for t in targets:
        np.testing.assert_array_equal(ha.predict(series, t), _brute_force_ha(series, t, tod_only))
    np.testing.assert_array_equal(
        ha.predict_many(series, targets),
        np.stack([_brute_force_ha(series, t, tod_only) for t in targets]),
    )


def test_ha_is_exact_on_a_weekly_repeating_series():
    rng = np.random.default_rng(1)
    grid = _grid()
    week = rng.integers(0, 50, size=(WEEK,) + grid.shape)
    series = FlowSeries(grid=grid, segments=[Segment(0, np.concatenate([week] * 4))])
    targets = list(range(WEEK, 4 * WEEK))
    preds = HistoricalAverage().predict_many(series, targets)
    truths = np.stack([series.get(t) for t in targets])
    assert float(np.sqrt(np.mean((preds - truths) ** 2))) == 0.0


def test_ha_without_matching_history():
    grid = _grid()
    series = FlowSeries(grid=grid, segments=[Segment(0, np.zeros((10,) + grid.shape))])
    with pytest.raises(NoMatchingHistoryError) as exc:
        ha_predict(series, 5)
    assert exc.value.t == 5
    with pytest.raises(NoMatchingHistoryError):
        HistoricalAverage().predict_many(series, [5])


def test_ha_never_reads_the_target_or_later():
    grid = _grid()
    data = np.zeros((WEEK * 2 + 1,) + grid.shape)
    data[WEEK * 2] = 1000.0
    series = FlowSeries(grid=grid, segments=[Segment(0, data)])
    assert ha_predict(series, WEEK * 2).sum() == 0.0


def test_persistence_uses_previous_interval():
    grid = _grid()
    data = np.arange(5 * 12).reshape((5,) + grid.shape)
    series = FlowSeries(grid=grid, segments=[Segment(0, data)])
    np.testing.assert_array_equal(persistence_predict(series, 3), data[2])
    with pytest.raises(NoMatchingHistoryError):
        PersistenceBaseline().predict(series, 0)
