"""
baselines/historical_average.py — Historical average (HA) baseline.

X̂_t is the elementwise mean of every strictly earlier observed interval with
the same (day-of-week, time-of-day) key; the time-of-day-only variant drops the
weekday from the key.
"""
import logging
from collections import defaultdict
from typing import Iterable

import numpy as np

from baselines.base import BaseBaseline, NoMatchingHistoryError
from externals import day_of_week, time_of_day_slot
from flowgrid import FlowSeries, GridSpec

logger = logging.getLogger(__name__)


class HistoricalAverage(BaseBaseline):
    name = "HA"

    def __init__(self, time_of_day_only: bool = False):
        self.time_of_day_only = time_of_day_only
        if time_of_day_only:
            self.name = "HA-tod"

    def key(self, grid: GridSpec, t: int) -> tuple[int, ...]:
        slot = time_of_day_slot(grid, t)
        return (slot,) if self.time_of_day_only else (day_of_week(grid, t), slot)

    def predict(self, series: FlowSeries, t: int) -> np.ndarray:
        target = self.key(series.grid, t)
        matches = [
            series.get(j) for j in series.indices()
            if j < t and self.key(series.grid, j) == target
        ]
        if not matches:
            raise NoMatchingHistoryError(t, f"no interval before {t} shares key {target}")
        return np.stack(matches).sum(axis=0) / len(matches)

    def predict_many(self, series: FlowSeries, indices: Iterable[int]) -> np.ndarray:
        """Single pass over the series with running per-key sums."""
        wanted = sorted(set(indices))
        sums: dict[tuple, np.ndarray] = {}
        counts: dict[tuple, int] = defaultdict(int)
        out: dict[int, np.ndarray] = {}
        observed = iter(series.indices())
        nxt = next(observed, None)
        for t in wanted:
            while nxt is not None and nxt < t:
                key = self.key(series.grid, nxt)
                x = series.get(nxt)
                sums[key] = x.copy() if key not in sums else sums[key] + x
                counts[key] += 1
                nxt = next(observed, None)
            key = self.key(series.grid, t)
            if counts[key] == 0:
                raise NoMatchingHistoryError(t, f"no interval before {t} shares key {key}")
            out[t] = sums[key] / counts[key]
        return np.stack([out[t] for t in indices])


def ha_predict(series: FlowSeries, t: int, time_of_day_only: bool = False) -> np.ndarray:
    return HistoricalAverage(time_of_day_only).predict(series, t)
