"""
baselines/persistence.py — Last observed interval as the forecast.
"""
import numpy as np

from baselines.base import BaseBaseline, NoMatchingHistoryError
from flowgrid import FlowSeries


class PersistenceBaseline(BaseBaseline):
    name = "Persistence"

    def predict(self, series: FlowSeries, t: int) -> np.ndarray:
        prev = series.get(t - 1)
        if prev is None:
            raise NoMatchingHistoryError(t, f"interval {t - 1} is not observed")
        return prev.astype(np.float64)


def persistence_predict(series: FlowSeries, t: int) -> np.ndarray:
    return PersistenceBaseline().predict(series, t)
