"""
baselines/ — Non-learned flow predictors used as evaluation references.

Available baselines:
- HistoricalAverage   : mean of earlier intervals with the same weekday and time of day
- PersistenceBaseline : previous interval
"""
from .base import BaseBaseline, NoMatchingHistoryError
from .historical_average import HistoricalAverage, ha_predict
from .persistence import PersistenceBaseline, persistence_predict

ALL_BASELINES = [
    HistoricalAverage(),
    HistoricalAverage(time_of_day_only=True),
    PersistenceBaseline(),
]

__all__ = [
    "BaseBaseline",
    "NoMatchingHistoryError",
    "HistoricalAverage",
    "PersistenceBaseline",
    "ha_predict",
    "persistence_predict",
    "ALL_BASELINES",
]
