"""
baselines/base.py — Abstract base class for non-learned flow predictors.
"""
from abc import ABC, abstractmethod
from typing import Iterable

import numpy as np

from flowgrid import FlowSeries


class NoMatchingHistoryError(LookupError):
    """No earlier interval qualifies as evidence for the requested prediction."""

    def __init__(self, t: int, message: str | None = None):
        self.t = t
        super().__init__(message or f"no usable history before interval {t}")


class BaseBaseline(ABC):
    """
    Baseline interface.

    ``predict(series, t)`` may only read intervals strictly before t.
    """

    name: str = "BaseBaseline"

    @abstractmethod
    def predict(self, series: FlowSeries, t: int) -> np.ndarray:
        """
        Predict X_t from the history in *series*.

        Parameters
        ----------
        series : FlowSeries
            Observed flows; entries at or after t are never read.
        t : int
            Interval index to predict.

        Returns
        -------
        np.ndarray of shape (2, I, J), float64, raw flow units.

        Raises
        ------
        NoMatchingHistoryError when nothing before t qualifies.
        """

    def predict_many(self, series: FlowSeries, indices: Iterable[int]) -> np.ndarray:
        return np.stack([self.predict(series, t) for t in indices])
