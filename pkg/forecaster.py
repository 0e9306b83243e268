"""
forecaster.py — Multi-step look-ahead prediction and a retention-bounded forecast cache.

predict_multi rolls the model forward k steps: each prediction is kept in
normalised space and fed back as history for the following steps; raw-scale
values are produced once, at emission.
"""
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np

from checkpoint import Checkpoint
from config import DEFAULT_INTERVAL_SECONDS, RETENTION_DAYS, SECONDS_PER_DAY
from data_manager import encode_flw1
from externals import ExternalRecord, ExternalSchema, encode_record, is_holiday
from flowgrid import FlowSeries, GridSpec
from report_generator import write_forecast_sidecar
from stresnet import ModelConfig, ModelInputs, ParameterSet, forward
from trainer import NormStats, minmax_apply, minmax_invert

logger = logging.getLogger(__name__)

ExternalPolicy = Literal["forecast-supplied", "hold-last"]


class InsufficientHistoryError(LookupError):
    """History lacks an interval the rollout needs."""

    def __init__(self, missing_index: int | None, message: str | None = None):
        self.missing_index = missing_index
        super().__init__(message or f"history is missing interval {missing_index}")


@dataclass(frozen=True)
class LoadedModel:
    params: ParameterSet
    config: ModelConfig
    stats: NormStats
    checkpoint_id: str = ""
    schema: ExternalSchema | None = None

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LoadedModel":
        raw_schema = ckpt.metadata.get("external_schema")
        return cls(
            params=ckpt.params,
            config=ckpt.config,
            stats=ckpt.stats,
            checkpoint_id=ckpt.checkpoint_id,
            schema=ExternalSchema.model_validate(raw_schema) if raw_schema else None,
        )


@dataclass(frozen=True)
class ForecastRecord:
    t: int
    tensor: np.ndarray          # raw scale, unclamped
    produced_at: float
    checkpoint_id: str
    step: int = 1


# ── Rollout ────────────────────────────────────────────────────────────────────

def required_indices(config: ModelConfig, n: int, k: int = 1) -> list[int]:
    """Observed intervals a k-step rollout from n reads, ascending.

    Indices at or past n are served by earlier predictions and are excluded.
    """
    return sorted({
        n + i - lag
        for i in range(k)
        for b in config.active_branches
        for lag in config.lags(b)
        if n + i - lag < n
    })


def predict_multi(
    model: LoadedModel,
    history: FlowSeries,
    externals: Sequence[np.ndarray] | None,
    k: int,
    produced_at: float | None = None,
    access_log: list[tuple[int, str, int]] | None = None,
) -> list[ForecastRecord]:
    """
    Predict X_n … X_{n+k−1} where n = history.latest_index + 1.

    Parameters
    ----------
    model      : parameters, architecture and normalisation statistics
    history    : observed raw-scale flows ending at n−1
    externals  : k encoded external vectors for n … n+k−1 (ignored without an
                 external component)
    k          : number of look-ahead steps
    access_log : if given, receives (step, kind, index) for every tensor read,
                 kind ∈ {"obs", "pred", "ext"}

    Returns
    -------
    k ForecastRecords in interval order, raw scale.
    """
    if k < 1:
        raise ValueError(f"horizon must be >= 1, got {k}")
    config = model.config
    if history.latest_index is None:
        raise InsufficientHistoryError(None, "history is empty")
    n = history.latest_index + 1

    missing = [idx for idx in required_indices(config, n, k) if not history.has(idx)]
    if missing:
        raise InsufficientHistoryError(missing[0])
    if config.ext_dim > 0 and (externals is None or len(externals) < k):
        raise ValueError(f"need {k} external vectors, got {0 if externals is None else len(externals)}")

    stamp = time.time() if produced_at is None else produced_at
    normalized: dict[int, np.ndarray] = {}
    predicted: dict[int, np.ndarray] = {}

    def _read(step: int, idx: int) -> np.ndarray:
        if idx in predicted:
            if access_log is not None:
                access_log.append((step, "pred", idx))
            return predicted[idx]
        if idx not in normalized:
            normalized[idx] = minmax_apply(history.get(idx), model.stats)
        if access_log is not None:
            access_log.append((step, "obs", idx))
        return normalized[idx]

    records: list[ForecastRecord] = []
    for i in range(k):
        t = n + i
        branch = {
            b: np.concatenate([_read(i, t - lag) for lag in config.lags(b)], axis=0)[None]
            for b in config.active_branches
        }
        ext = None
        if config.ext_dim > 0:
            if access_log is not None:
                access_log.append((i, "ext", t))
            ext = np.asarray(externals[i], dtype=np.float64)[None]
        inputs = ModelInputs(
            closeness=branch.get("c"), period=branch.get("p"), trend=branch.get("q"), external=ext,
        )
        pred = forward(model.params, config, inputs)[0]
        predicted[t] = pred
        records.append(ForecastRecord(
            t=t,
            tensor=minmax_invert(pred, model.stats),
            produced_at=stamp,
            checkpoint_id=model.checkpoint_id,
            step=i + 1,
        ))
    logger.debug("Rolled out %d step(s) from interval %d.", k, n)
    return records


def future_externals(
    policy: ExternalPolicy,
    grid: GridSpec,
    schema: ExternalSchema,
    n: int,
    k: int,
    known: Sequence[ExternalRecord],
) -> tuple[list[ExternalRecord], list[np.ndarray]]:
    """
    External records and encoded vectors for n … n+k−1.

    ``forecast-supplied`` requires a record for every future interval.
    ``hold-last`` repeats the weather of the last record before n while the
    calendar fields (day of week, weekend, holiday) follow each interval's date.
    """
    by_t = {r.interval: r for r in known}
    future = range(n, n + k)
    if policy == "forecast-supplied":
        absent = [t for t in future if t not in by_t]
        if absent:
            raise ValueError(f"no forecast-supplied externals for interval(s) {absent}")
        records = [by_t[t] for t in future]
    elif policy == "hold-last":
        past = [r for r in known if r.interval < n]
        last = max(past, key=lambda r: r.interval) if past else None
        records = [
            ExternalRecord(
                interval=t,
                is_holiday=is_holiday(grid, t, schema),
                weather_code=last.weather_code if last else schema.other_slot,
                temperature=last.temperature if last else schema.temperature_range[0],
                wind_speed=last.wind_speed if last else schema.wind_range[0],
            )
            for t in future
        ]
    else:
        raise ValueError(f"unknown externals policy {policy!r}")
    return records, [encode_record(grid, r, schema) for r in records]


# ── Cache ──────────────────────────────────────────────────────────────────────

def retention_intervals(days: float = RETENTION_DAYS, interval_seconds: int = DEFAULT_INTERVAL_SECONDS) -> int:
    return int(days * SECONDS_PER_DAY // interval_seconds)


@dataclass
class ForecastCache:
    """
    Most-recent forecast per interval, bounded to *retention* intervals.

    A record for t is kept while ``now − t < retention``; the eviction
    watermark only moves forward, and puts below it are refused.
    """

    retention: int
    _records: dict[int, ForecastRecord] = field(default_factory=dict)
    _watermark: int | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def put(self, record: ForecastRecord) -> bool:
        with self._lock:
            if self._watermark is not None and record.t < self._watermark:
                logger.debug("Refused forecast for evicted interval %d.", record.t)
                return False
            self._records[record.t] = record
            return True

    def get(self, t: int) -> ForecastRecord | None:
        with self._lock:
            return self._records.get(t)

    def evict(self, now: int) -> int:
        with self._lock:
            floor = now - self.retention + 1
            if self._watermark is not None:
                floor = max(floor, self._watermark)
            self._watermark = floor
            stale = [t for t in self._records if t < floor]
            for t in stale:
                del self._records[t]
        if stale:
            logger.debug("Evicted %d forecast(s) older than interval %d.", len(stale), floor)
        return len(stale)

    def records(self) -> list[ForecastRecord]:
        with self._lock:
            return [self._records[t] for t in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._records)


# ── Export ─────────────────────────────────────────────────────────────────────

def export_counts(tensor: np.ndarray) -> np.ndarray:
    """Raw-scale prediction → nonnegative integer counts."""
    return np.clip(np.rint(tensor), 0, None).astype(np.int64)


def encode_forecast(record: ForecastRecord, grid: GridSpec) -> bytes:
    """Single-tensor FLW1 bytes for one forecast."""
    return encode_flw1(grid, record.t, export_counts(record.tensor))


def export_forecasts(records: Sequence[ForecastRecord], grid: GridSpec, path: str) -> str:
    """Write forecasts as FLW1 (one record per contiguous run) plus ``<path>.json``."""
    if not records:
        raise ValueError("no forecasts to export")
    ordered = sorted(records, key=lambda r: r.t)
    runs: list[list[ForecastRecord]] = [[ordered[0]]]
    for rec in ordered[1:]:
        if rec.t == runs[-1][-1].t + 1:
            runs[-1].append(rec)
        else:
            runs.append([rec])
    data = b"".join(
        encode_flw1(grid, run[0].t, np.stack([export_counts(r.tensor) for r in run]))
        for run in runs
    )
    with open(path, "wb") as fh:
        fh.write(data)
    meta: dict[str, Any] = {
        "produced_at": ordered[0].produced_at,
        "horizon": len(ordered),
        "checkpoint_id": ordered[0].checkpoint_id,
        "first_interval": ordered[0].t,
        "intervals": [r.t for r in ordered],
    }
    write_forecast_sidecar(path + ".json", meta)
    logger.info("Exported %d forecast(s) to %s", len(ordered), path)
    return path
