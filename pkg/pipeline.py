"""
pipeline.py — Online pull → convert → predict → push loop.

Each tick:
  1. pull     trajectory batches ``traj:<t>`` (and optional ``ext:<t>``) for the
              next unseen intervals from the cache
  2. convert  batches into FlowTensors and append them to the in-memory series
  3. predict  k steps ahead from the updated series
  4. push     FLW1-encoded forecasts to ``flow:pred:<t>`` with a retention TTL
then publishes an immutable Snapshot that the HTTP layer reads.
"""
import contextlib
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, TypeVar

from pydantic import BaseModel, Field

from checkpoint import load_checkpoint
from config import (
    DEFAULT_HORIZON,
    DEFAULT_TICK_SECONDS,
    EXT_KEY_FMT,
    PRED_KEY_FMT,
    RETENTION_DAYS,
    TRAJ_KEY_FMT,
)
from data_manager import externals_csv_bytes, load_grid, load_series, read_externals_csv, read_trajectory_csv
from externals import ExternalRecord
from flowgrid import FlowSeries, GridSpec, Segment, build_series
from forecaster import (
    ExternalPolicy,
    ForecastCache,
    ForecastRecord,
    InsufficientHistoryError,
    LoadedModel,
    encode_forecast,
    future_externals,
    predict_multi,
    retention_intervals,
)
from kvstore import KVBackend, KVError, connect

logger = logging.getLogger(__name__)

STAGES = ("pull", "convert", "predict", "push")
T = TypeVar("T")


class PipelineConfig(BaseModel):
    cache_url: str = "memory://"
    grid_path: str
    checkpoint_path: str
    horizon: int = Field(default=DEFAULT_HORIZON, ge=1)
    tick_seconds: float = Field(default=DEFAULT_TICK_SECONDS, gt=0)
    retention_days: float = Field(default=RETENTION_DAYS, gt=0)
    externals_policy: ExternalPolicy = "hold-last"
    history_path: str | None = None
    externals_path: str | None = None
    start_interval: int | None = None
    max_batches_per_tick: int = Field(default=48, ge=1)


@dataclass(frozen=True)
class Snapshot:
    series: FlowSeries
    latest_index: int
    forecasts: tuple[ForecastRecord, ...]
    tick_count: int
    updated_at: float
    checkpoint_id: str
    horizon: int


@dataclass
class TickReport:
    tick: int
    status: str = "ok"                       # ok | no-data | skipped | error
    intervals: list[int] = field(default_factory=list)
    durations_ms: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    pushed_keys: list[str] = field(default_factory=list)
    message: str = ""


# ── Feed helpers ───────────────────────────────────────────────────────────────

def push_trajectories(kv: KVBackend, t: int, csv_bytes: bytes, ttl_seconds: float | None = None) -> str:
    key = TRAJ_KEY_FMT.format(t=t)
    kv.set(key, csv_bytes, ttl_seconds)
    return key


def push_externals(kv: KVBackend, record: ExternalRecord, ttl_seconds: float | None = None) -> str:
    key = EXT_KEY_FMT.format(t=record.interval)
    kv.set(key, externals_csv_bytes([record]), ttl_seconds)
    return key


# ── Pipeline ───────────────────────────────────────────────────────────────────

class Pipeline:
    """Single writer that owns the series, the cache connection and the forecast cache."""

    def __init__(
        self,
        config: PipelineConfig,
        model: LoadedModel,
        grid: GridSpec,
        kv: KVBackend,
        history: FlowSeries | None = None,
        externals: list[ExternalRecord] | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.config = config
        self.model = model
        self.grid = grid
        self.kv = kv
        self.clock = clock
        self.series = history if history is not None else FlowSeries(grid=grid)
        self.externals: dict[int, ExternalRecord] = {r.interval: r for r in externals or []}
        self.retention = retention_intervals(config.retention_days, grid.interval_seconds)
        self.window = max(self.retention, model.config.max_lag + 1)
        self.cache = ForecastCache(self.retention)
        self.tick_count = 0
        self._next = (
            config.start_interval if config.start_interval is not None
            else (self.series.latest_index + 1 if self.series.latest_index is not None else 0)
        )
        self._snapshot: Snapshot | None = None
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Pipeline":
        grid = load_grid(config.grid_path)
        model = LoadedModel.from_checkpoint(load_checkpoint(config.checkpoint_path))
        if model.config.rows != grid.rows or model.config.cols != grid.cols:
            raise ValueError(
                f"checkpoint grid {model.config.rows}x{model.config.cols} does not match "
                f"{grid.rows}x{grid.cols}"
            )
        history = load_series(config.history_path, grid) if config.history_path else None
        externals = read_externals_csv(config.externals_path) if config.externals_path else None
        return cls(config, model, grid, connect(config.cache_url), history, externals)

    @property
    def snapshot(self) -> Snapshot | None:
        with self._lock:
            return self._snapshot

    # ── Tick ─────────────────────────────────────────────────────────────────

    def tick(self, now: float | None = None) -> TickReport:
        """Run one pull → convert → predict → push cycle and report per-stage wall time."""
        self.tick_count += 1
        report = TickReport(tick=self.tick_count)
        now = self.clock() if now is None else now

        try:
            with _timed(report, "pull"):
                batches = self._pull()
            if not batches:
                report.status = "no-data"
                logger.debug("Tick %d: no new trajectory batch at interval %d.", report.tick, self._next)
                return report

            unreadable: tuple[int, ValueError] | None = None
            with _timed(report, "convert"):
                for t, data in batches:
                    try:
                        flows = build_series(self.grid, read_trajectory_csv(data), coverage=[(t, t + 1)]).get(t)
                    except ValueError as exc:
                        unreadable = (t, exc)
                        break
                    self.series.append(t, flows)
                    self._next = t + 1
                    report.intervals.append(t)
                self.series = self.series.tail(self.window)
            if unreadable is not None:
                # _next stays on the bad batch; it is pulled again next tick
                t, exc = unreadable
                report.status = "error"
                report.message = f"unreadable trajectory batch at interval {t}: {exc}"
                logger.error("Tick %d: %s", report.tick, report.message)
                return report

            with _timed(report, "predict"):
                records = self._predict(now)

            with _timed(report, "push"):
                ttl = self.retention * self.grid.interval_seconds
                for rec in records:
                    key = PRED_KEY_FMT.format(t=rec.t)
                    _retry_once(lambda: self.kv.set(key, encode_forecast(rec, self.grid), ttl))
                    self.cache.put(rec)
                    report.pushed_keys.append(key)
                self.cache.evict(self.series.latest_index)
        except InsufficientHistoryError as exc:
            report.status = "skipped"
            report.message = str(exc)
            logger.warning("Tick %d skipped: %s", report.tick, exc)
            return report
        except KVError as exc:
            report.status = "error"
            report.message = str(exc)
            logger.error("Tick %d: cache failure: %s", report.tick, exc)
            return report

        self._publish(now)
        logger.info(
            "Tick %d: intervals %s, %s",
            report.tick, report.intervals,
            ", ".join(f"{s}={report.durations_ms[s]:.1f}ms" for s in STAGES),
        )
        return report

    def run(self, stop: threading.Event, max_ticks: int | None = None) -> None:
        """Tick every ``tick_seconds`` until *stop* is set."""
        done = 0
        while not stop.is_set() and (max_ticks is None or done < max_ticks):
            try:
                self.tick()
            except Exception as exc:
                logger.error("Tick failed: %s", exc, exc_info=True)
            done += 1
            stop.wait(self.config.tick_seconds)

    # ── Stages ───────────────────────────────────────────────────────────────

    def _pull(self) -> list[tuple[int, bytes]]:
        batches: list[tuple[int, bytes]] = []
        t = self._next
        while len(batches) < self.config.max_batches_per_tick:
            data = _retry_once(lambda: self.kv.get(TRAJ_KEY_FMT.format(t=t)))
            if data is None:
                break
            raw_ext = _retry_once(lambda: self.kv.get(EXT_KEY_FMT.format(t=t)))
            if raw_ext is not None:
                try:
                    known = read_externals_csv(raw_ext)
                except ValueError as exc:
                    logger.warning("Ignoring unreadable externals batch at interval %d: %s", t, exc)
                    known = []
                for rec in known:
                    self.externals[rec.interval] = rec
            batches.append((t, data))
            t += 1
        return batches

    def _predict(self, now: float) -> list[ForecastRecord]:
        k = self.config.horizon
        vectors = None
        if self.model.config.ext_dim > 0:
            if self.model.schema is None:
                raise ValueError("checkpoint has an external component but no external schema")
            n = self.series.latest_index + 1
            known = list(self.externals.values())
            policy = self.config.externals_policy
            if policy == "forecast-supplied" and not all(t in self.externals for t in range(n, n + k)):
                logger.info("Forecast externals incomplete for %d..%d; holding the last record.", n, n + k - 1)
                policy = "hold-last"
            _, vectors = future_externals(policy, self.grid, self.model.schema, n, k, known)
        return predict_multi(self.model, self.series, vectors, k, produced_at=now)

    def _publish(self, now: float) -> None:
        frozen = FlowSeries(
            grid=self.grid,
            segments=[Segment(start=s.start, tensors=s.tensors.copy()) for s in self.series.segments],
        )
        snap = Snapshot(
            series=frozen,
            latest_index=frozen.latest_index,
            forecasts=tuple(r for r in self.cache.records() if r.t > frozen.latest_index),
            tick_count=self.tick_count,
            updated_at=now,
            checkpoint_id=self.model.checkpoint_id,
            horizon=self.config.horizon,
        )
        for seg in snap.series.segments:
            seg.tensors.setflags(write=False)
        with self._lock:
            self._snapshot = snap


# ── Private helpers ────────────────────────────────────────────────────────────

@contextlib.contextmanager
def _timed(report: TickReport, stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        report.durations_ms[stage] = (time.perf_counter() - start) * 1000.0


def _retry_once(fn: Callable[[], T]) -> T:
    try:
        return fn()
    except KVError as exc:
        logger.warning("Cache call failed (%s); retrying once.", exc)
        return fn()
