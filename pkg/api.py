"""
api.py — Read-only HTTP JSON API over the pipeline's latest Snapshot.

Routes (all under /v1):
  GET /health                    status, tick count, latest interval
  GET /flows/latest              latest observed inflow/outflow grids
  GET /forecast?steps=k          next k forecasts (k ≤ configured horizon)
  GET /region/{i}/{j}?window=w   one cell's last w observed values plus its forecasts
Handlers never mutate state; they read whatever Snapshot the pipeline last published.
"""
import logging
import threading
from typing import Callable

import uvicorn
from fastapi import FastAPI, HTTPException, Query

from config import API_VERSION
from flowgrid import INFLOW, OUTFLOW
from forecaster import export_counts, retention_intervals
from pipeline import Pipeline, PipelineConfig, Snapshot

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 12
DEFAULT_MAX_WINDOW = retention_intervals()


def create_app(
    snapshot_source: Callable[[], Snapshot | None],
    horizon: int,
    rows: int,
    cols: int,
    max_window: int = DEFAULT_MAX_WINDOW,
) -> FastAPI:
    """App over *snapshot_source*; region windows are capped at *max_window*, the retained history length."""
    app = FastAPI(title="City crowd-flow forecasting API", version=API_VERSION)
    prefix = f"/{API_VERSION}"

    def _require_snapshot() -> Snapshot:
        snap = snapshot_source()
        if snap is None:
            raise HTTPException(status_code=503, detail="no successful pipeline tick yet")
        return snap

    @app.get(f"{prefix}/health")
    def health() -> dict:
        snap = snapshot_source()
        return {
            "version": API_VERSION,
            "status": "ok" if snap is not None else "starting",
            "ticks": snap.tick_count if snap else 0,
            "latest_interval": snap.latest_index if snap else None,
            "checkpoint_id": snap.checkpoint_id if snap else None,
        }

    @app.get(f"{prefix}/flows/latest")
    def flows_latest() -> dict:
        snap = _require_snapshot()
        x = snap.series.get(snap.latest_index)
        return {
            "version": API_VERSION,
            "t": snap.latest_index,
            "inflow": x[INFLOW].tolist(),
            "outflow": x[OUTFLOW].tolist(),
        }

    @app.get(f"{prefix}/forecast")
    def forecast(steps: int = Query(default=1)) -> dict:
        if not 1 <= steps <= horizon:
            raise HTTPException(status_code=400, detail=f"steps must be in [1, {horizon}], got {steps}")
        snap = _require_snapshot()
        return {
            "version": API_VERSION,
            "records": [_record_json(r) for r in snap.forecasts[:steps]],
        }

    @app.get(f"{prefix}/region/{{i}}/{{j}}")
    def region(i: int, j: int, window: int | None = Query(default=None)) -> dict:
        if window is None:
            window = min(DEFAULT_WINDOW, max_window)
        if not (0 <= i < rows and 0 <= j < cols):
            raise HTTPException(status_code=400, detail=f"cell ({i}, {j}) outside {rows}x{cols} grid")
        if not 1 <= window <= max_window:
            raise HTTPException(status_code=400, detail=f"window must be in [1, {max_window}], got {window}")
        snap = _require_snapshot()
        intervals = list(range(snap.latest_index - window + 1, snap.latest_index + 1))
        inflow, outflow = [], []
        for t in intervals:
            x = snap.series.get(t)
            inflow.append(None if x is None else int(x[INFLOW, i, j]))
            outflow.append(None if x is None else int(x[OUTFLOW, i, j]))
        return {
            "version": API_VERSION,
            "i": i,
            "j": j,
            "intervals": intervals,
            "inflow": inflow,
            "outflow": outflow,
            "forecast": [_cell_forecast(r, i, j) for r in snap.forecasts],
        }

    return app


def serve(config: PipelineConfig, host: str = "127.0.0.1", port: int = 8000) -> None:
    """Run the pipeline in a background thread and the API in the foreground."""
    pipeline = Pipeline.from_config(config)
    stop = threading.Event()
    worker = threading.Thread(target=pipeline.run, args=(stop,), name="pipeline", daemon=True)
    worker.start()
    app = create_app(
        lambda: pipeline.snapshot, config.horizon, pipeline.grid.rows, pipeline.grid.cols,
        max_window=pipeline.window,
    )
    logger.info("Serving API on http://%s:%d/%s", host, port, API_VERSION)
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    finally:
        stop.set()
        worker.join(timeout=config.tick_seconds + 5.0)


def _record_json(record) -> dict:
    counts = export_counts(record.tensor)
    return {
        "t": record.t,
        "step": record.step,
        "produced_at": record.produced_at,
        "checkpoint_id": record.checkpoint_id,
        "inflow": counts[INFLOW].tolist(),
        "outflow": counts[OUTFLOW].tolist(),
    }


def _cell_forecast(record, i: int, j: int) -> dict:
    counts = export_counts(record.tensor)
    return {"t": record.t, "inflow": int(counts[INFLOW, i, j]), "outflow": int(counts[OUTFLOW, i, j])}
