"""
data_manager.py — Read and write the on-disk formats: grid JSON, trajectory CSV,
externals CSV and FLW1 flow files.

FLW1 record layout (little-endian):
    b"FLW1" | u32 I | u32 J | i64 epoch_start | u32 Δt_seconds | u32 n_tensors |
    u64 first_interval_index | n_tensors × 2·I·J u32 counts (channel-major, row-major)
A file holds one record per contiguous segment, back to back.
"""
import io
import json
import logging
import os
import struct
from typing import IO, Iterable

import numpy as np
import pandas as pd

from config import EXTERNAL_COLUMNS, FLW1_MAGIC, TRAJECTORY_COLUMNS
from externals import ExternalRecord
from flowgrid import FlowSeries, GridSpec, Segment

logger = logging.getLogger(__name__)

_FLW1_HEADER = struct.Struct("<4sIIqIIQ")
_U32_MAX = 2**32 - 1
_REPLACEMENT_CHAR = "\ufffd"


# ── Grid ───────────────────────────────────────────────────────────────────────

def load_grid(path: str) -> GridSpec:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No grid spec at {path}.")
    with open(path, "r", encoding="utf-8") as fh:
        return GridSpec.model_validate(json.load(fh))


def save_grid(grid: GridSpec, path: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(grid.model_dump_json(indent=2))


# ── Trajectory CSV ─────────────────────────────────────────────────────────────

def read_trajectory_csv(source: str | bytes | IO) -> pd.DataFrame:
    """
    Read ``object_id,timestamp,lon,lat`` rows.

    Rows with the wrong field count, or with bytes that are not UTF-8, are kept
    with a blank object id so that :func:`flowgrid.build_series` counts them as
    malformed instead of losing them.
    """
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    bad_lines = 0

    def _blank(_fields: list[str]) -> list[str]:
        nonlocal bad_lines
        bad_lines += 1
        return [""] * len(TRAJECTORY_COLUMNS)

    df = pd.read_csv(
        source,
        dtype={"object_id": str},
        encoding="utf-8",
        encoding_errors="replace",
        engine="python",
        on_bad_lines=_blank,
    )
    missing = [c for c in TRAJECTORY_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"trajectory CSV lacks columns: {missing}")
    df = df[TRAJECTORY_COLUMNS].copy()
    if bad_lines:
        logger.warning("Trajectory CSV: %d row(s) with a wrong field count.", bad_lines)
    undecodable = np.zeros(len(df), dtype=bool)
    for col in TRAJECTORY_COLUMNS:
        undecodable |= df[col].astype(str).str.contains(_REPLACEMENT_CHAR, regex=False).to_numpy()
    if undecodable.any():
        df.loc[undecodable, "object_id"] = None
        logger.warning("Trajectory CSV: %d row(s) that are not valid UTF-8.", int(undecodable.sum()))
    return df


def trajectory_csv_bytes(frame: pd.DataFrame) -> bytes:
    """Canonical CSV bytes (header + integer timestamps)."""
    out = frame[TRAJECTORY_COLUMNS].copy()
    out["timestamp"] = out["timestamp"].astype(np.int64)
    return out.to_csv(index=False, lineterminator="\n").encode("utf-8")


def write_trajectory_csv(frame: pd.DataFrame, path: str) -> str:
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(trajectory_csv_bytes(frame))
    logger.info("Saved %d trajectory points to %s", len(frame), path)
    return path


# ── Externals CSV ──────────────────────────────────────────────────────────────

def externals_csv_bytes(records: Iterable[ExternalRecord]) -> bytes:
    rows = [r.model_dump() for r in records]
    df = pd.DataFrame(rows, columns=EXTERNAL_COLUMNS)
    df["is_holiday"] = df["is_holiday"].astype(int)
    return df.to_csv(index=False, lineterminator="\n").encode("utf-8")


def write_externals_csv(records: Iterable[ExternalRecord], path: str) -> str:
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(externals_csv_bytes(records))
    return path


def read_externals_csv(source: str | bytes | IO) -> list[ExternalRecord]:
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    df = pd.read_csv(source, encoding="utf-8")
    missing = [c for c in EXTERNAL_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"externals CSV lacks columns: {missing}")
    for col in EXTERNAL_COLUMNS:
        df[col] = pd.to_numeric(df[col], errors="coerce")
    bad = df[EXTERNAL_COLUMNS].isna().any(axis=1)
    if bad.any():
        logger.warning("Externals CSV: skipped %d malformed row(s).", int(bad.sum()))
    df = df[~bad]
    return [
        ExternalRecord(
            interval=int(row.interval),
            is_holiday=bool(int(row.is_holiday)),
            weather_code=int(row.weather_code),
            temperature=float(row.temperature),
            wind_speed=float(row.wind_speed),
        )
        for row in df.itertuples(index=False)
    ]


# ── FLW1 ───────────────────────────────────────────────────────────────────────

def encode_flw1(grid: GridSpec, first_interval: int, tensors: np.ndarray) -> bytes:
    """Encode contiguous tensors (n, 2, I, J) starting at *first_interval*."""
    arr = np.asarray(tensors)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != grid.shape:
        raise ValueError(f"tensor shape {arr.shape[1:]} does not match grid {grid.shape}")
    if first_interval < 0:
        raise ValueError(f"FLW1 cannot store negative interval index {first_interval}")
    if not np.issubdtype(arr.dtype, np.integer) and not np.all(arr == np.rint(arr)):
        raise ValueError("FLW1 stores integer counts; round before encoding")
    if arr.size and (arr.min() < 0 or arr.max() > _U32_MAX):
        raise ValueError("FLW1 counts must lie in [0, 2^32)")
    header = _FLW1_HEADER.pack(
        FLW1_MAGIC, grid.rows, grid.cols, grid.epoch_start,
        grid.interval_seconds, len(arr), first_interval,
    )
    return header + arr.astype("<u4").tobytes(order="C")


def encode_series(series: FlowSeries) -> bytes:
    return b"".join(encode_flw1(series.grid, s.start, s.tensors) for s in series.segments)


def decode_flw1(data: bytes, grid: GridSpec | None = None) -> FlowSeries:
    """
    Decode one or more FLW1 records into a FlowSeries.

    FLW1 carries no bounding box; pass *grid* to keep the geographic extent,
    otherwise a unit box sized to the stored I×J is used.
    """
    offset = 0
    segments: list[Segment] = []
    header_grid = None
    while offset < len(data):
        if len(data) - offset < _FLW1_HEADER.size:
            raise ValueError(f"truncated FLW1 header at byte {offset}")
        magic, rows, cols, epoch, dt, n, first = _FLW1_HEADER.unpack_from(data, offset)
        if magic != FLW1_MAGIC:
            raise ValueError(f"bad FLW1 magic {magic!r} at byte {offset}")
        offset += _FLW1_HEADER.size
        count = n * 2 * rows * cols
        body = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
        offset += 4 * count
        header_grid = header_grid or (rows, cols, epoch, dt)
        if (rows, cols, epoch, dt) != header_grid:
            raise ValueError("FLW1 records in one file must share grid and interval metadata")
        segments.append(Segment(start=int(first),
                                tensors=body.astype(np.int64).reshape(n, 2, rows, cols)))

    if grid is None:
        if header_grid is None:
            raise ValueError("empty FLW1 data and no grid given")
        rows, cols, epoch, dt = header_grid
        grid = GridSpec(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0,
                        rows=rows, cols=cols, interval_seconds=dt, epoch_start=epoch)
    elif header_grid is not None and header_grid != (
        grid.rows, grid.cols, grid.epoch_start, grid.interval_seconds
    ):
        raise ValueError(f"FLW1 header {header_grid} does not match the given grid")
    return FlowSeries(grid=grid, segments=segments)


def save_series(series: FlowSeries, path: str) -> str:
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(encode_series(series))
    logger.info("Saved %d interval(s) in %d segment(s) to %s",
                len(series), len(series.segments), path)
    return path


def load_series(path: str, grid: GridSpec | None = None) -> FlowSeries:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No flow file at {path}.")
    with open(path, "rb") as fh:
        series = decode_flw1(fh.read(), grid)
    logger.info("%s: loaded %d interval(s).", path, len(series))
    return series


# ── Private helpers ────────────────────────────────────────────────────────────

def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
