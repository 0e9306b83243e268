"""
flowgrid.py — Turn timestamped GPS points into per-interval inflow/outflow grids.

A city bounding box is split into rows × cols cells (rows follow latitude, cols
follow longitude). For every time interval and every object, consecutive points
form a trajectory; a transition into a cell counts as inflow for that cell, a
transition out of it counts as outflow. Transitions are scoped to one interval:
a trajectory crossing an interval boundary is two trajectories.
"""
import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import TRAJECTORY_COLUMNS

logger = logging.getLogger(__name__)

# channel-major tensors: x[0] inflow, x[1] outflow
INFLOW = 0
OUTFLOW = 1

FlowTensor = np.ndarray


# ── Domain types ───────────────────────────────────────────────────────────────

class GeoPoint(NamedTuple):
    object_id: Hashable
    timestamp: float
    lon: float
    lat: float


class GridSpec(BaseModel):
    """Geographic bounding box, I×J partition and interval length."""

    model_config = ConfigDict(frozen=True)

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    interval_seconds: int = Field(gt=0)
    epoch_start: int = 0

    @model_validator(mode="after")
    def _check_bbox(self) -> "GridSpec":
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min ({self.lon_min}) must be < lon_max ({self.lon_max})")
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min ({self.lat_min}) must be < lat_max ({self.lat_max})")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.rows, self.cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def interval_of(self, timestamp: float) -> int:
        return int(math.floor((timestamp - self.epoch_start) / self.interval_seconds))

    def interval_start(self, t: int) -> int:
        return self.epoch_start + t * self.interval_seconds

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        """(lon, lat) of the centre of cell (i, j)."""
        lon = self.lon_min + (j + 0.5) * (self.lon_max - self.lon_min) / self.cols
        lat = self.lat_min + (i + 0.5) * (self.lat_max - self.lat_min) / self.rows
        return lon, lat


@dataclass(frozen=True)
class IngestSummary:
    n_records: int = 0
    n_valid: int = 0
    n_malformed: int = 0
    n_outside_coverage: int = 0


@dataclass
class Segment:
    start: int
    tensors: np.ndarray  # (n, 2, I, J)

    @property
    def end(self) -> int:
        return self.start + len(self.tensors)


@dataclass
class FlowSeries:
    """Time-indexed FlowTensors kept as sorted, disjoint, gap-free segments."""

    grid: GridSpec
    segments: list[Segment] = field(default_factory=list)
    summary: IngestSummary | None = None

    def __post_init__(self) -> None:
        prev_end = None
        for seg in self.segments:
            if seg.tensors.shape[1:] != self.grid.shape:
                raise ValueError(
                    f"segment at {seg.start} has shape {seg.tensors.shape[1:]}, "
                    f"grid expects {self.grid.shape}"
                )
            if prev_end is not None and seg.start < prev_end:
                raise ValueError(f"segments overlap or are unsorted at interval {seg.start}")
            prev_end = seg.end

    # ── Lookup ────────────────────────────────────────────────────────────────

    def _segment_index(self, t: int) -> int | None:
        starts = [s.start for s in self.segments]
        k = bisect.bisect_right(starts, t) - 1
        if k >= 0 and t < self.segments[k].end:
            return k
        return None

    def has(self, t: int) -> bool:
        return self._segment_index(t) is not None

    def get(self, t: int) -> FlowTensor | None:
        k = self._segment_index(t)
        if k is None:
            return None
        seg = self.segments[k]
        return seg.tensors[t - seg.start]

    def indices(self) -> list[int]:
        return [t for seg in self.segments for t in range(seg.start, seg.end)]

    def __len__(self) -> int:
        return sum(len(seg.tensors) for seg in self.segments)

    @property
    def latest_index(self) -> int | None:
        return self.segments[-1].end - 1 if self.segments else None

    def stacked(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0,) + self.grid.shape)
        return np.concatenate([seg.tensors for seg in self.segments], axis=0)

    # ── Mutation ──────────────────────────────────────────────────────────────

    def append(self, t: int, tensor: FlowTensor) -> None:
        """Append X_t; contiguous with the last segment or opening a new one."""
        tensor = np.asarray(tensor)
        if tensor.shape != self.grid.shape:
            raise ValueError(f"tensor shape {tensor.shape} != grid shape {self.grid.shape}")
        if self.segments and t < self.segments[-1].end:
            raise ValueError(
                f"interval {t} does not advance the series (latest is {self.latest_index})"
            )
        if self.segments and t == self.segments[-1].end:
            last = self.segments[-1]
            last.tensors = np.concatenate([last.tensors, tensor[None]], axis=0)
        else:
            self.segments.append(Segment(start=t, tensors=tensor[None].copy()))

    def tail(self, n: int) -> "FlowSeries":
        """Sub-series covering the last *n* interval indices (gaps included in the count)."""
        if not self.segments or n <= 0:
            return FlowSeries(grid=self.grid)
        lo = self.latest_index - n + 1
        segs = []
        for seg in self.segments:
            if seg.end <= lo:
                continue
            cut = max(0, lo - seg.start)
            segs.append(Segment(start=seg.start + cut, tensors=seg.tensors[cut:]))
        return FlowSeries(grid=self.grid, segments=segs)


# ── Public API ─────────────────────────────────────────────────────────────────

def locate(grid: GridSpec, point: GeoPoint) -> tuple[int, int] | None:
    """
    Cell (i, j) holding *point*, or None outside the bounding box.

    Half-open binning [min, max); points exactly on the max edge go to the
    last row / column.
    """
    lon, lat = point.lon, point.lat
    if not (grid.lon_min <= lon <= grid.lon_max and grid.lat_min <= lat <= grid.lat_max):
        return None
    j = int(math.floor((lon - grid.lon_min) / (grid.lon_max - grid.lon_min) * grid.cols))
    i = int(math.floor((lat - grid.lat_min) / (grid.lat_max - grid.lat_min) * grid.rows))
    return min(i, grid.rows - 1), min(j, grid.cols - 1)


def locate_many(grid: GridSpec, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Vectorised :func:`locate`; returns flat cell indices i*cols + j, -1 outside."""
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    inside = (
        (lons >= grid.lon_min) & (lons <= grid.lon_max)
        & (lats >= grid.lat_min) & (lats <= grid.lat_max)
    )
    j = np.floor((lons - grid.lon_min) / (grid.lon_max - grid.lon_min) * grid.cols)
    i = np.floor((lats - grid.lat_min) / (grid.lat_max - grid.lat_min) * grid.rows)
    j = np.minimum(np.where(inside, j, 0), grid.cols - 1).astype(np.int64)
    i = np.minimum(np.where(inside, i, 0), grid.rows - 1).astype(np.int64)
    return np.where(inside, i * grid.cols + j, -1)


def segment_by_interval(
    points: Iterable[GeoPoint],
    grid: GridSpec,
) -> dict[int, dict[Hashable, list[GeoPoint]]]:
    """
    Group points into per-interval, per-object trajectories.

    Returns {interval_index: {object_id: [points sorted by timestamp]}}; equal
    timestamps keep their input order.
    """
    grouped: dict[int, dict[Hashable, list[GeoPoint]]] = {}
    for p in points:
        t = grid.interval_of(p.timestamp)
        grouped.setdefault(t, {}).setdefault(p.object_id, []).append(p)
    for by_object in grouped.values():
        for traj in by_object.values():
            traj.sort(key=lambda p: p.timestamp)  # list.sort is stable
    return dict(sorted(grouped.items()))


def compute_flows(
    grid: GridSpec,
    trajectories: Mapping[Hashable, Sequence[GeoPoint]] | Iterable[Sequence[GeoPoint]],
) -> FlowTensor:
    """
    Inflow/outflow tensor for one interval's trajectories.

    Each trajectory must already be sorted by timestamp. Points outside the
    bounding box belong to no cell, so stepping into the city is inflow and
    stepping out of it is outflow.
    """
    flows = np.zeros((2, grid.n_cells), dtype=np.int64)
    trajs = trajectories.values() if isinstance(trajectories, Mapping) else trajectories
    for traj in trajs:
        if len(traj) < 2:
            continue
        cells = locate_many(
            grid,
            np.fromiter((p.lon for p in traj), dtype=np.float64, count=len(traj)),
            np.fromiter((p.lat for p in traj), dtype=np.float64, count=len(traj)),
        )
        _accumulate_transitions(flows, cells[:-1], cells[1:])
    return flows.reshape(grid.shape)


def build_series(
    grid: GridSpec,
    points: Iterable[GeoPoint] | pd.DataFrame,
    coverage: Sequence[tuple[int, int]] | None = None,
) -> FlowSeries:
    """
    Build a FlowSeries from a point stream.

    Parameters
    ----------
    grid     : grid specification
    points   : GeoPoints, or a DataFrame with object_id,timestamp,lon,lat columns
    coverage : optional half-open [start, end) interval spans known to be covered
               by the feed; each span becomes its own segment. Without it, the
               span from the first to the last observed interval is used.

    Malformed records are skipped and counted in ``series.summary``.
    """
    frame, n_records = _points_frame(points)
    valid = _valid_mask(frame)
    n_malformed = int((~valid).sum())
    frame = frame[valid].copy()

    frame["interval"] = np.floor(
        (frame["timestamp"].to_numpy() - grid.epoch_start) / grid.interval_seconds
    ).astype(np.int64)

    if coverage is None:
        spans = (
            [(int(frame["interval"].min()), int(frame["interval"].max()) + 1)]
            if len(frame) else []
        )
    else:
        spans = _normalise_spans(coverage)

    in_span = np.zeros(len(frame), dtype=bool)
    for start, end in spans:
        in_span |= (frame["interval"].to_numpy() >= start) & (frame["interval"].to_numpy() < end)
    n_outside = int((~in_span).sum())
    frame = frame[in_span]

    frame = frame.sort_values(["interval", "object_id", "timestamp", "_order"])
    intervals = frame["interval"].to_numpy()
    objects = frame["object_id"].to_numpy()
    cells = locate_many(grid, frame["lon"].to_numpy(), frame["lat"].to_numpy())

    segments = [
        Segment(start=s, tensors=np.zeros((e - s,) + grid.shape, dtype=np.int64))
        for s, e in spans
    ]
    if len(frame) > 1:
        same = (intervals[1:] == intervals[:-1]) & (objects[1:] == objects[:-1])
        prev_cells, cur_cells, ts = cells[:-1][same], cells[1:][same], intervals[1:][same]
        for seg in segments:
            m = (ts >= seg.start) & (ts < seg.end)
            flat = seg.tensors.reshape(len(seg.tensors), 2, grid.n_cells)
            _accumulate_transitions(flat, prev_cells[m], cur_cells[m], ts[m] - seg.start)

    summary = IngestSummary(
        n_records=n_records,
        n_valid=n_records - n_malformed,
        n_malformed=n_malformed,
        n_outside_coverage=n_outside,
    )
    if n_malformed or n_outside:
        logger.warning(
            "Ingest: %d records, %d malformed skipped, %d outside coverage.",
            n_records, n_malformed, n_outside,
        )
    logger.info(
        "Built flow series: %d segment(s), %d interval(s) from %d points.",
        len(segments), sum(len(s.tensors) for s in segments), len(frame),
    )
    return FlowSeries(grid=grid, segments=segments, summary=summary)


# ── Private helpers ────────────────────────────────────────────────────────────

def _accumulate_transitions(
    flows: np.ndarray,
    prev_cells: np.ndarray,
    cur_cells: np.ndarray,
    slots: np.ndarray | None = None,
) -> None:
    """Add one inflow/outflow per cell-changing step; flows is (2, n) or (T, 2, n)."""
    moved = prev_cells != cur_cells
    enter = moved & (cur_cells >= 0)
    leave = moved & (prev_cells >= 0)
    if slots is None:
        np.add.at(flows[INFLOW], cur_cells[enter], 1)
        np.add.at(flows[OUTFLOW], prev_cells[leave], 1)
    else:
        np.add.at(flows, (slots[enter], INFLOW, cur_cells[enter]), 1)
        np.add.at(flows, (slots[leave], OUTFLOW, prev_cells[leave]), 1)


def _points_frame(points) -> tuple[pd.DataFrame, int]:
    if isinstance(points, pd.DataFrame):
        frame = points.copy()
        missing = [c for c in TRAJECTORY_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"point frame lacks columns: {missing}")
        frame = frame[TRAJECTORY_COLUMNS]
    else:
        frame = pd.DataFrame(list(points), columns=TRAJECTORY_COLUMNS)
    n_records = len(frame)
    for col in ["timestamp", "lon", "lat"]:
        frame[col] = pd.to_numeric(frame[col], errors="coerce")
    ids = frame["object_id"]
    named = ids.notna() & (ids.astype(str) != "")
    frame["object_id"] = ids.astype(str).where(named)
    frame["_order"] = np.arange(n_records)
    return frame, n_records


def _valid_mask(frame: pd.DataFrame) -> np.ndarray:
    ts, lon, lat = frame["timestamp"], frame["lon"], frame["lat"]
    return (
        frame["object_id"].notna()
        & np.isfinite(ts) & np.isfinite(lon) & np.isfinite(lat)
        & lon.between(-180.0, 180.0) & lat.between(-90.0, 90.0)
    ).to_numpy()


def _normalise_spans(coverage: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    spans = sorted((int(s), int(e)) for s, e in coverage if int(e) > int(s))
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ValueError(f"coverage spans overlap: [{s0}, {e0}) and [{s1}, ...)")
    return spans
