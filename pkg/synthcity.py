"""
synthcity.py — Deterministic synthetic commuter city.

Agents live in home cells and work in office cells. Each simulated day an
agent decides (with a probability that grows week over week and drops on
weekends and holidays) whether to commute; commuters walk one cell per ping
towards the office in the morning and back home in the evening. Weather events
suppress movement. Every random draw comes from SplitMix64 so a config always
yields the same bytes.

Flows are counted while simulating, independently of flowgrid;
``verify_consistency`` checks both agree.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import SECONDS_PER_DAY
from data_manager import read_trajectory_csv, trajectory_csv_bytes
from externals import ExternalRecord, day_of_week
from flowgrid import INFLOW, OUTFLOW, FlowSeries, GridSpec, Segment, build_series

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
WEATHER_CLEAR = 0
WEATHER_RAIN = 2


# ── PRNG ───────────────────────────────────────────────────────────────────────

class SplitMix64:
    """64-bit SplitMix generator; doubles take the top 53 bits."""

    GAMMA = 0x9E3779B97F4A7C15
    MUL1 = 0xBF58476D1CE4E5B9
    MUL2 = 0x94D049BB133111EB

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * self.MUL1) & MASK64
        z = ((z ^ (z >> 27)) * self.MUL2) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n > 0")
        return min(int(self.random() * n), n - 1)


# ── Configuration ──────────────────────────────────────────────────────────────

class WeatherEvent(BaseModel):
    """Intervals [start, end) under bad weather; movement probability is scaled by *suppression*."""

    model_config = ConfigDict(frozen=True)

    start: int = Field(ge=0)
    end: int = Field(ge=0)
    suppression: float = Field(ge=0.0, le=1.0)
    weather_code: int = WEATHER_RAIN


class SynthConfig(BaseModel):
    grid: GridSpec
    n_agents: int = Field(default=200, ge=0)
    n_intervals: int = Field(default=48 * 28, ge=1)
    period_intervals: int = Field(default=48, ge=2)
    trend_cycle_days: int = Field(default=7, ge=1)
    home_cells: list[tuple[int, int]] | None = None
    office_cells: list[tuple[int, int]] | None = None
    weather_events: list[WeatherEvent] = Field(default_factory=list)
    noise: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0
    pings_per_interval: int = Field(default=3, ge=2)
    base_commute_prob: float = Field(default=0.6, ge=0.0, le=1.0)
    weekend_factor: float = Field(default=0.3, ge=0.0, le=1.0)
    trend_growth: float = Field(default=0.05, ge=-1.0)
    holidays: list[int] = Field(default_factory=list)
    base_temperature: float = 15.0
    base_wind: float = 5.0

    @model_validator(mode="after")
    def _check_cells(self) -> "SynthConfig":
        for cells in (self.home_cells, self.office_cells):
            for i, j in cells or []:
                if not (0 <= i < self.grid.rows and 0 <= j < self.grid.cols):
                    raise ValueError(f"cell ({i}, {j}) lies outside the {self.grid.rows}x{self.grid.cols} grid")
        return self


@dataclass
class SynthResult:
    trajectories: pd.DataFrame
    externals: list[ExternalRecord]
    truth: FlowSeries

    @property
    def csv_bytes(self) -> bytes:
        return trajectory_csv_bytes(self.trajectories)


@dataclass
class ConsistencyReport:
    n_intervals: int
    mismatched: list[int] = field(default_factory=list)

    @property
    def equal(self) -> bool:
        return not self.mismatched


# ── Generation ─────────────────────────────────────────────────────────────────

def default_office_cells(grid: GridSpec) -> list[tuple[int, int]]:
    """Central 2×2 block (a single cell on 1-wide grids)."""
    rows = sorted({max(grid.rows // 2 - 1, 0), grid.rows // 2})
    cols = sorted({max(grid.cols // 2 - 1, 0), grid.cols // 2})
    return [(i, j) for i in rows for j in cols]


def default_home_cells(grid: GridSpec, offices: list[tuple[int, int]]) -> list[tuple[int, int]]:
    taken = set(offices)
    cells = [(i, j) for i in range(grid.rows) for j in range(grid.cols) if (i, j) not in taken]
    return cells or list(taken)


def weekday_of(config: SynthConfig, day: int) -> int:
    """Position of simulated *day* in its weekly cycle, weekend last.

    When simulated days are calendar days and the cycle is a week, this is the
    calendar weekday (Monday = 0) of the day's first interval, so the damped
    days line up with the weekend flag of the encoded externals.
    """
    p = config.period_intervals
    if config.trend_cycle_days == 7 and p * config.grid.interval_seconds == SECONDS_PER_DAY:
        return day_of_week(config.grid, day * p)
    return day % config.trend_cycle_days


def commute_probability(config: SynthConfig, day: int) -> float:
    week = day // config.trend_cycle_days
    prob = config.base_commute_prob * (1.0 + config.trend_growth) ** week
    if weekday_of(config, day) >= config.trend_cycle_days - 2 or day in config.holidays:
        prob *= config.weekend_factor
    return float(min(max(prob, 0.0), 1.0))


def generate(config: SynthConfig) -> SynthResult:
    """
    Simulate the city.

    Returns the trajectory table (object_id, timestamp, lon, lat), one
    ExternalRecord per interval, and the flows counted during simulation.
    """
    grid = config.grid
    rng = SplitMix64(config.seed)
    offices = config.office_cells or default_office_cells(grid)
    homes = config.home_cells or default_home_cells(grid, offices)
    p = config.period_intervals

    agents = []
    for a in range(config.n_agents):
        home = homes[rng.randrange(len(homes))]
        office = offices[rng.randrange(len(offices))]
        leave = round(p * 0.25) + rng.randrange(max(p // 8, 1))
        back = round(p * 0.70) + rng.randrange(max(p // 8, 1))
        agents.append({"id": f"a{a:05d}", "home": home, "office": office,
                       "leave": leave, "back": back, "pos": home, "commuting": False})

    suppression = _suppression_by_interval(config)
    cell_w = (grid.lon_max - grid.lon_min) / grid.cols
    cell_h = (grid.lat_max - grid.lat_min) / grid.rows
    steps = config.pings_per_interval
    flows = np.zeros((config.n_intervals,) + grid.shape, dtype=np.int64)
    ids, stamps, lons, lats = [], [], [], []

    for t in range(config.n_intervals):
        tod, day = t % p, t // p
        if tod == 0:
            prob = commute_probability(config, day)
            for ag in agents:
                ag["commuting"] = rng.random() < prob
        move_prob = suppression.get(t, 1.0)
        start = grid.interval_start(t)
        for ag in agents:
            at_work = ag["commuting"] and ag["leave"] <= tod < ag["back"]
            target = ag["office"] if at_work else ag["home"]
            for s in range(steps):
                prev = ag["pos"]
                nxt = prev
                if config.noise > 0 and rng.random() < config.noise:
                    nxt = _random_neighbour(grid, prev, rng)
                elif prev != target and rng.random() < move_prob:
                    nxt = _step_towards(prev, target)
                ag["pos"] = nxt
                if s > 0 and nxt != prev:
                    flows[t, OUTFLOW][prev] += 1
                    flows[t, INFLOW][nxt] += 1
                lon, lat = grid.cell_center(*nxt)
                ids.append(ag["id"])
                stamps.append(start + (2 * s + 1) * grid.interval_seconds // (2 * steps))
                lons.append(lon + (rng.random() - 0.5) * 0.5 * cell_w)
                lats.append(lat + (rng.random() - 0.5) * 0.5 * cell_h)

    frame = pd.DataFrame({"object_id": ids, "timestamp": stamps, "lon": lons, "lat": lats})
    truth = FlowSeries(grid=grid, segments=[Segment(start=0, tensors=flows)])
    externals = _externals(config, suppression)
    logger.info("Synthesised %d agents × %d intervals (%d points).",
                config.n_agents, config.n_intervals, len(frame))
    return SynthResult(trajectories=frame, externals=externals, truth=truth)


def verify_consistency(config: SynthConfig, csv_bytes: bytes | None = None) -> ConsistencyReport:
    """
    Recount flows from the emitted (or supplied) trajectory CSV via flowgrid and
    compare with the simulator's own counts, interval by interval.
    """
    result = generate(config)
    data = result.csv_bytes if csv_bytes is None else csv_bytes
    series = build_series(config.grid, read_trajectory_csv(data), coverage=[(0, config.n_intervals)])
    mismatched = []
    for t in range(config.n_intervals):
        recount = series.get(t)
        if recount is None or not np.array_equal(recount, result.truth.get(t)):
            mismatched.append(t)
    if mismatched:
        logger.warning("Flow mismatch in %d interval(s), first at %d.", len(mismatched), mismatched[0])
    return ConsistencyReport(n_intervals=config.n_intervals, mismatched=mismatched)


# ── Private helpers ────────────────────────────────────────────────────────────

def _suppression_by_interval(config: SynthConfig) -> dict[int, float]:
    out: dict[int, float] = {}
    for ev in config.weather_events:
        for t in range(ev.start, min(ev.end, config.n_intervals)):
            out[t] = min(out.get(t, 1.0), ev.suppression)
    return out


def _externals(config: SynthConfig, suppression: dict[int, float]) -> list[ExternalRecord]:
    codes: dict[int, int] = {}
    for ev in config.weather_events:
        for t in range(ev.start, min(ev.end, config.n_intervals)):
            codes[t] = ev.weather_code
    p = config.period_intervals
    records = []
    for t in range(config.n_intervals):
        phase = 2.0 * np.pi * (t % p) / p
        factor = suppression.get(t, 1.0)
        records.append(ExternalRecord(
            interval=t,
            is_holiday=(t // p) in config.holidays,
            weather_code=codes.get(t, WEATHER_CLEAR),
            temperature=round(config.base_temperature - 6.0 * np.cos(phase) - 4.0 * (1.0 - factor), 3),
            wind_speed=round(config.base_wind + 15.0 * (1.0 - factor), 3),
        ))
    return records


def _step_towards(cell: tuple[int, int], target: tuple[int, int]) -> tuple[int, int]:
    i, j = cell
    ti, tj = target
    if i != ti:
        return (i + (1 if ti > i else -1), j)
    return (i, j + (1 if tj > j else -1))


def _random_neighbour(grid: GridSpec, cell: tuple[int, int], rng: SplitMix64) -> tuple[int, int]:
    i, j = cell
    options = [(i + di, j + dj) for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))
               if 0 <= i + di < grid.rows and 0 <= j + dj < grid.cols]
    return options[rng.randrange(len(options))] if options else cell
