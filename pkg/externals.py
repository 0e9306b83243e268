"""
externals.py — External factors (calendar, holidays, weather) and their encoding.

Encoded vector layout:
    [ day-of-week one-hot (7) | weekend | holiday | weather one-hot (n_weather) |
      temperature in [0,1] | wind speed in [0,1] ]
The last weather slot is reserved for codes the schema does not know.
"""
import logging
from datetime import date, datetime
from typing import Iterable

import numpy as np
from dateutil import parser as date_parser
from dateutil import tz
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import (
    DEFAULT_TEMPERATURE_RANGE,
    DEFAULT_WEATHER_CATEGORIES,
    DEFAULT_WIND_RANGE,
)
from flowgrid import GridSpec

logger = logging.getLogger(__name__)

N_CALENDAR = 9   # 7 dow + weekend + holiday
N_SCALARS = 2    # temperature + wind


class ExternalRecord(BaseModel):
    """Raw external observation for one interval."""

    model_config = ConfigDict(frozen=True)

    interval: int
    is_holiday: bool = False
    weather_code: int = 0
    temperature: float = 0.0
    wind_speed: float = 0.0


class ExternalSchema(BaseModel):
    n_weather: int = Field(default=DEFAULT_WEATHER_CATEGORIES, ge=2)
    temperature_range: tuple[float, float] = DEFAULT_TEMPERATURE_RANGE
    wind_range: tuple[float, float] = DEFAULT_WIND_RANGE
    holidays: list[date] = Field(default_factory=list)

    @field_validator("holidays", mode="before")
    @classmethod
    def _parse_holidays(cls, value):
        return [date_parser.isoparse(v).date() if isinstance(v, str) else v for v in value or []]

    @property
    def dim(self) -> int:
        return N_CALENDAR + self.n_weather + N_SCALARS

    @property
    def other_slot(self) -> int:
        return self.n_weather - 1

    @classmethod
    def fit(cls, records: Iterable[ExternalRecord], n_weather: int = DEFAULT_WEATHER_CATEGORIES,
            holidays: Iterable[date] = ()) -> "ExternalSchema":
        """Schema whose temperature / wind ranges span the given (training) records."""
        records = list(records)
        if not records:
            return cls(n_weather=n_weather, holidays=list(holidays))
        temps = [r.temperature for r in records]
        winds = [r.wind_speed for r in records]
        return cls(
            n_weather=n_weather,
            temperature_range=(min(temps), max(temps)),
            wind_range=(min(winds), max(winds)),
            holidays=list(holidays),
        )


# ── Calendar ───────────────────────────────────────────────────────────────────

def interval_datetime(grid: GridSpec, t: int) -> datetime:
    return datetime.fromtimestamp(grid.interval_start(t), tz=tz.UTC)


def day_of_week(grid: GridSpec, t: int) -> int:
    """Monday = 0 … Sunday = 6."""
    return interval_datetime(grid, t).weekday()


def time_of_day_slot(grid: GridSpec, t: int) -> int:
    dt = interval_datetime(grid, t)
    seconds = dt.hour * 3600 + dt.minute * 60 + dt.second
    return seconds // grid.interval_seconds


def is_holiday(grid: GridSpec, t: int, schema: ExternalSchema) -> bool:
    return interval_datetime(grid, t).date() in set(schema.holidays)


# ── Encoding ───────────────────────────────────────────────────────────────────

def encode_external(
    day_of_week: int,
    is_weekend: bool,
    is_holiday: bool,
    weather_code: int,
    temperature: float,
    wind_speed: float,
    schema: ExternalSchema,
) -> np.ndarray:
    """Encode one interval's external factors into a flat float vector."""
    if not 0 <= day_of_week <= 6:
        raise ValueError(f"day_of_week must be in [0, 6], got {day_of_week}")
    vec = np.zeros(schema.dim, dtype=np.float64)
    vec[day_of_week] = 1.0
    vec[7] = 1.0 if is_weekend else 0.0
    vec[8] = 1.0 if is_holiday else 0.0
    if 0 <= weather_code < schema.other_slot:
        slot = weather_code
    else:
        if weather_code != schema.other_slot:
            logger.debug("Unknown weather code %s mapped to the reserved slot.", weather_code)
        slot = schema.other_slot
    vec[N_CALENDAR + slot] = 1.0
    vec[N_CALENDAR + schema.n_weather] = _scale01(temperature, schema.temperature_range)
    vec[N_CALENDAR + schema.n_weather + 1] = _scale01(wind_speed, schema.wind_range)
    return vec


def encode_record(grid: GridSpec, record: ExternalRecord, schema: ExternalSchema) -> np.ndarray:
    dow = day_of_week(grid, record.interval)
    return encode_external(
        day_of_week=dow,
        is_weekend=dow >= 5,
        is_holiday=record.is_holiday or is_holiday(grid, record.interval, schema),
        weather_code=record.weather_code,
        temperature=record.temperature,
        wind_speed=record.wind_speed,
        schema=schema,
    )


def _scale01(value: float, value_range: tuple[float, float]) -> float:
    lo, hi = value_range
    if hi <= lo:
        return 0.0
    return float(min(1.0, max(0.0, (value - lo) / (hi - lo))))
