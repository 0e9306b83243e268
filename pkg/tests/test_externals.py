from datetime import date

import numpy as np
import pytest

from externals import (
    N_CALENDAR,
    ExternalRecord,
    ExternalSchema,
    day_of_week,
    encode_external,
    encode_record,
    is_holiday,
    time_of_day_slot,
)
from flowgrid import GridSpec

SCHEMA = ExternalSchema(n_weather=4, temperature_range=(-5.0, 35.0), wind_range=(0.0, 20.0))


@pytest.fixture
def grid():
    return GridSpec(lon_min=0.0, lon_max=1.0, lat_min=0.0, lat_max=1.0,
                    rows=2, cols=2, interval_seconds=1800)


def _encode(**overrides):
    args = dict(day_of_week=2, is_weekend=False, is_holiday=False, weather_code=1,
                temperature=15.0, wind_speed=5.0, schema=SCHEMA)
    args.update(overrides)
    return encode_external(**args)


def test_layout_matches_hand_assembled_vector():
    want = np.zeros(SCHEMA.dim)
    want[5] = 1.0                 # Saturday
    want[7] = 1.0                 # weekend
    want[8] = 1.0                 # holiday
    want[N_CALENDAR + 2] = 1.0    # weather code 2
    want[N_CALENDAR + 4] = 0.5    # 15 degrees in [-5, 35]
    want[N_CALENDAR + 5] = 0.25   # 5 m/s in [0, 20]
    got = _encode(day_of_week=5, is_weekend=True, is_holiday=True, weather_code=2)
    assert SCHEMA.dim == 15
    np.testing.assert_array_equal(got, want)


def test_monday_is_the_first_slot():
    vec = _encode(day_of_week=0)
    assert vec[0] == 1.0
    assert vec[:7].sum() == 1.0


def test_scalars_are_clamped_to_unit_range():
    assert _encode(temperature=35.0)[N_CALENDAR + 4] == 1.0
    assert _encode(temperature=-5.0)[N_CALENDAR + 4] == 0.0
    assert _encode(temperature=80.0)[N_CALENDAR + 4] == 1.0
    assert _encode(wind_speed=-3.0)[N_CALENDAR + 5] == 0.0


def test_degenerate_range_encodes_zero():
    flat = ExternalSchema(n_weather=4, temperature_range=(10.0, 10.0))
    assert _encode(schema=flat, temperature=10.0)[N_CALENDAR + 4] == 0.0


@pytest.mark.parametrize("code", [3, 4, 17, -1])
def test_unknown_weather_goes_to_reserved_slot(code):
    weather = _encode(weather_code=code)[N_CALENDAR:N_CALENDAR + SCHEMA.n_weather]
    np.testing.assert_array_equal(weather, [0.0, 0.0, 0.0, 1.0])


def test_day_of_week_out_of_range_is_rejected():
    with pytest.raises(ValueError):
        _encode(day_of_week=7)


def test_calendar_follows_the_epoch(grid):
    assert day_of_week(grid, 0) == 3                      # 1970-01-01 was a Thursday
    assert day_of_week(grid, 4 * 48) == 0                 # 1970-01-05
    assert time_of_day_slot(grid, 4 * 48 + 13) == 13


def test_encode_record_derives_weekend_and_holiday(grid):
    schema = ExternalSchema(n_weather=4, holidays=["1970-01-05"])
    assert is_holiday(grid, 4 * 48 + 1, schema)
    monday = encode_record(grid, ExternalRecord(interval=4 * 48 + 1), schema)
    assert monday[0] == 1.0 and monday[7] == 0.0 and monday[8] == 1.0
    saturday = encode_record(grid, ExternalRecord(interval=2 * 48), schema)
    assert saturday[5] == 1.0 and saturday[7] == 1.0 and saturday[8] == 0.0
    assert schema.holidays == [date(1970, 1, 5)]


def test_fit_spans_the_training_records():
    records = [ExternalRecord(interval=t, temperature=float(t), wind_speed=2.0 * t) for t in range(1, 5)]
    schema = ExternalSchema.fit(records, n_weather=3)
    assert schema.temperature_range == (1.0, 4.0)
    assert schema.wind_range == (2.0, 8.0)
    assert schema.dim == N_CALENDAR + 3 + 2
