import struct

import numpy as np
import pandas as pd
import pytest

from data_manager import (
    decode_flw1,
    encode_flw1,
    encode_series,
    externals_csv_bytes,
    load_grid,
    load_series,
    read_externals_csv,
    read_trajectory_csv,
    save_grid,
    save_series,
    trajectory_csv_bytes,
)
from externals import ExternalRecord
from flowgrid import FlowSeries, GridSpec, Segment, build_series


@pytest.fixture
def grid():
    return GridSpec(lon_min=116.0, lon_max=116.4, lat_min=39.8, lat_max=40.0,
                    rows=3, cols=2, interval_seconds=1800, epoch_start=1_000)


def test_flw1_header_layout(grid):
    x = np.arange(12, dtype=np.int64).reshape(1, 2, 3, 2)
    data = encode_flw1(grid, 7, x)
    magic, rows, cols, epoch, dt, n, first = struct.unpack_from("<4sIIqIIQ", data)
    assert (magic, rows, cols, epoch, dt, n, first) == (b"FLW1", 3, 2, 1_000, 1800, 1, 7)
    assert len(data) == 36 + 4 * 12
    body = np.frombuffer(data[36:], dtype="<u4")
    np.testing.assert_array_equal(body, np.arange(12))


def test_flw1_multi_segment_file_round_trip(grid, tmp_path):
    rng = np.random.default_rng(0)
    series = FlowSeries(grid=grid, segments=[
        Segment(0, rng.integers(0, 50, size=(4,) + grid.shape)),
        Segment(10, rng.integers(0, 50, size=(2,) + grid.shape)),
    ])
    path = save_series(series, str(tmp_path / "flows.flw"))
    back = load_series(path, grid)
    assert back.indices() == series.indices()
    np.testing.assert_array_equal(back.stacked(), series.stacked())
    with open(path, "rb") as fh:
        assert fh.read() == encode_series(back)


def test_flw1_without_grid_uses_unit_box(grid):
    data = encode_flw1(grid, 0, np.zeros((1,) + grid.shape, dtype=np.int64))
    series = decode_flw1(data)
    assert (series.grid.rows, series.grid.cols) == (3, 2)
    assert series.grid.epoch_start == 1_000


def test_flw1_rejects_bad_magic_and_negative_counts(grid):
    data = bytearray(encode_flw1(grid, 0, np.zeros(grid.shape, dtype=np.int64)))
    data[:4] = b"XXXX"
    with pytest.raises(ValueError):
        decode_flw1(bytes(data), grid)
    with pytest.raises(ValueError):
        encode_flw1(grid, 0, -np.ones(grid.shape, dtype=np.int64))


def test_flw1_rejects_mismatched_grid(grid):
    other = grid.model_copy(update={"interval_seconds": 900})
    data = encode_flw1(grid, 0, np.zeros(grid.shape, dtype=np.int64))
    with pytest.raises(ValueError):
        decode_flw1(data, other)


def test_grid_json_round_trip(grid, tmp_path):
    path = str(tmp_path / "grid.json")
    save_grid(grid, path)
    assert load_grid(path) == grid


def test_load_grid_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_grid(str(tmp_path / "nope.json"))


def test_trajectory_csv_bad_field_count_counts_as_malformed(grid):
    raw = (
        "object_id,timestamp,lon,lat\n"
        "a,1001,116.05,39.85\n"
        "a,1002,116.25,39.85\n"
        "b,1003\n"
        "c,1004,116.05,39.85,extra\n"
    ).encode("utf-8")
    frame = read_trajectory_csv(raw)
    assert len(frame) == 4
    series = build_series(grid, frame)
    assert series.summary.n_malformed == 2
    assert series.get(0).sum() == 2


def test_trajectory_csv_undecodable_row_counts_as_malformed(grid):
    raw = (
        b"object_id,timestamp,lon,lat\n"
        b"a,1001,116.05,39.85\n"
        b"\xff\xfe,1002,116.05,39.85\n"
        b"a,1003,116.25,39.85\n"
    )
    frame = read_trajectory_csv(raw)
    assert len(frame) == 3
    series = build_series(grid, frame)
    assert series.summary.n_malformed == 1
    assert series.summary.n_valid == 2
    assert series.get(0).sum() == 2


def test_trajectory_csv_blank_object_id_counts_as_malformed(grid):
    raw = b"object_id,timestamp,lon,lat\n,1001,116.05,39.85\na,1002,116.25,39.85\n"
    series = build_series(grid, read_trajectory_csv(raw))
    assert series.summary.n_malformed == 1
    assert series.get(0).sum() == 0


def test_trajectory_csv_bytes_are_canonical():
    frame = pd.DataFrame({"object_id": ["a"], "timestamp": [12.0], "lon": [1.5], "lat": [2.25]})
    assert trajectory_csv_bytes(frame) == b"object_id,timestamp,lon,lat\na,12,1.5,2.25\n"


def test_externals_csv_round_trip_skips_bad_rows():
    records = [
        ExternalRecord(interval=3, is_holiday=True, weather_code=2, temperature=11.5, wind_speed=3.0),
        ExternalRecord(interval=4, is_holiday=False, weather_code=0, temperature=12.0, wind_speed=0.5),
    ]
    data = externals_csv_bytes(records)
    assert read_externals_csv(data) == records
    broken = data + b"5,0,rain,10.0,1.0\n"
    assert read_externals_csv(broken) == records
