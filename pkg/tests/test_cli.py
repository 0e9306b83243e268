import json
import logging
import os

import pytest

import main
from checkpoint import load_checkpoint
from data_manager import load_grid, load_series
from report_generator import read_history_csv

SYNTH = {
    "grid": {"lon_min": 0.0, "lon_max": 1.0, "lat_min": 0.0, "lat_max": 1.0,
             "rows": 4, "cols": 4, "interval_seconds": 1800},
    "n_agents": 25,
    "n_intervals": 96,
    "period_intervals": 8,
    "seed": 2,
}


@pytest.fixture(autouse=True)
def _isolated_logging(tmp_path, monkeypatch):
    monkeypatch.setattr(main, "LOG_PATH", str(tmp_path / "logs" / "run.log"))
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return str(path)


@pytest.fixture
def city(tmp_path):
    out = tmp_path / "city"
    cfg = _write_json(tmp_path / "synth.json", SYNTH)
    assert main.cli(["synth", "--config", cfg, "--out-dir", str(out), "--verify"]) == 0
    return out


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as exc:
        main.build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    assert main.cli(["--help"]) == 0


def test_bad_flags_are_usage_errors():
    assert main.cli(["train", "--bogus"]) == 1
    assert main.cli(["no-such-command"]) == 1
    assert main.cli([]) == 1


def test_invalid_json_config_is_usage_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    assert main.cli(["synth", "--config", str(path), "--out-dir", str(tmp_path)]) == 1
    schema_bad = _write_json(tmp_path / "schema.json", {"n_agents": 3})
    assert main.cli(["synth", "--config", schema_bad, "--out-dir", str(tmp_path)]) == 1


def test_missing_file_is_runtime_error(tmp_path):
    assert main.cli(["synth", "--config", str(tmp_path / "absent.json"), "--out-dir", str(tmp_path)]) == 2


def test_synth_writes_artifacts(city):
    assert sorted(os.listdir(city)) == ["externals.csv", "flows.flw", "grid.json", "trajectories.csv"]
    series = load_series(str(city / "flows.flw"), load_grid(str(city / "grid.json")))
    assert series.indices() == list(range(96))


def test_flows_recounts_synthetic_trajectories(city, tmp_path):
    out = tmp_path / "recount.flw"
    code = main.cli(["flows", "--in", str(city / "trajectories.csv"), "--grid", str(city / "grid.json"),
                     "--out", str(out), "--start", "0", "--end", "96"])
    assert code == 0
    with open(out, "rb") as fh, open(city / "flows.flw", "rb") as ref:
        assert fh.read(4) == b"FLW1"
        fh.seek(0)
        assert fh.read() == ref.read()


def test_train_evaluate_predict_heatmap(city, tmp_path, capsys):
    ckpt = tmp_path / "model.strn"
    train_cfg = _write_json(tmp_path / "train.json", {
        "model": {"len_closeness": 2, "len_period": 1, "len_trend": 0, "period": 8,
                  "residual_units": 1, "filters": 4},
        "hyper": {"batch_size": 16, "max_epochs": 3, "finetune_epochs": 1},
        "seed": 1,
        "grid_path": str(city / "grid.json"),
        "flows_path": str(city / "flows.flw"),
        "externals_path": str(city / "externals.csv"),
        "checkpoint_path": str(ckpt),
    })
    assert main.cli(["train", "--config", train_cfg, "--max-epochs", "2"]) == 0
    loaded = load_checkpoint(str(ckpt))
    assert loaded.metadata["hyper"]["max_epochs"] == 2
    assert loaded.config.ext_dim == 15
    history = read_history_csv(str(tmp_path / "model_history.csv"))
    assert list(history["epoch"]) == [1, 2, 3]

    capsys.readouterr()
    code = main.cli(["evaluate", "--checkpoint", str(ckpt), "--grid", str(city / "grid.json"),
                     "--flows", str(city / "flows.flw"), "--externals", str(city / "externals.csv"),
                     "--fusion-maps", str(tmp_path / "maps"), "--scale", "2"])
    assert code == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("val_rmse="))
    recomputed, recorded = (part.split("=")[1] for part in line.split())
    assert recomputed == recorded
    assert sorted(os.listdir(tmp_path / "maps")) == [
        "fusion_closeness.ppm", "fusion_period.ppm", "fusion_summary.json",
    ]

    pred = tmp_path / "pred.flw"
    assert main.cli(["predict", "--checkpoint", str(ckpt), "--grid", str(city / "grid.json"),
                     "--flows", str(city / "flows.flw"), "--externals", str(city / "externals.csv"),
                     "--steps", "3", "--out", str(pred)]) == 0
    assert load_series(str(pred), load_grid(str(city / "grid.json"))).indices() == [96, 97, 98]
    with open(str(pred) + ".json", encoding="utf-8") as fh:
        assert json.load(fh)["checkpoint_id"] == loaded.checkpoint_id

    ppm = tmp_path / "t.ppm"
    assert main.cli(["heatmap", "--flows", str(pred), "--grid", str(city / "grid.json"),
                     "--channel", "out", "--out", str(ppm), "--scale", "4"]) == 0
    with open(ppm, "rb") as fh:
        assert fh.read().startswith(b"P6\n16 16\n255\n")


def test_predict_rejects_zero_steps(city, tmp_path):
    assert main.cli(["predict", "--checkpoint", "x", "--grid", str(city / "grid.json"),
                     "--flows", str(city / "flows.flw"), "--steps", "0", "--out", str(tmp_path / "p")]) == 1


def test_train_without_paths_is_usage_error(tmp_path):
    cfg = _write_json(tmp_path / "t.json", {"model": {}})
    assert main.cli(["train", "--config", cfg]) == 1


def test_heatmap_of_missing_interval(city, tmp_path):
    assert main.cli(["heatmap", "--flows", str(city / "flows.flw"), "--grid", str(city / "grid.json"),
                     "--t", "500", "--out", str(tmp_path / "x.ppm")]) == 2


def test_evaluate_experiment_writes_report(city, tmp_path):
    spec = _write_json(tmp_path / "exp.json", {
        "name": "cli_tiny",
        "dataset": {"grid_path": str(city / "grid.json"), "flows_path": str(city / "flows.flw")},
        "test_intervals": 8,
        "base_model": {"len_closeness": 2, "len_period": 0, "len_trend": 0, "residual_units": 1, "filters": 2},
        "variants": [{"name": "closeness", "use_externals": False}],
        "hyper": {"batch_size": 16, "max_epochs": 1, "finetune_epochs": 0},
        "baselines": ["Persistence"],
    })
    out = tmp_path / "report"
    assert main.cli(["evaluate", "--experiment", spec, "--out-dir", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["cli_tiny.csv", "cli_tiny.json", "cli_tiny.md", "cli_tiny_steps.csv"]
