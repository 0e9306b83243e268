import struct

import numpy as np
import pytest

from checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from stresnet import ModelConfig, ParameterSet, init_params
from trainer import NormStats


@pytest.fixture
def model():
    cfg = ModelConfig(rows=3, cols=2, len_closeness=2, len_period=1, len_trend=0,
                      period=4, residual_units=2, filters=3, use_bn=True, ext_dim=5)
    return init_params(cfg, seed=11), cfg


def test_save_load_is_bit_exact(model, tmp_path):
    params, cfg = model
    stats = NormStats(min=0.0, max=317.0)
    path = save_checkpoint(params, stats, cfg, str(tmp_path / "m.strn"), {"seed": 3, "final_val_rmse": 1.25})
    ckpt = load_checkpoint(path)
    assert ckpt.config == cfg
    assert ckpt.stats == stats
    assert ckpt.metadata == {"seed": 3, "final_val_rmse": 1.25}
    assert list(ckpt.params.tensors) == list(params.tensors)
    for name, arr in params.tensors.items():
        assert ckpt.params[name].tobytes() == arr.tobytes()
    with open(path, "rb") as fh:
        assert encode_checkpoint(ckpt.params, ckpt.stats, ckpt.config, ckpt.metadata) == fh.read()
    assert len(ckpt.checkpoint_id) == 12


def test_bad_magic(model):
    params, cfg = model
    data = b"XXXX" + encode_checkpoint(params, NormStats(0.0, 1.0), cfg)[4:]
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(data)


def test_version_mismatch_names_both_versions(model):
    params, cfg = model
    data = bytearray(encode_checkpoint(params, NormStats(0.0, 1.0), cfg))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError) as exc:
        decode_checkpoint(bytes(data))
    assert "9" in str(exc.value) and "1" in str(exc.value)


def test_truncated_checkpoint(model):
    params, cfg = model
    data = encode_checkpoint(params, NormStats(0.0, 1.0), cfg)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-20])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "absent.strn"))


def test_scalar_tensor_survives(tmp_path):
    cfg = ModelConfig(rows=1, cols=1)
    params = ParameterSet({"x": np.array(2.5), "y": np.arange(6.0).reshape(2, 3)})
    back = decode_checkpoint(encode_checkpoint(params, NormStats(0.0, 1.0), cfg))
    assert back.params["x"].shape == ()
    assert float(back.params["x"]) == 2.5
    np.testing.assert_array_equal(back.params["y"], params["y"])
