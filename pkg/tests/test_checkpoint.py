import struct
import zlib

import numpy as np
import pytest

from milora import numkernel as nk
from milora.checkpoint import MAGIC, decode, encode, load_checkpoint, read_checkpoint, save_checkpoint
from milora.errors import BadMagicError, ChecksumError, InvalidDimsError, TruncatedError, VersionError
from milora.model import ModelConfig, build_model
from milora.synthdata import random_episode
from milora.trainloop import AdamState, Trainer, TrainConfig


@pytest.fixture
def tiny():
    return ModelConfig.tiny(seed=3)


@pytest.fixture
def episodes(tiny):
    return [random_episode(tiny.T, tiny.d, tiny.summary_len, seed=s) for s in range(4)]


def test_round_trip_is_bitwise(tmp_path, tiny):
    with nk.precision("f64"):
        model = build_model(tiny)
    opt = AdamState(m={"fusion.logit": np.array(0.25)}, v={"fusion.logit": np.array(0.5)}, t=7)
    save_checkpoint(tmp_path / "m.mlrv", model, opt, meta={"best_score": 0.5})
    loaded, state = load_checkpoint(tmp_path / "m.mlrv")
    assert loaded.cfg == tiny
    assert loaded.trainable == model.trainable
    for name, t in model.params.items():
        assert loaded.params[name].data.dtype == t.data.dtype
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
    assert state.t == 7 and float(state.m["fusion.logit"]) == 0.25
    assert read_checkpoint(tmp_path / "m.mlrv").meta == {"best_score": 0.5}


def test_f32_round_trip_keeps_dtype(tmp_path, tiny):
    with nk.precision("f32"):
        model = build_model(tiny)
    save_checkpoint(tmp_path / "m.mlrv", model)
    loaded, _ = load_checkpoint(tmp_path / "m.mlrv")
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded.params["temporal.w_v"].data, model.params["temporal.w_v"].data)


def test_byte_layout_of_first_tensor(tmp_path, tiny):
    with nk.precision("f64"):
        model = build_model(tiny)
    raw = encode(read_checkpoint_from(model, tmp_path))
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4) == (1,)
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + blob_len
    (count,) = struct.unpack_from("<Q", raw, pos)
    assert count == len(model.params)
    (name_len,) = struct.unpack_from("<Q", raw, pos + 8)
    name = raw[pos + 16:pos + 16 + name_len].decode()
    flags, code, ndim = struct.unpack_from("<BBB", raw, pos + 16 + name_len)
    assert name == "temporal.w_q" and flags == 0 and code == 1 and ndim == 2
    assert struct.unpack_from("<I", raw, len(raw) - 4) == (zlib.crc32(raw[:-4]),)


def read_checkpoint_from(model, tmp_path):
    save_checkpoint(tmp_path / "x.mlrv", model)
    return read_checkpoint(tmp_path / "x.mlrv")


def test_corruptions_raise_distinct_errors(tmp_path, tiny):
    model = build_model(tiny)
    save_checkpoint(tmp_path / "m.mlrv", model)
    raw = (tmp_path / "m.mlrv").read_bytes()
    with pytest.raises(BadMagicError, match="bad magic"):
        decode(b"XLRV" + raw[4:])
    with pytest.raises(VersionError):
        decode(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(TruncatedError):
        decode(raw[: len(raw) // 2])
    flipped = bytearray(raw)
    flipped[len(raw) - 20] ^= 0xFF
    with pytest.raises(ChecksumError, match="checksum"):
        decode(bytes(flipped))


def test_unknown_dtype_code_is_rejected(tiny):
    from milora.checkpoint import Checkpoint
    raw = bytearray(encode(Checkpoint(tiny.to_dict(), {"x": np.zeros(2)}, {"x": True})))
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    code_at = 16 + blob_len + 8 + 8 + 1 + 1  # count, name length, name "x", flags, then dtype
    raw[code_at] = 7
    with pytest.raises(InvalidDimsError):
        decode(bytes(raw))


def test_resume_equals_uninterrupted_training(tmp_path, tiny, episodes):
    cfg = TrainConfig(lr_max=1e-2, batch_size=2)
    total = 10
    batches = [episodes[(2 * i) % 4:(2 * i) % 4 + 2] for i in range(total)]
    with nk.precision("f64"):
        straight = build_model(tiny)
        reference = Trainer(straight, cfg, total)
        for b in batches:
            reference.step(b)

        first = build_model(tiny)
        trainer = Trainer(first, cfg, total)
        for b in batches[:5]:
            trainer.step(b)
        save_checkpoint(tmp_path / "half.mlrv", first, trainer.state)

        resumed, state = load_checkpoint(tmp_path / "half.mlrv")
        assert resumed.dtype == np.float64 and state.t == 5
        trainer = Trainer(resumed, cfg, total, state)
        for b in batches[5:]:
            trainer.step(b)
    for name, t in straight.params.items():
        np.testing.assert_array_equal(resumed.params[name].data, t.data, err_msg=name)
    assert trainer.state.t == reference.state.t == total
    for name in straight.trainable_params():
        np.testing.assert_array_equal(trainer.state.m[name], reference.state.m[name])
        np.testing.assert_array_equal(trainer.state.v[name], reference.state.v[name])
