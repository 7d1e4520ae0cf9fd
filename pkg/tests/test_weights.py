"""BREX weight-file round trips and corruption rejection."""

import struct

import numpy as np
import pytest

from earlyexit.errors import FormatError
from earlyexit.heads import InitMode, init_heads
from earlyexit.model import Backbone, ModelConfig
from earlyexit.rng import Rng
from earlyexit.weights import MAGIC, load_weights, save_weights


@pytest.fixture()
def model():
    cfg = ModelConfig(vocab_size=32, d_model=16, n_layers=3, n_attn_heads=2,
                      d_ff=32, max_seq_len=12, exit_taps=(1, 2), seed=8)
    return Backbone.init_random(cfg)


def test_backbone_round_trip_bitwise(model, tmp_path):
    path = tmp_path / "m.brex"
    save_weights(path, model, config_hash="deadbeef")
    back, bank, header = load_weights(path)
    assert bank is None
    assert back.config == model.config
    assert back.fingerprint() == model.fingerprint()
    assert header["config_hash"] == "deadbeef"
    assert header["format_version"] == 1


def test_round_trip_with_heads_and_metadata(model, tmp_path):
    bank = init_heads(model, InitMode.SCRATCH, Rng(4))
    path = tmp_path / "mh.brex"
    save_weights(path, model, bank, lam=0.95, config_hash="c0ffee")
    back, bank2, header = load_weights(path)
    assert bank2 is not None
    assert bank2.fingerprint() == bank.fingerprint()
    assert bank2.init_mode is InitMode.SCRATCH
    assert header["heads"] == {"count": 2, "init_mode": "scratch", "lambda": 0.95}


def test_save_is_deterministic(model, tmp_path):
    p1, p2 = tmp_path / "a.brex", tmp_path / "b.brex"
    save_weights(p1, model)
    save_weights(p2, model)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(model, tmp_path):
    path = tmp_path / "m.brex"
    save_weights(path, model)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_weights(path)


def test_bad_version_rejected(model, tmp_path):
    path = tmp_path / "m.brex"
    save_weights(path, model)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_weights(path)


def test_corrupt_body_crc_rejected(model, tmp_path):
    path = tmp_path / "m.brex"
    save_weights(path, model)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="CRC"):
        load_weights(path)


def test_truncated_file_rejected(model, tmp_path):
    path = tmp_path / "m.brex"
    save_weights(path, model)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError):
        load_weights(path)


def test_loaded_model_runs(model, tmp_path):
    from earlyexit.model import forward_full

    path = tmp_path / "m.brex"
    save_weights(path, model)
    back, _, _ = load_weights(path)
    a = forward_full(model, [1, 2, 3])
    b = forward_full(back, [1, 2, 3])
    assert np.array_equal(a.final_logits, b.final_logits)
