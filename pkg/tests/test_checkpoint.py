"""Binary checkpoint format: round trips, digests, corruption detection."""

import numpy as np
import pytest

from disco.checkpoint import (CheckpointError, DigestMismatch,
                              load_checkpoint, peek_digest, save_checkpoint)


def _records():
    rng = np.random.default_rng(0)
    return {
        "w/conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "w/fc.bias": rng.standard_normal(7).astype(np.float64),
        "epoch": np.array(12, dtype=np.int64),
        "queue/filled": np.array([3], dtype=np.int32),
        "meta": np.frombuffer(b"hello", dtype=np.uint8).copy(),
    }


def test_roundtrip_all_dtypes(tmp_path):
    path = tmp_path / "a.ckpt"
    recs = _records()
    save_checkpoint(path, recs, 0xABCD)
    out, digest = load_checkpoint(path)
    assert digest == 0xABCD
    assert set(out) == set(recs)
    for name, arr in recs.items():
        np.testing.assert_array_equal(out[name], arr)
        assert out[name].dtype == arr.dtype


def test_expected_digest_enforced(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _records(), 1)
    load_checkpoint(path, expect_digest=1)
    with pytest.raises(DigestMismatch):
        load_checkpoint(path, expect_digest=2)


def test_peek_digest(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _records(), 0x1234567890)
    assert peek_digest(path) == 0x1234567890


def test_payload_corruption_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _records(), 1)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _records(), 1)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_garbage_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _records(), 1)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_file_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, _records(), 7)
    save_checkpoint(b, _records(), 7)
    assert a.read_bytes() == b.read_bytes()


def test_record_order_does_not_matter(tmp_path):
    recs = _records()
    flipped = dict(reversed(list(recs.items())))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, recs, 7)
    save_checkpoint(b, flipped, 7)
    assert a.read_bytes() == b.read_bytes()
