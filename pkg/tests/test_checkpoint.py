"""Checkpoint container: round-trips, byte-exact payload accounting, and
structural error reporting."""
import struct

import numpy as np
import pytest

from deskvla import checkpoint as ckpt
from deskvla.quant import (
    dequantize_nf4,
    double_quantize_scales,
    memory_footprint,
    quantize_nf4,
)


@pytest.fixture
def tensors():
    rng = np.random.default_rng(123)
    fp = rng.standard_normal((12, 7)).astype(np.float32)
    q = quantize_nf4(rng.standard_normal((9, 30)).astype(np.float32), block_size=32)
    qdq, _ = double_quantize_scales(
        quantize_nf4(rng.standard_normal(2000).astype(np.float32)))
    return {"layer.weight": fp, "layer.base": q, "deep.base": qdq}


def test_roundtrip_bitwise(tmp_path, tensors):
    path = tmp_path / "model.lvla"
    meta = {"seed": 7, "note": "fixture"}
    ckpt.save_checkpoint(path, tensors, meta)
    loaded, meta2 = ckpt.load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    assert np.array_equal(loaded["layer.weight"], tensors["layer.weight"])
    for name in ["layer.base", "deep.base"]:
        a, b = loaded[name], tensors[name]
        assert a.shape == b.shape and a.block_size == b.block_size
        assert np.array_equal(a.packed, b.packed)
        assert np.array_equal(a.block_scales(), b.block_scales())
        assert np.array_equal(dequantize_nf4(a), dequantize_nf4(b))


def test_save_is_deterministic(tmp_path, tensors):
    p1, p2 = tmp_path / "a.lvla", tmp_path / "b.lvla"
    ckpt.save_checkpoint(p1, tensors, {"x": 1})
    ckpt.save_checkpoint(p2, tensors, {"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_payload_lengths_match_formula(tmp_path, tensors):
    path = tmp_path / "model.lvla"
    ckpt.save_checkpoint(path, tensors, {})
    for name, dt, shape, nbytes in ckpt.tensor_table(path):
        t = tensors[name]
        assert nbytes == memory_footprint(t).quantized_bytes


def test_file_size_is_header_plus_payloads(tmp_path, tensors):
    """The payload section is exactly the sum of the closed-form byte counts."""
    path = tmp_path / "model.lvla"
    ckpt.save_checkpoint(path, tensors, {})
    data = path.read_bytes()
    payload_total = sum(memory_footprint(t).quantized_bytes for t in tensors.values())
    # header ends where the first payload starts
    loaded, _ = ckpt.load_checkpoint(path)
    assert len(data) >= payload_total
    # recompute first payload offset from the table walk
    r = ckpt._Reader(data)
    r.take(4)
    _, meta_len = r.unpack("<II")
    r.take(meta_len)
    (n_tensors,) = r.unpack("<I")
    first_offset = None
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        r.take(name_len)
        dtype, ndim = r.unpack("<BB")
        r.unpack(f"<{ndim}I")
        r.unpack("<I")
        if dtype == ckpt.DTYPE_NF4_DQ:
            r.unpack("<f")
        off, _length = r.unpack("<QQ")
        if first_offset is None:
            first_offset = off
    assert len(data) - first_offset == payload_total


def test_bad_magic(tmp_path):
    path = tmp_path / "bogus.lvla"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "bogus.lvla"
    path.write_bytes(ckpt.MAGIC + struct.pack("<II", 99, 0) + struct.pack("<I", 0))
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load_checkpoint(path)


def test_truncated_file(tmp_path, tensors):
    path = tmp_path / "model.lvla"
    ckpt.save_checkpoint(path, tensors, {})
    data = path.read_bytes()
    (tmp_path / "cut.lvla").write_bytes(data[: len(data) // 2])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "cut.lvla")


def test_odd_element_count_roundtrip(tmp_path):
    """Odd n: the final stored byte carries one real code plus one pad nibble."""
    x = np.linspace(-1, 1, 65, dtype=np.float32)
    q = quantize_nf4(x, block_size=64)
    path = tmp_path / "odd.lvla"
    ckpt.save_checkpoint(path, {"t": q}, {})
    loaded, _ = ckpt.load_checkpoint(path)
    assert np.array_equal(loaded["t"].packed, q.packed)
    assert np.array_equal(dequantize_nf4(loaded["t"]), dequantize_nf4(q))
