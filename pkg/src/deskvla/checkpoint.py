"""Binary checkpoint container shared by the quantizer and the policy.

Layout (all integers little-endian):

    bytes 0..3   magic "LVLA"
    u32          format version (1)
    u32          meta_len, then meta_len bytes of UTF-8 JSON metadata
    u32          n_tensors
    n_tensors *  table entry:
        u16      name_len, then name bytes (UTF-8)
        u8       dtype: 0 = fp32, 1 = nf4, 2 = nf4 + double-quantized scales
        u8       ndim, then ndim * u32 dims
        u32      block_size (0 for fp32)
        f32      scale offset (dtype 2 only)
        u64      payload byte offset (absolute), u64 payload length
    payloads     fp32: raw float32 values;
                 nf4: ceil(n/2) packed code bytes + float32 block scales;
                 nf4+dq: ceil(n/2) packed code bytes + u8 scale codes per
                 block + float32 step per group of 256 blocks.

Payload lengths match deskvla.quant.quantized_payload_bytes exactly; a
hex-dump walkthrough lives in docs/checkpoint_format.md.
"""
from __future__ import annotations

import json
import struct
from typing import Union

import numpy as np

from .quant import (
    SCALE_GROUP_SIZE,
    NF4Tensor,
    QuantizedScales,
    quantized_payload_bytes,
)

MAGIC = b"LVLA"
VERSION = 1

DTYPE_FP32 = 0
DTYPE_NF4 = 1
DTYPE_NF4_DQ = 2

TensorLike = Union[np.ndarray, NF4Tensor]


class CheckpointError(IOError):
    """Structural problem in a checkpoint file."""


def _tensor_payload(t: TensorLike) -> bytes:
    if isinstance(t, NF4Tensor):
        n = t.size
        code_bytes = t.packed.tobytes()[: (n + 1) // 2]
        if isinstance(t.scales, QuantizedScales):
            return (code_bytes + t.scales.codes.tobytes()
                    + t.scales.group_steps.astype("<f4").tobytes())
        return code_bytes + t.scales.astype("<f4").tobytes()
    return np.ascontiguousarray(t, dtype="<f4").tobytes()


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write tensors (fp32 arrays or NF4Tensors) plus JSON metadata."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    entries = []
    payloads = []
    for name, t in tensors.items():
        if isinstance(t, NF4Tensor):
            dtype = DTYPE_NF4_DQ if t.double_quantized else DTYPE_NF4
            shape = t.shape
            block = t.block_size
            offset_f = t.scales.offset if t.double_quantized else 0.0
        else:
            t = np.asarray(t, dtype=np.float32)
            dtype, shape, block, offset_f = DTYPE_FP32, t.shape, 0, 0.0
        payload = _tensor_payload(t)
        entries.append((name.encode(), dtype, shape, block, offset_f, len(payload)))
        payloads.append(payload)

    header = bytearray()
    header += MAGIC
    header += struct.pack("<II", VERSION, len(meta_bytes))
    header += meta_bytes
    header += struct.pack("<I", len(entries))

    # first pass with zero offsets to learn the header size
    def entry_bytes(name, dtype, shape, block, offset_f, off, length):
        b = struct.pack("<H", len(name)) + name
        b += struct.pack("<BB", dtype, len(shape))
        b += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
        b += struct.pack("<I", block)
        if dtype == DTYPE_NF4_DQ:
            b += struct.pack("<f", offset_f)
        b += struct.pack("<QQ", off, length)
        return b

    table_len = sum(len(entry_bytes(n, d, s, bl, o, 0, ln))
                    for n, d, s, bl, o, ln in entries)
    pos = len(header) + table_len
    table = bytearray()
    for name, dtype, shape, block, offset_f, length in entries:
        table += entry_bytes(name, dtype, shape, block, offset_f, pos, length)
        pos += length

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table)
        for payload in payloads:
            fh.write(payload)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _rebuild_nf4(shape, block, dtype, offset_f, payload) -> NF4Tensor:
    n = int(np.prod(shape)) if shape else 1
    nb = -(-n // block)
    n_padded = nb * block
    code_len = (n + 1) // 2
    expect = quantized_payload_bytes(n, block, dtype == DTYPE_NF4_DQ)
    if len(payload) != expect:
        raise CheckpointError(
            f"payload length {len(payload)} != expected {expect} for shape {shape}")
    packed = np.full((n_padded + 1) // 2, 0x77, dtype=np.uint8)  # pad = zero codes
    packed[:code_len] = np.frombuffer(payload[:code_len], dtype=np.uint8)
    if dtype == DTYPE_NF4_DQ:
        ng = -(-nb // SCALE_GROUP_SIZE)
        codes = np.frombuffer(payload[code_len:code_len + nb], dtype=np.uint8)
        steps = np.frombuffer(payload[code_len + nb:], dtype="<f4").astype(np.float32)
        if steps.shape[0] != ng:
            raise CheckpointError("scale group count mismatch")
        scales = QuantizedScales(codes=codes.copy(), group_steps=steps,
                                 offset=float(offset_f))
    else:
        scales = np.frombuffer(payload[code_len:], dtype="<f4").astype(np.float32)
        if scales.shape[0] != nb:
            raise CheckpointError("block scale count mismatch")
    return NF4Tensor(shape=tuple(shape), block_size=block, packed=packed, scales=scales)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len).decode())
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dtype, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (block,) = r.unpack("<I")
        offset_f = r.unpack("<f")[0] if dtype == DTYPE_NF4_DQ else 0.0
        off, length = r.unpack("<QQ")
        if off + length > len(data):
            raise CheckpointError(f"payload for {name!r} extends past end of file")
        payload = data[off:off + length]
        if dtype == DTYPE_FP32:
            n = int(np.prod(shape)) if shape else 1
            if length != 4 * n:
                raise CheckpointError(f"fp32 payload length mismatch for {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(
                np.float32).reshape(shape)
        elif dtype in (DTYPE_NF4, DTYPE_NF4_DQ):
            tensors[name] = _rebuild_nf4(shape, block, dtype, offset_f, payload)
        else:
            raise CheckpointError(f"unknown dtype code {dtype} for {name!r}")
    return tensors, meta


def tensor_table(path):
    """Summaries (name, dtype name, shape, payload bytes) without payload decode."""
    names = {DTYPE_FP32: "fp32", DTYPE_NF4: "nf4", DTYPE_NF4_DQ: "nf4+dq"}
    tensors, _ = load_checkpoint(path)
    rows = []
    for name, t in tensors.items():
        if isinstance(t, NF4Tensor):
            dt = names[DTYPE_NF4_DQ if t.double_quantized else DTYPE_NF4]
            rows.append((name, dt, t.shape,
                         quantized_payload_bytes(t.size, t.block_size, t.double_quantized)))
        else:
            rows.append((name, "fp32", t.shape, 4 * t.size))
    return rows
