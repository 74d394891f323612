"""Block-wise NF4 weight quantization.

A weight tensor is flattened row-major, zero-padded to a whole number of
blocks, and each block is scaled by its absolute maximum so the extreme
element lands exactly on a ±1.0 codebook level.  Codes are 4-bit indices into
the 16-level normal-float codebook, packed two per byte (low nibble = even
flat index).  Per-block scales are float32, or 8-bit affine-quantized per
group of 256 blocks when double quantization is enabled.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .kernels import impl as _k

# 16-level normal-float codebook: evenly spaced quantiles of N(0, 1) over a
# symmetric probability range, renormalized to [-1, 1], with an exact zero.
# Frozen from the inverse-normal-CDF construction; tests regenerate it.
NF4_LEVELS_F64 = (
    -1.0,
    -0.696192805632343,
    -0.5250729594465005,
    -0.3949174259199071,
    -0.28444130892108205,
    -0.1847734028004556,
    -0.09104997598578049,
    0.0,
    0.07958031495840909,
    0.1609301443802907,
    0.2461122513474594,
    0.3379151367131279,
    0.44070973186421625,
    0.5626168879699849,
    0.7229566441594734,
    1.0,
)

NF4_ZERO_CODE = 7
DEFAULT_BLOCK_SIZE = 64
SCALE_GROUP_SIZE = 256  # blocks per double-quantization group

_LEVELS_F32 = np.array(NF4_LEVELS_F64, dtype=np.float32)
# decision boundaries: midpoints between adjacent levels, in float32
_MIDPOINTS_F32 = ((np.asarray(NF4_LEVELS_F64[:-1]) + np.asarray(NF4_LEVELS_F64[1:])) / 2.0).astype(np.float32)

MAX_LEVEL_GAP = float(np.diff(_LEVELS_F32).max())


def nf4_codebook() -> np.ndarray:
    """The 16 NF4 reconstruction levels as float32, ascending."""
    return _LEVELS_F32.copy()


def nf4_midpoints() -> np.ndarray:
    """The 15 float32 decision boundaries between adjacent levels."""
    return _MIDPOINTS_F32.copy()


class QuantizationError(ValueError):
    """Raised for invalid inputs to quantization operations."""


def as_tensor(values, shape=None) -> np.ndarray:
    """Validate and coerce to a float32 array with all-finite values."""
    arr = np.asarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.size and not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise QuantizationError(f"non-finite value at flat index {bad}")
    return arr


@dataclass(frozen=True)
class QuantizedScales:
    """8-bit affine-quantized block scales (double quantization).

    Per group of SCALE_GROUP_SIZE blocks one float32 step is kept; a single
    float32 offset (the minimum scale of the tensor) is shared by all groups.
    Reconstruction: scale = offset + code * step[group].
    """
    codes: np.ndarray        # uint8, one per block
    group_steps: np.ndarray  # float32, one per group
    offset: float

    @property
    def n_blocks(self) -> int:
        return int(self.codes.shape[0])

    @property
    def n_groups(self) -> int:
        return int(self.group_steps.shape[0])

    def reconstruct(self) -> np.ndarray:
        steps = np.repeat(self.group_steps, SCALE_GROUP_SIZE)[: self.n_blocks]
        return (np.float32(self.offset) + self.codes.astype(np.float32) * steps).astype(np.float32)


@dataclass(frozen=True)
class NF4Tensor:
    """Packed 4-bit NF4 weights with per-block absmax scales."""
    shape: tuple
    block_size: int
    packed: np.ndarray  # uint8, two codes per byte over the padded flat stream
    scales: Union[np.ndarray, QuantizedScales]

    def __post_init__(self):
        if self.block_size < 2:
            raise QuantizationError("block_size must be >= 2")
        expect = (self.n_padded + 1) // 2
        if self.packed.shape[0] != expect:
            raise QuantizationError(
                f"corrupt packing: expected {expect} bytes for shape {self.shape}, "
                f"got {self.packed.shape[0]}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def n_blocks(self) -> int:
        return -(-self.size // self.block_size)

    @property
    def n_padded(self) -> int:
        return self.n_blocks * self.block_size

    @property
    def double_quantized(self) -> bool:
        return isinstance(self.scales, QuantizedScales)

    def block_scales(self) -> np.ndarray:
        """Per-block scales as float32, decoding double quantization if set."""
        if isinstance(self.scales, QuantizedScales):
            return self.scales.reconstruct()
        return self.scales

    def codes(self) -> np.ndarray:
        """Unpacked 4-bit codes, one per element (padding trimmed)."""
        codes = np.empty(self.packed.shape[0] * 2, dtype=np.uint8)
        codes[0::2] = self.packed & 0x0F
        codes[1::2] = self.packed >> 4
        return codes[: self.size]


def quantize_nf4(t, block_size: int = DEFAULT_BLOCK_SIZE) -> NF4Tensor:
    """Quantize a tensor to block-wise NF4.

    Per block the scale is max|x|; each element maps to the nearest codebook
    level of x/scale with midpoint ties resolving to the lower index.  An
    all-zero block gets scale 0 and zero-level codes.
    """
    arr = as_tensor(t)
    if arr.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    if block_size < 2:
        raise QuantizationError("block_size must be >= 2")
    n = arr.size
    n_padded = -(-n // block_size) * block_size
    flat = np.zeros(n_padded, dtype=np.float32)
    flat[:n] = arr.ravel()
    packed, scales = _k.quantize_blocks(flat, block_size, _MIDPOINTS_F32, NF4_ZERO_CODE)
    return NF4Tensor(shape=tuple(arr.shape), block_size=block_size,
                     packed=packed, scales=scales)


def dequantize_nf4(q: NF4Tensor) -> np.ndarray:
    """Reconstruct scale * level[code] per element as float32."""
    flat = _k.dequantize_flat(q.packed, q.block_scales(), _LEVELS_F32,
                              q.block_size, q.size)
    return flat.reshape(q.shape)


def double_quantize_scales(q: NF4Tensor):
    """Quantize the per-block scales to 8 bits per group of 256 blocks.

    Returns (tensor, changed); an already double-quantized input is returned
    unchanged with changed=False.
    """
    if q.double_quantized:
        return q, False
    scales = q.scales
    offset = np.float32(scales.min() if scales.size else 0.0)
    nb = scales.shape[0]
    ng = -(-nb // SCALE_GROUP_SIZE)
    padded = np.full(ng * SCALE_GROUP_SIZE, offset, dtype=np.float32)
    padded[:nb] = scales
    groups = padded.reshape(ng, SCALE_GROUP_SIZE)
    steps = ((groups.max(axis=1) - offset) / np.float32(255.0)).astype(np.float32)
    safe = np.where(steps == 0.0, np.float32(1.0), steps)
    codes = np.rint((groups - offset) / safe[:, None]).astype(np.int64)
    codes = np.clip(codes, 0, 255).astype(np.uint8).ravel()[:nb]
    dq = QuantizedScales(codes=codes, group_steps=steps, offset=float(offset))
    return NF4Tensor(shape=q.shape, block_size=q.block_size,
                     packed=q.packed, scales=dq), True


def matvec_nf4(q: NF4Tensor, x) -> np.ndarray:
    """y = W @ x for a 2-D NF4 tensor, dequantizing one block at a time."""
    if len(q.shape) != 2:
        raise QuantizationError(f"matvec requires a 2-D tensor, got shape {q.shape}")
    xv = as_tensor(x)
    rows, cols = q.shape
    if xv.shape != (cols,):
        raise QuantizationError(f"shape mismatch: matrix {q.shape} x vector {xv.shape}")
    return _k.matvec(q.packed, q.block_scales(), _LEVELS_F32, q.block_size,
                     rows, cols, np.ascontiguousarray(xv))


@dataclass(frozen=True)
class MemoryReport:
    """Exact byte accounting for one tensor or an aggregated model."""
    fp32_bytes: int
    quantized_bytes: int
    bits_per_parameter: float
    reduction_fraction: float

    @staticmethod
    def combine(reports) -> "MemoryReport":
        fp32 = sum(r.fp32_bytes for r in reports)
        q = sum(r.quantized_bytes for r in reports)
        params = fp32 // 4
        return MemoryReport(
            fp32_bytes=fp32,
            quantized_bytes=q,
            bits_per_parameter=8.0 * q / params if params else 0.0,
            reduction_fraction=1.0 - q / fp32 if fp32 else 0.0,
        )


def quantized_payload_bytes(n: int, block_size: int, double_quant: bool) -> int:
    """Closed-form serialized payload size for n parameters.

    codes: ceil(n / 2) bytes; plain scales: 4 bytes per block; double
    quantization: 1 byte per block + 4 bytes per group of 256 blocks (the
    shared offset lives in the tensor header, not the payload).
    """
    nb = -(-n // block_size)
    if double_quant:
        return (n + 1) // 2 + nb + 4 * (-(-nb // SCALE_GROUP_SIZE))
    return (n + 1) // 2 + 4 * nb


def memory_footprint(t) -> MemoryReport:
    """MemoryReport for an NF4Tensor or a full-precision array."""
    if isinstance(t, NF4Tensor):
        n = t.size
        qb = quantized_payload_bytes(n, t.block_size, t.double_quantized)
    else:
        arr = np.asarray(t)
        n = arr.size
        qb = 4 * n
    fp32 = 4 * n
    return MemoryReport(
        fp32_bytes=fp32,
        quantized_bytes=qb,
        bits_per_parameter=8.0 * qb / n if n else 0.0,
        reduction_fraction=1.0 - qb / fp32 if fp32 else 0.0,
    )
