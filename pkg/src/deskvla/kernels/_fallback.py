"""Pure-numpy kernel backend.

Drop-in replacement for the compiled extension: same function signatures,
bit-identical quantize/dequantize results (same float32 element-wise ops),
tolerance-equivalent matvec/matmat.  Used when the extension is unavailable
or when ``DESKVLA_BACKEND=python`` forces it.
"""
import numpy as np


def _unpack_codes(packed: np.ndarray, n: int) -> np.ndarray:
    codes = np.empty(packed.size * 2, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    return codes[:n]


def quantize_blocks(flat_padded, block, midpoints, zero_code):
    n = flat_padded.shape[0]
    blocks = flat_padded.reshape(-1, block)
    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    safe = np.where(scales == 0.0, np.float32(1.0), scales)
    z = (blocks / safe[:, None]).astype(np.float32)
    # code = number of midpoints strictly below z (ties resolve down)
    codes = np.searchsorted(midpoints, z.ravel(), side="left").astype(np.uint8)
    codes[np.repeat(scales == 0.0, block)] = zero_code
    if n % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    packed = (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)
    return packed, scales


def dequantize_flat(packed, scales, levels, block, n):
    codes = _unpack_codes(packed, -(-n // block) * block)
    vals = levels[codes].reshape(-1, block) * scales[:, None]
    return vals.ravel()[:n].astype(np.float32, copy=False)


def matvec(packed, scales, levels, block, rows, cols, x):
    n = rows * cols
    y = np.empty(rows, dtype=np.float32)
    codes = _unpack_codes(packed, -(-n // block) * block)
    # one block-row of quantized values dequantized per step
    flat_scales = np.repeat(scales, block)[:n]
    for r in range(rows):
        row = levels[codes[r * cols:(r + 1) * cols]] * flat_scales[r * cols:(r + 1) * cols]
        y[r] = np.float32(np.dot(row.astype(np.float64), x))
    return y


def matmat(packed, scales, levels, block, rows, cols, x, scratch, out=None):
    S = x.shape[0]
    tile = scratch.shape[0]
    if out is None:
        out = np.empty((S, rows), dtype=np.float32)
    n = rows * cols
    codes = _unpack_codes(packed, -(-n // block) * block)
    flat_scales = np.repeat(scales, block)[:n]
    for r0 in range(0, rows, tile):
        tr = min(tile, rows - r0)
        lo, hi = r0 * cols, (r0 + tr) * cols
        wt = (levels[codes[lo:hi]] * flat_scales[lo:hi]).reshape(tr, cols)
        np.matmul(x, wt.T, out=out[:, r0:r0 + tr])
    return out


def linear_f32(x, w, out=None):
    if out is None:
        return x @ w.T
    np.matmul(x, w.T, out=out)
    return out


def layer_norm(x, gamma, beta, eps, out=None):
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.var(axis=-1, keepdims=True, dtype=np.float64)
    res = ((x - mean) / np.sqrt(var + eps) * gamma + beta).astype(np.float32)
    if out is None:
        return res
    out[:] = res
    return out


def _softmax_rows(a):
    a = a - a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)
    return a


def attention(q, k, v, n_heads, scores_scratch, out=None):
    T, d = q.shape
    hd = d // n_heads
    if out is None:
        out = np.empty((T, d), dtype=np.float32)
    inv = np.float32(1.0 / np.sqrt(hd))
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = _softmax_rows((q[:, sl] @ k[:, sl].T) * inv)
        out[:, sl] = scores @ v[:, sl]
    return out


def silu_gate(g, u, out=None):
    res = (g / (1.0 + np.exp(-g)) * u).astype(np.float32)
    if out is None:
        return res
    out[:] = res
    return out
