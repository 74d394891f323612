"""Low-rank adaptation over frozen base weights.

An adapted linear computes y = base(x) + (alpha/r) * B @ (A @ drop(x)) with
A, B trainable full-precision matrices and the base frozen (dense float32 or
NF4-quantized).  B starts at zero so an untrained adapter is exactly neutral.
Dropout applies to the adapter input branch only and is disabled at inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .quant import NF4Tensor, dequantize_nf4, matvec_nf4

ADAPTER_INIT_STD = 0.02


@dataclass
class LoRAAdapter:
    """Trainable low-rank delta: effective weight change (alpha/r) * B @ A."""
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    rank: int
    alpha: float
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError("rank must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError("adapter matrix shapes do not match rank")

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int = 8, alpha: float = 8.0,
               dropout_p: float = 0.1, rng: Optional[np.random.Generator] = None
               ) -> "LoRAAdapter":
        """A from a zero-mean Gaussian (std 0.02), B all zeros."""
        rng = rng or np.random.default_rng()
        a = (rng.standard_normal((rank, d_in)) * ADAPTER_INIT_STD).astype(np.float32)
        b = np.zeros((d_out, rank), dtype=np.float32)
        return cls(a=a, b=b, rank=rank, alpha=alpha, dropout_p=dropout_p)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return (np.float32(self.scaling) * (self.b @ self.a)).astype(np.float32)


@dataclass
class AdaptedLinear:
    """Frozen base weight (d_out, d_in) plus a trainable adapter."""
    base: Union[np.ndarray, NF4Tensor]
    adapter: LoRAAdapter
    bias: Optional[np.ndarray] = None

    @property
    def d_in(self) -> int:
        return self.base.shape[1]

    @property
    def d_out(self) -> int:
        return self.base.shape[0]

    def base_dense(self) -> np.ndarray:
        if isinstance(self.base, NF4Tensor):
            return dequantize_nf4(self.base)
        return self.base


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, survivors scaled."""
    keep = (rng.random(shape) >= p)
    return keep.astype(np.float32) / np.float32(1.0 - p)


def adapter_forward(layer: AdaptedLinear, x: np.ndarray, training: bool = False,
                    rng: Optional[np.random.Generator] = None):
    """y = base(x) + (alpha/r) * B @ (A @ drop(x)).

    x may be a vector (d_in,) or a batch (..., d_in).  Returns (y, cache);
    cache carries what adapter_gradients needs.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != layer d_in {layer.d_in}")
    ad = layer.adapter
    if training and ad.dropout_p > 0.0:
        if rng is None:
            raise ValueError("training forward with dropout needs an rng")
        mask = dropout_mask(x.shape, ad.dropout_p, rng)
        xd = x * mask
    else:
        mask = None
        xd = x
    if isinstance(layer.base, NF4Tensor) and x.ndim == 1:
        base_out = matvec_nf4(layer.base, x)
    else:
        base_out = x @ layer.base_dense().T
    lat = xd @ ad.a.T                       # (..., r)
    y = base_out + np.float32(ad.scaling) * (lat @ ad.b.T)
    if layer.bias is not None:
        y = y + layer.bias
    cache = {"xd": xd, "mask": mask, "lat": lat}
    return y.astype(np.float32), cache


def adapter_gradients(layer: AdaptedLinear, x: np.ndarray, upstream: np.ndarray,
                      cache: Optional[dict] = None):
    """Analytic gradients (dA, dB) of the adapter branch; base gets none.

    Without a forward cache the dropout-free path is differentiated.
    """
    ad = layer.adapter
    x = np.asarray(x, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    xd = cache["xd"] if cache is not None else x
    x2 = np.atleast_2d(xd.reshape(-1, xd.shape[-1]))
    up2 = np.atleast_2d(upstream.reshape(-1, upstream.shape[-1]))
    s = np.float32(ad.scaling)
    lat = x2 @ ad.a.T                 # (m, r)
    db = s * (up2.T @ lat)            # (d_out, r)
    da = s * ((up2 @ ad.b).T @ x2)    # (r, d_in)
    return da.astype(np.float32), db.astype(np.float32)


def adapter_input_gradient(layer: AdaptedLinear, upstream: np.ndarray,
                           cache: dict) -> np.ndarray:
    """Gradient w.r.t. the layer input, through base and adapter branches."""
    ad = layer.adapter
    dx = upstream @ layer.base_dense()
    d_adapter = np.float32(ad.scaling) * ((upstream @ ad.b) @ ad.a)
    if cache.get("mask") is not None:
        d_adapter = d_adapter * cache["mask"]
    return (dx + d_adapter).astype(np.float32)


def merge(layer: AdaptedLinear) -> np.ndarray:
    """W' = W + (alpha/r) * B @ A as dense float32 (dequantizing NF4 bases)."""
    return (layer.base_dense() + layer.adapter.delta()).astype(np.float32)
