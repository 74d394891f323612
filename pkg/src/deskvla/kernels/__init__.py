"""Kernel backend selection.

The compiled extension carries the hot loops (NF4 quantize/dequantize, fused
dequantizing matmuls, layer norm, attention).  A pure-numpy fallback with the
same surface is selected when the extension is missing, or when the
environment variable ``DESKVLA_BACKEND=python`` forces it.
"""
import os

BACKEND: str

if os.environ.get("DESKVLA_BACKEND", "") == "python":
    from . import _fallback as impl
    BACKEND = "python"
else:
    try:
        from . import _engine as impl  # type: ignore[no-redef]
        BACKEND = "ext"
    except ImportError:
        from . import _fallback as impl  # type: ignore[no-redef]
        BACKEND = "python"


def get_backend(name: str | None = None):
    """Return a kernel module by name ('ext' or 'python'); default: active."""
    if name is None:
        return impl
    if name == "python":
        from . import _fallback
        return _fallback
    if name == "ext":
        from . import _engine
        return _engine
    raise ValueError(f"unknown kernel backend {name!r}")
