"""Convolution memory-movement kernels: compiled core with numpy fallback.

``im2col``/``col2im`` dominate convolution runtime outside of the BLAS
matmul itself.  A Cython extension provides them when compiled; otherwise a
pure-numpy implementation is used.  Set ``SPLINECNN_KERNELS=fallback`` to
force the numpy path (useful for the benchmark in benchmarks/bench_conv.py).
"""

import os

from . import fallback

BACKEND = "fallback"
im2col = fallback.im2col
col2im = fallback.col2im

if os.environ.get("SPLINECNN_KERNELS", "").lower() != "fallback":
    try:
        from . import _convops

        im2col = _convops.im2col
        col2im = _convops.col2im
        BACKEND = "compiled"
    except ImportError:
        pass

__all__ = ["im2col", "col2im", "BACKEND", "fallback"]
