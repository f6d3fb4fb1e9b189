"""Hot NHWC kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``AAGNET_DISABLE_NUMBA``
is unset (or ``0``). Set ``AAGNET_DISABLE_NUMBA=1`` before import to force the
numpy path. ``AAGNET_NUM_THREADS`` caps numba's worker threads.
"""
import os

from . import _numpy

_disabled = os.environ.get("AAGNET_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        import numba

        if numba.config.THREADING_LAYER == "default":
            # skip probing the system TBB, which is often too old and warns
            numba.config.THREADING_LAYER = "omp"
        from . import _numba as _impl

        BACKEND = "numba"
        _threads = os.environ.get("AAGNET_NUM_THREADS")
        if _threads:
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
depthwise_forward = _impl.depthwise_forward
depthwise_backward_input = _impl.depthwise_backward_input
depthwise_backward_weight = _impl.depthwise_backward_weight
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "depthwise_forward",
    "depthwise_backward_input",
    "depthwise_backward_weight",
    "maxpool_forward",
    "maxpool_backward",
]
