"""Convolution kernels with a JIT hot path and a pure-numpy fallback.

The backend is chosen once at import time from the ``DESKREID_KERNELS``
environment variable:

    auto   (default) use numba when importable, else numpy
    numba  require the JIT path, fail if numba is missing
    numpy  force the vectorized fallback

Both backends compute identical quantities; summation order may differ
between them, so cross-backend results agree to rounding, not bitwise.
Within one backend every kernel is sequential and deterministic.
"""

import os

_REQUESTED = os.environ.get("DESKREID_KERNELS", "auto").strip().lower()
if _REQUESTED not in {"auto", "numba", "numpy"}:
    raise ValueError(
        f"DESKREID_KERNELS={_REQUESTED!r} not understood; use auto, numba, or numpy"
    )

if _REQUESTED in ("auto", "numba"):
    try:
        from . import _conv_numba as _impl
        _BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise
        from . import _conv_numpy as _impl
        _BACKEND = "numpy"
else:
    from . import _conv_numpy as _impl
    _BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def active_backend():
    return _BACKEND
