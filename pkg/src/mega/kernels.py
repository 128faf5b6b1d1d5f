"""Numeric kernel backend selection.

Prefers the compiled extension (mega._core) and falls back to pure numpy.
Set MEGA_KERNEL_BACKEND=numpy or =compiled to force one; forcing "compiled"
raises if the extension was not built.
"""

import os

from mega import _kernels_numpy

_requested = os.environ.get("MEGA_KERNEL_BACKEND", "").strip().lower()

if _requested not in ("", "numpy", "compiled"):
    raise ValueError(f"MEGA_KERNEL_BACKEND must be 'numpy' or 'compiled', got {_requested!r}")

if _requested == "numpy":
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from mega import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "MEGA_KERNEL_BACKEND=compiled but mega._core is not built; "
                "reinstall with a C compiler or unset the variable"
            ) from None
        _impl = _kernels_numpy
        BACKEND = "numpy"

dense_fwd = _impl.dense_fwd
dense_bwd = _impl.dense_bwd
weighted_sum = _impl.weighted_sum
scaled_add = _impl.scaled_add
adam_step = _impl.adam_step
soft_update = _impl.soft_update


def get_backend(name):
    """Return the kernel module for an explicit backend name (benchmarks)."""
    if name == "numpy":
        return _kernels_numpy
    if name == "compiled":
        from mega import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
