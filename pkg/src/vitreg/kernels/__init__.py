"""Voxel kernel backends.

Two interchangeable implementations of the hot inner loops exist:

* ``_native`` — Cython/OpenMP, built at install time;
* ``pure``    — vectorized NumPy, always available.

The native backend is preferred when importable. Set
``VITREG_BACKEND=python`` or ``VITREG_BACKEND=native`` to force a
choice (forcing ``native`` raises if the extension is missing).
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import pure

_CHOICES = ("auto", "native", "python")

_requested = os.environ.get("VITREG_BACKEND", "auto").lower()
if _requested not in _CHOICES:
    raise RuntimeError(
        f"VITREG_BACKEND must be one of {_CHOICES}, got {_requested!r}"
    )

_native = None
if _requested in ("auto", "native"):
    try:
        from . import _native  # type: ignore[attr-defined]
    except ImportError:
        _native = None
    if _requested == "native" and _native is None:
        raise RuntimeError(
            "VITREG_BACKEND=native but the compiled extension is not "
            "available; reinstall with a working C compiler"
        )

_impl = _native if _native is not None else pure
BACKEND = "native" if _native is not None else "python"

conv3d_forward = _impl.conv3d_forward
conv3d_backward = _impl.conv3d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
warp_forward = _impl.warp_forward
warp_backward = _impl.warp_backward
warp_nearest = _impl.warp_nearest


def get_backend(name):
    """Return the kernel namespace for 'python' or 'native' (for benchmarks)."""
    if name == "python":
        return pure
    if name == "native":
        if _native is None:
            raise RuntimeError("native kernel backend is not built")
        return _native
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["python"]
    if _native is not None:
        names.append("native")
    return names
