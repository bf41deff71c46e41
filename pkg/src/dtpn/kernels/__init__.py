"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension (_speedups, Cython) is preferred when it has been
built; otherwise the numpy reference implementation (_reference) is used.
Set DTPN_KERNELS=numpy or DTPN_KERNELS=cython to force a backend; forcing
cython raises if the extension is missing.  Both backends implement the
same contracts and are cross-checked in the test suite.
"""

import os

from dtpn.kernels import _reference

_forced = os.environ.get("DTPN_KERNELS", "").strip().lower()
if _forced not in ("", "numpy", "cython"):
    raise RuntimeError(
        f"DTPN_KERNELS={_forced!r} not recognized (use 'numpy' or 'cython')"
    )

if _forced == "numpy":
    _impl = _reference
    BACKEND = "numpy"
else:
    try:
        from dtpn.kernels import _speedups as _impl

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _reference
        BACKEND = "numpy"

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
maxpool1d_forward = _impl.maxpool1d_forward
maxpool1d_backward = _impl.maxpool1d_backward

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
]
