"""Kernel backend selection.

The compiled Cython extension is preferred; the numpy fallback is used when it
is not built or when ``DRPROBE_PURE_PYTHON`` is set to a truthy value.
"""

import os

from . import _kernels_py

FIRST_TOKEN = _kernels_py.FIRST_TOKEN
MEAN = _kernels_py.MEAN
LAST_TOKEN = _kernels_py.LAST_TOKEN

_force_py = os.environ.get("DRPROBE_PURE_PYTHON", "").lower() in ("1", "true", "yes")

_impl = _kernels_py
BACKEND = "python"
if not _force_py:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def compiled_available():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python') or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


pool_hidden = _impl.pool_hidden
active_mask = _impl.active_mask
accumulate_active = _impl.accumulate_active
argmax_correct = _impl.argmax_correct
paired_moments = _impl.paired_moments
