"""Hot Euler-Maruyama loops.

The compiled ``_ckernels`` module is used when it imports; otherwise, or
when ``NMQ_PURE_PYTHON=1`` is set, the numpy loops in ``_pykernels`` are
used.  ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels

_force_py = os.environ.get("NMQ_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure Python forced by NMQ_PURE_PYTHON")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

linear_sme_em = _impl.linear_sme_em
reduced_em = _impl.reduced_em

OK = _pykernels.OK
NONFINITE = _pykernels.NONFINITE
TRACE_DRIFT = _pykernels.TRACE_DRIFT
INVERSE_RESIDUAL = _pykernels.INVERSE_RESIDUAL


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` (``"cython"``, ``"python"``, or the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


__all__ = ["BACKEND", "linear_sme_em", "reduced_em", "get_backend"]
