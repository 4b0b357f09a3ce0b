"""Hot kernels with a compiled backend and a pure-Python fallback.

``MASKCLUSTER_KERNELS`` picks the source of each kernel at import:

* ``auto`` (default): compiled kernels where they beat numpy (the
  assignment solver and connected-component labelling); the BLAS-bound
  kernels stay on numpy. See ``benchmarks/bench_kernels.py``.
* ``cython``: every kernel from the compiled extension.
* ``python``: every kernel from the fallback.

Without a built extension every mode falls back to pure Python.
"""
import os

from . import _fallback

KERNELS = ("sinkhorn_scale", "hungarian_min", "label_components", "conv3x3_same", "conv3x3_same_backward")
COMPILED_BY_DEFAULT = ("hungarian_min", "label_components")

try:
    from . import _ext
except ImportError:
    _ext = None

MODE = os.environ.get("MASKCLUSTER_KERNELS", "auto").lower()
if MODE not in ("auto", "cython", "python"):
    raise ImportError(f"MASKCLUSTER_KERNELS must be auto, cython or python, got {MODE!r}")


def _source(name):
    if _ext is None or MODE == "python":
        return _fallback
    if MODE == "cython" or name in COMPILED_BY_DEFAULT:
        return _ext
    return _fallback


SOURCES = {name: ("cython" if _source(name) is _ext else "python") for name in KERNELS}
BACKEND = "python" if _ext is None or MODE == "python" else ("cython" if MODE == "cython" else "auto")

sinkhorn_scale = _source("sinkhorn_scale").sinkhorn_scale
hungarian_min = _source("hungarian_min").hungarian_min
label_components = _source("label_components").label_components
conv3x3_same = _source("conv3x3_same").conv3x3_same
conv3x3_same_backward = _source("conv3x3_same_backward").conv3x3_same_backward


def available_backends():
    """Map backend name to kernel module for every backend that imports."""
    out = {"python": _fallback}
    if _ext is not None:
        out["cython"] = _ext
    return out


__all__ = ["BACKEND", "KERNELS", "SOURCES", "available_backends", *KERNELS]
