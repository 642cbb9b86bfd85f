"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and importable; setting
``CROWDLOSS_PURE_PYTHON=1`` forces the numpy fallback. Both backends expose
the same functions and agree to rounding error. ``beta_log_pdf`` is always
taken from the numpy backend (see ``benchmarks/bench_kernels.py``).
"""
import os

from . import _pykernels

KERNEL_NAMES = (
    "dense_tanh_forward",
    "dense_tanh_backward",
    "heads_forward",
    "heads_objective",
    "heads_backward",
    "beta_log_pdf",
)


def _load_compiled():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = None if os.environ.get("CROWDLOSS_PURE_PYTHON") == "1" else _load_compiled()

BACKEND = "cython" if _compiled is not None else "python"
_active = _compiled if _compiled is not None else _pykernels


def available_backends():
    names = ["python"]
    if _load_compiled() is not None:
        names.insert(0, "cython")
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled kernels are not built")
        return mod
    raise ValueError(f"unknown kernel backend {name!r}")


dense_tanh_forward = _active.dense_tanh_forward
dense_tanh_backward = _active.dense_tanh_backward
heads_forward = _active.heads_forward
heads_objective = _active.heads_objective
heads_backward = _active.heads_backward
# numpy's vectorized log beats the scalar libm loop, so this one stays numpy.
beta_log_pdf = _pykernels.beta_log_pdf
