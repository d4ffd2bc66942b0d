"""Hot kernels with a compiled core and a pure-numpy fallback.

The compiled extension (Cython) is selected automatically when importable;
set FRUITVOX_KERNELS=numpy or =compiled to force a backend. Both backends
implement the same contracts:

- trilinear_gather(values, res, lo, hi, pts) -> (out, inside)
- trilinear_scatter(buf, res, lo, hi, pts, upstream) -> None  (in-place add)
- adam_step(param, grad, m, v, t, lr, beta1, beta2, eps) -> None (in-place)

Grids are flat (rx*ry*rz, channels) float64 arrays in x-fastest voxel order.
`python -m fruitvox.bench` compares the two backends.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import numpy_backend

_requested = os.environ.get("FRUITVOX_KERNELS", "auto").lower()

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from . import _gridops as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "FRUITVOX_KERNELS=compiled but the fruitvox.kernels._gridops "
                "extension is not built; run `pip install -e .` or "
                "`python setup.py build_ext --inplace`."
            )
        _impl = None
if _impl is None:
    _impl = numpy_backend

BACKEND = _impl.NAME


def available_backends():
    names = [numpy_backend.NAME]
    try:
        from . import _gridops

        names.append(_gridops.NAME)
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == numpy_backend.NAME:
        return numpy_backend
    if name == "compiled":
        from . import _gridops

        return _gridops
    raise ValueError(f"unknown kernel backend {name!r}")


@contextmanager
def use_backend(name):
    """Temporarily route the kernel functions through a specific backend."""
    global _impl, BACKEND
    previous = _impl
    _impl = get_backend(name)
    BACKEND = _impl.NAME
    try:
        yield
    finally:
        _impl = previous
        BACKEND = _impl.NAME


def _as_c64(a, ndim):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {a.shape}")
    return a


def trilinear_gather(values, res, lo, hi, pts):
    values = _as_c64(values, 2)
    pts = _as_c64(pts, 2)
    return _impl.trilinear_gather(values, tuple(int(r) for r in res),
                                  tuple(map(float, lo)), tuple(map(float, hi)), pts)


def trilinear_scatter(buf, res, lo, hi, pts, upstream):
    if not (buf.flags.c_contiguous and buf.dtype == np.float64):
        raise ValueError("scatter buffer must be C-contiguous float64")
    pts = _as_c64(pts, 2)
    upstream = _as_c64(upstream, 2)
    _impl.trilinear_scatter(buf, tuple(int(r) for r in res),
                            tuple(map(float, lo)), tuple(map(float, hi)),
                            pts, upstream)


def field_forward(raw, res, lo, hi, pts):
    """Fused gather + activations: (activated (P, 5), inside (P,))."""
    raw = _as_c64(raw, 2)
    pts = _as_c64(pts, 2)
    return _impl.field_forward(raw, tuple(int(r) for r in res),
                               tuple(map(float, lo)), tuple(map(float, hi)), pts)


def field_backward(buf, res, lo, hi, pts, act, upstream_act):
    """Fused activation chain + scatter of activated-space gradients."""
    if not (buf.flags.c_contiguous and buf.dtype == np.float64):
        raise ValueError("gradient buffer must be C-contiguous float64")
    pts = _as_c64(pts, 2)
    act = _as_c64(act, 2)
    upstream_act = _as_c64(upstream_act, 2)
    _impl.field_backward(buf, tuple(int(r) for r in res),
                         tuple(map(float, lo)), tuple(map(float, hi)),
                         pts, act, upstream_act)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    if _impl is numpy_backend:
        numpy_backend.adam_step(param, grad, m, v, t, lr, beta1, beta2, eps)
        return
    # the compiled kernel operates on flat views; these arrays are always
    # C-contiguous float64 by construction
    _impl.adam_step(param.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
                    m.reshape(-1), v.reshape(-1), int(t),
                    float(lr), float(beta1), float(beta2), float(eps))
