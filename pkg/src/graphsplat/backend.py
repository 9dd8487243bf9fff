"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``GRAPHSPLAT_BACKEND=python`` to force the fallback.
"""
import contextlib
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_IMPLS = {"python": _fallback}
if _compiled is not None:
    _IMPLS["compiled"] = _compiled

_requested = os.environ.get("GRAPHSPLAT_BACKEND", "").strip().lower()
if _requested and _requested not in _IMPLS:
    raise ImportError(f"GRAPHSPLAT_BACKEND={_requested!r} is not available "
                      f"(have {sorted(_IMPLS)})")
_active = _requested or ("compiled" if _compiled is not None else "python")


def available():
    return sorted(_IMPLS)


def active():
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {available()}")
    _active = name


@contextlib.contextmanager
def use_backend(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _f64(a, ndim=None):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def render_forward(origins, dirs, ncols, boxes, pos, prec6, rho):
    return _IMPLS[_active].render_forward(_f64(origins), _f64(dirs), int(ncols), _i64(boxes),
                                          _f64(pos), _f64(prec6), _f64(rho))


def render_backward(origins, dirs, ncols, boxes, pos, prec6, rho, dl_dimg):
    return _IMPLS[_active].render_backward(_f64(origins), _f64(dirs), int(ncols), _i64(boxes),
                                           _f64(pos), _f64(prec6), _f64(rho), _f64(dl_dimg))


def voxel_forward(tile_ptr, tile_kernels, tile_boxes, boxes, origin, spacing, dims,
                  pos, prec6, rho, r2):
    return _IMPLS[_active].voxel_forward(_i64(tile_ptr), _i64(tile_kernels), _i64(tile_boxes),
                                         _i64(boxes), _f64(origin), _f64(spacing),
                                         tuple(int(d) for d in dims), _f64(pos), _f64(prec6),
                                         _f64(rho), float(r2))


def voxel_backward(boxes, origin, spacing, dl_dvol, pos, prec6, rho, r2):
    return _IMPLS[_active].voxel_backward(_i64(boxes), _f64(origin), _f64(spacing),
                                          _f64(dl_dvol), _f64(pos), _f64(prec6), _f64(rho),
                                          float(r2))


def march_rays(vol, origin, spacing, starts, dirs, t0, nsteps, steps):
    return _IMPLS[_active].march_rays(_f64(vol), _f64(origin), _f64(spacing), _f64(starts),
                                      _f64(dirs), _f64(t0), _i64(nsteps), _f64(steps))
