"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled extension is used when it imports cleanly; setting
``V2XFUSE_PURE_PYTHON=1`` forces the fallback.  ``BACKEND`` names the
active implementation.
"""

import os

import numpy as np

from . import _pykernels

_force_py = os.environ.get("V2XFUSE_PURE_PYTHON", "") not in ("", "0")

_ck = None
if not _force_py:
    try:
        from . import _ckernels as _ck
    except ImportError:
        _ck = None

BACKEND = "cython" if _ck is not None else "python"


def available_backends():
    return ("cython", "python") if _ck is not None else ("python",)


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _ck is None:
            raise RuntimeError("compiled kernels are not built")
        return _ck
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def _as_real(arr, dtype):
    return np.ascontiguousarray(arr, dtype=dtype)


def bilinear_forward(src, px, py, backend=None):
    """Zero-padded bilinear gather of ``src`` (C,H,W) at pixel coords ``px``, ``py``."""
    dt = src.dtype if src.dtype in (np.float32, np.float64) else np.float64
    return _impl(backend).bilinear_forward(_as_real(src, dt), _as_real(px, dt), _as_real(py, dt))


def bilinear_backward(src, px, py, gout, backend=None):
    """Returns (grad_src, grad_px, grad_py) for :func:`bilinear_forward`."""
    dt = src.dtype if src.dtype in (np.float32, np.float64) else np.float64
    return _impl(backend).bilinear_backward(
        _as_real(src, dt), _as_real(px, dt), _as_real(py, dt), _as_real(gout, dt)
    )


def rotated_iou_matrix(a, b, backend=None):
    """Pairwise BEV IoU; rows of ``a``/``b`` are (cx, cy, w, l, yaw)."""
    a = _as_real(np.reshape(a, (-1, 5)), np.float64)
    b = _as_real(np.reshape(b, (-1, 5)), np.float64)
    return _impl(backend).rotated_iou_matrix(a, b)


def _real_dtype(arr):
    return arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64


def depthwise_forward(xp, k, H, W, backend=None):
    """Per-channel correlation of padded ``xp`` (C,Hp,Wp) with ``k`` (C,kh,kw) -> (C,H,W)."""
    dt = _real_dtype(xp)
    return _impl(backend).depthwise_forward(_as_real(xp, dt), _as_real(k, dt), int(H), int(W))


def depthwise_backward(xp, k, g, backend=None):
    """Returns (grad_xp, grad_k) for :func:`depthwise_forward`."""
    dt = _real_dtype(xp)
    return _impl(backend).depthwise_backward(_as_real(xp, dt), _as_real(k, dt), _as_real(g, dt))


def im2col(xp, kh, kw, Ho, Wo, backend=None):
    """Stride-1 patches (C, kh, kw, Ho, Wo) of padded ``xp``."""
    dt = _real_dtype(xp)
    return _impl(backend).im2col(_as_real(xp, dt), int(kh), int(kw), int(Ho), int(Wo))


def col2im(cols, Hp, Wp, backend=None):
    """Adjoint of :func:`im2col`."""
    dt = _real_dtype(cols)
    return _impl(backend).col2im(_as_real(cols, dt), int(Hp), int(Wp))
