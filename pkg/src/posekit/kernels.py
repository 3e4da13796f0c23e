"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``POSEKIT_BACKEND=python`` (or ``cython``) before import to force one.

Dense 1x1 stride-1 convolutions are a plain matrix product, which BLAS does
better than the extension's loops, so the compiled backend routes them to the
fallback. Everything else (3x3, strided, grouped, depthwise) runs compiled.
"""
import contextlib
import os

from . import _kernels_py

_BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _kernels_ext
except ImportError:
    _kernels_ext = None
else:
    _BACKENDS["cython"] = _kernels_ext


def available():
    """Names of the importable backends, compiled first."""
    return [name for name in ("cython", "python") if name in _BACKENDS]


def _pick(name):
    if name in (None, "", "auto"):
        return _BACKENDS.get("cython", _kernels_py)
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available (have {available()})") from None


_active = _pick(os.environ.get("POSEKIT_BACKEND"))


def backend_name():
    return _active.NAME


def set_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    prev = _active.NAME
    _active = _pick(name)
    return prev


@contextlib.contextmanager
def using(name):
    prev = set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _impl(kh, kw, stride, padding, groups):
    if groups == 1 and kh == kw == 1 and stride == 1 and padding == 0:
        return _kernels_py
    return _active


def conv2d_forward(x, w, stride, padding, groups):
    return _impl(w.shape[2], w.shape[3], stride, padding, groups).conv2d_forward(x, w, stride, padding, groups)


def conv2d_grad_input(gy, w, in_h, in_w, stride, padding, groups):
    impl = _impl(w.shape[2], w.shape[3], stride, padding, groups)
    return impl.conv2d_grad_input(gy, w, in_h, in_w, stride, padding, groups)


def conv2d_grad_weight(x, gy, kh, kw, stride, padding, groups):
    return _impl(kh, kw, stride, padding, groups).conv2d_grad_weight(x, gy, kh, kw, stride, padding, groups)
