"""Dense float64 tensors with reverse-mode gradients.

Only the operations the pose model needs are provided: grouped convolution and
its transpose, global average pooling, hard sigmoid, ReLU, batch
normalization, broadcasting add/mul, and reductions. Every op records a
closure that maps the output gradient to input gradients; ``backward`` walks
the graph in reverse topological order.

Gradients are stored on leaf tensors only (tensors not produced by an op) and
accumulate across calls until ``zero_grad``.
"""
import contextlib
import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """A tensor dimension does not fit an operation.

    ``axis`` names the offending axis (e.g. ``"channel"``, ``"height"``).
    """

    def __init__(self, op, axis, message):
        self.op = op
        self.axis = axis
        super().__init__(f"{op}: {axis} axis: {message}")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array with an optional gradient buffer.

    Feature maps are 4-D in (N, C, H, W) order; losses are 0-d.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable tensor carrying its Adam moment buffers."""

    __slots__ = ("first_moment", "second_moment", "step_count")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.first_moment = np.zeros_like(self.data)
        self.second_moment = np.zeros_like(self.data)
        self.step_count = 0


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# convolution family


def _check_nchw(op, t, what="input"):
    if t.ndim != 4:
        raise ShapeError(op, "rank", f"{what} must be 4-D (N, C, H, W), got shape {t.shape}")


def _check_conv_args(op, stride, padding, groups):
    if stride < 1:
        raise ShapeError(op, "stride", f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(op, "padding", f"padding must be >= 0, got {padding}")
    if groups < 1:
        raise ShapeError(op, "groups", f"groups must be >= 1, got {groups}")


def _bias_add(op, out, bias, channels):
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (channels,):
        raise ShapeError(op, "bias", f"expected shape ({channels},), got {bias.shape}")
    return add(out, reshape(bias, (1, channels, 1, 1)))


def conv2d(input, kernel, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation.

    ``kernel`` has shape (C_out, C_in / groups, K_h, K_w). ``groups == C_in ==
    C_out`` is a depthwise convolution, a 1x1 kernel with ``groups == 1`` a
    pointwise one.
    """
    op = "conv2d"
    x, w = as_tensor(input), as_tensor(kernel)
    _check_nchw(op, x)
    _check_nchw(op, w, "kernel")
    _check_conv_args(op, stride, padding, groups)
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups:
        raise ShapeError(op, "channel", f"input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(op, "channel", f"output channels {cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(op, "channel", f"kernel expects {cin_g * groups} input channels, input has {cin}")
    if h + 2 * padding < kh:
        raise ShapeError(op, "height", f"padded height {h + 2 * padding} smaller than kernel {kh}")
    if wd + 2 * padding < kw:
        raise ShapeError(op, "width", f"padded width {wd + 2 * padding} smaller than kernel {kw}")

    out = kernels.conv2d_forward(x.data, w.data, stride, padding, groups)

    def _backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_grad_input(g, w.data, h, wd, stride, padding, groups) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(x.data, g, kh, kw, stride, padding, groups) if w.requires_grad else None
        return gx, gw

    return _bias_add(op, _make(out, (x, w), _backward), bias, cout)


def deconv2d(input, kernel, bias=None, stride=1, padding=0, groups=1):
    """Transposed convolution: the input-gradient of ``conv2d`` used as a forward op.

    ``kernel`` has shape (C_in, C_out / groups, K_h, K_w); output spatial size
    is ``(in - 1) * stride - 2 * padding + K``.
    """
    op = "deconv2d"
    x, w = as_tensor(input), as_tensor(kernel)
    _check_nchw(op, x)
    _check_nchw(op, w, "kernel")
    _check_conv_args(op, stride, padding, groups)
    n, cin, h, wd = x.shape
    kcin, cout_g, kh, kw = w.shape
    if cin % groups:
        raise ShapeError(op, "channel", f"input channels {cin} not divisible by groups={groups}")
    if kcin != cin:
        raise ShapeError(op, "channel", f"kernel expects {kcin} input channels, input has {cin}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1:
        raise ShapeError(op, "height", f"output height {ho} is not positive")
    if wo < 1:
        raise ShapeError(op, "width", f"output width {wo} is not positive")

    out = kernels.conv2d_grad_input(x.data, w.data, ho, wo, stride, padding, groups)

    def _backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_forward(g, w.data, stride, padding, groups) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(g, x.data, kh, kw, stride, padding, groups) if w.requires_grad else None
        return gx, gw

    return _bias_add(op, _make(out, (x, w), _backward), bias, cout_g * groups)


# ---------------------------------------------------------------------------
# pointwise and reductions


def global_avg_pool(input):
    """Mean over the spatial axes, keeping them as size 1."""
    x = as_tensor(input)
    _check_nchw("global_avg_pool", x)
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool", "height" if h < 1 else "width", "spatial size must be >= 1")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _make(out, (x,), _backward)


def hard_sigmoid(input):
    """clamp((x + 3) / 6, 0, 1)."""
    x = as_tensor(input)
    out = np.clip((x.data + 3.0) / 6.0, 0.0, 1.0)

    def _backward(g):
        inside = (x.data > -3.0) & (x.data < 3.0)
        return (g * inside / 6.0,)

    return _make(out, (x,), _backward)


def relu(input):
    x = as_tensor(input)
    out = np.maximum(x.data, 0.0)

    def _backward(g):
        return (g * (x.data > 0.0),)

    return _make(out, (x,), _backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(op, "rank", f"shapes {a.shape} and {b.shape} differ in rank")
    names = ("batch", "channel", "height", "width") if a.ndim == 4 else tuple(f"dim{i}" for i in range(a.ndim))
    for name, sa, sb in zip(names, a.shape, b.shape):
        if sa != sb and sb != 1:
            raise ShapeError(op, name, f"cannot broadcast {b.shape} onto {a.shape}")


def elementwise(op_kind, a, b):
    """``add`` or ``mul`` with ``b`` broadcast onto ``a`` along its size-1 axes."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(op_kind, a, b)
    if op_kind == "add":
        out = a.data + b.data

        def _backward(g):
            return g, _unbroadcast(g, b.shape)

    elif op_kind == "mul":
        out = a.data * b.data

        def _backward(g):
            ga = g * b.data if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return _make(out, (a, b), _backward)


def add(a, b):
    return elementwise("add", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def _backward(g):
        return g, -_unbroadcast(g, b.shape)

    return _make(out, (a, b), _backward)


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)

    def _backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), _backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def _backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), _backward)


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def _backward(g):
        return (np.full(a.shape, g.item()),)

    return _make(np.asarray(a.data.sum()), (a,), _backward)


def mean(a):
    a = as_tensor(a)
    size = a.data.size

    def _backward(g):
        return (np.full(a.shape, g.item() / size),)

    return _make(np.asarray(a.data.mean()), (a,), _backward)


def batch_norm(input, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode normalizes with the batch statistics and updates the
    running buffers in place; in eval mode uses the running buffers.
    """
    x, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    _check_nchw("batch_norm", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", "channel", f"affine parameters must have shape ({c},)")
    gshape = (1, c, 1, 1)
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(gshape)) * inv_std.reshape(gshape)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(gshape)
            if training:
                gx = (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                ) * inv_std.reshape(gshape)
            else:
                gx = gxhat * inv_std.reshape(gshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), _backward)


# ---------------------------------------------------------------------------
# optimisation and checking


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Gradients are left for the caller to reset."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise ValueError(f"parameter {label} has no gradient")
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.first_moment *= beta1
        p.first_moment += (1.0 - beta1) * p.grad
        p.second_moment *= beta2
        p.second_moment += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.first_moment / (1.0 - beta1**t)
        v_hat = p.second_moment / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_check(fn, point, eps=1e-5, indices=None):
    """Largest relative gap between the backward gradient and central differences.

    ``fn`` maps ``point`` to a scalar tensor and must read ``point.data`` on
    every call, since coordinates are perturbed in place. ``indices`` limits
    the check to a subset of flat coordinates. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    saved = point.grad
    point.grad = None
    point.requires_grad = True
    out = fn(point)
    backward(out)
    analytic = point.grad.reshape(-1).copy() if point.grad is not None else np.zeros(point.data.size)
    point.grad = saved

    flat = point.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = fn(point).item()
            flat[idx] = orig - eps
            f_minus = fn(point).item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a))
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    return worst
