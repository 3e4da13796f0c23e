"""Layers with named parameters, train/eval modes, and optional per-layer timing."""
import contextlib
import time

import numpy as np

from . import tensor as T
from .tensor import Parameter

_timings = None


@contextlib.contextmanager
def record_layer_times():
    """Collect wall time per leaf layer for every forward call in the block.

    Yields a dict ``{layer_path: seconds}`` that fills as layers run.
    """
    global _timings
    prev = _timings
    _timings = {}
    try:
        yield _timings
    finally:
        _timings = prev


class Module:
    def __init__(self):
        self.training = True
        self.path = ""

    def __call__(self, *args):
        if _timings is None or self.children():
            return self.forward(*args)
        start = time.perf_counter()
        out = self.forward(*args)
        _timings[self.path] = _timings.get(self.path, 0.0) + time.perf_counter() - start
        return out

    def forward(self, *args):
        raise NotImplementedError

    def children(self):
        out = []
        for k, v in vars(self).items():
            if isinstance(v, Module):
                out.append((k, v))
            elif isinstance(v, ModuleList):
                out.extend((f"{k}.{i}", m) for i, m in enumerate(v))
        return out

    def local_parameters(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Parameter)]

    def local_buffers(self):
        return []

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for name, p in mod.local_parameters():
                yield (f"{prefix}.{name}" if prefix else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name, b in mod.local_buffers():
                yield (f"{prefix}.{name}" if prefix else name), b

    def assign_paths(self):
        for prefix, mod in self.named_modules():
            mod.path = prefix
            for name, p in mod.local_parameters():
                p.name = f"{prefix}.{name}" if prefix else name
        return self

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)


class ModuleList(list):
    pass


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    kind = "conv"

    def __init__(self, rng, cin, cout, kernel=1, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cout, cin // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def local_parameters(self):
        return [(k, v) for k, v in (("weight", self.weight), ("bias", self.bias)) if v is not None]

    def out_hw(self, hw):
        h, w = hw
        return ((h + 2 * self.padding - self.kernel) // self.stride + 1,
                (w + 2 * self.padding - self.kernel) // self.stride + 1)

    def macs(self, out_hw):
        return self.cout * (self.cin // self.groups) * self.kernel**2 * out_hw[0] * out_hw[1]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Deconv2d(Module):
    """Transposed convolution; ``groups == cin == cout`` makes it depthwise.

    MACs are counted per output pixel (kernel area x cin/groups x cout), the
    zero-inserted-input view of a transposed convolution.
    """

    kind = "deconv"

    def __init__(self, rng, cin, cout, kernel=4, stride=2, padding=1, groups=1, bias=False):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cout // groups * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cin, cout // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def local_parameters(self):
        return [(k, v) for k, v in (("weight", self.weight), ("bias", self.bias)) if v is not None]

    def out_hw(self, hw):
        h, w = hw
        return ((h - 1) * self.stride - 2 * self.padding + self.kernel,
                (w - 1) * self.stride - 2 * self.padding + self.kernel)

    def macs(self, out_hw):
        return self.kernel**2 * (self.cin // self.groups) * self.cout * out_hw[0] * out_hw[1]

    def forward(self, x):
        return T.deconv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    kind = "norm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def local_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)
