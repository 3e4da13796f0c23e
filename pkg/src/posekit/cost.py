"""Exact parameter and multiply-accumulate counts for deconvolution heads.

Everything here is integer or :class:`fractions.Fraction` arithmetic. MACs are
multiply-accumulates; FLOPs are reported as ``2 * MACs``. Bias and
normalization parameters never enter the head formulas and are kept in their
own bucket by :func:`count_instantiated`.
"""
import dataclasses
import json
from fractions import Fraction

from .nn import BatchNorm2d, Conv2d, Deconv2d


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    kernel: int
    c_in: int
    c_out: int
    out_h: int
    out_w: int

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")


@dataclasses.dataclass(frozen=True)
class HeadSpec:
    layers: tuple
    variant: str = "lightweight"

    @classmethod
    def uniform(cls, num_layers, kernel, channels, first_hw, variant="lightweight"):
        """``num_layers`` stride-2 stages with equal channels, starting from output size ``first_hw``."""
        h, w = first_hw
        layers = tuple(LayerSpec(kernel, channels, channels, h * 2**i, w * 2**i) for i in range(num_layers))
        return cls(layers, variant)


def head_spec(config, variant=None):
    """Head layers of a :class:`~posekit.model.ModelConfig`."""
    h = config.input_size[0] // config.output_stride
    w = config.input_size[1] // config.output_stride
    chans = config.channels
    layers = []
    cin = chans[0] if chans else 0
    for cout in chans:
        h, w = 2 * h, 2 * w
        layers.append(LayerSpec(config.head_kernel, cin, cout, h, w))
        cin = cout
    return HeadSpec(tuple(layers), variant or config.head_variant)


def standard_head_params(spec):
    return sum(l.kernel**2 * l.c_in * l.c_out for l in spec.layers)


def standard_head_macs(spec):
    return sum(l.kernel**2 * l.c_in * l.c_out * l.out_w * l.out_h for l in spec.layers)


def lightweight_head_params(spec):
    return sum(l.kernel**2 * l.c_in + l.c_in * l.c_out for l in spec.layers)


def lightweight_head_macs(spec):
    return sum((l.kernel**2 * l.c_in + l.c_in * l.c_out) * l.out_w * l.out_h for l in spec.layers)


def head_params(spec):
    return lightweight_head_params(spec) if spec.variant == "lightweight" else standard_head_params(spec)


def head_macs(spec):
    return lightweight_head_macs(spec) if spec.variant == "lightweight" else standard_head_macs(spec)


def reduction_ratio(spec):
    """Lightweight over standard head MACs, exactly."""
    std = standard_head_macs(spec)
    if std == 0:
        raise ValueError("empty head has no reduction ratio")
    return Fraction(lightweight_head_macs(spec), std)


# ---------------------------------------------------------------------------
# instantiated models


@dataclasses.dataclass
class LayerCost:
    name: str
    kind: str
    bucket: str
    weights: int
    biases: int
    macs: int


@dataclasses.dataclass
class CostReport:
    per_layer: list
    ratio: Fraction | None = None

    @property
    def params_total(self):
        return sum(l.weights + l.biases for l in self.per_layer)

    @property
    def macs_total(self):
        return sum(l.macs for l in self.per_layer)

    def bucket_weights(self, bucket):
        return sum(l.weights for l in self.per_layer if l.bucket == bucket)

    def bucket_macs(self, bucket):
        return sum(l.macs for l in self.per_layer if l.bucket == bucket)

    @property
    def bias_norm_params(self):
        return sum(l.biases for l in self.per_layer)

    @property
    def buckets(self):
        names = []
        for l in self.per_layer:
            if l.bucket not in names:
                names.append(l.bucket)
        return names

    def summary(self):
        out = {}
        for b in self.buckets:
            out[f"{b}.weights"] = self.bucket_weights(b)
            out[f"{b}.macs"] = self.bucket_macs(b)
        out["bias_norm.params"] = self.bias_norm_params
        out["params_total"] = self.params_total
        out["macs_total"] = self.macs_total
        out["flops_total"] = 2 * self.macs_total
        if self.ratio is not None:
            out["ratio"] = f"{self.ratio.numerator}/{self.ratio.denominator}"
        return out

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.summary().items())

    def to_json(self):
        """JSON document with every integer rendered as a decimal string."""
        doc = {k: str(v) for k, v in self.summary().items()}
        doc["per_layer"] = [
            {"name": l.name, "kind": l.kind, "bucket": l.bucket,
             "weights": str(l.weights), "biases": str(l.biases), "macs": str(l.macs)}
            for l in self.per_layer
        ]
        return json.dumps(doc, indent=2)


def _bucket(path):
    parts = path.split(".")
    if parts[0] == "head":
        return "attention" if "attention" in parts else "head"
    return parts[0]


def count_instantiated(model):
    """Walk the model's actual tensors; conv/deconv weights per bucket, MACs from traced shapes.

    Buckets: ``backbone``, ``compress``, ``head`` (the formula-covered
    deconv/pointwise weights), ``attention``, ``final``. Biases and norm
    scales/shifts are counted under ``biases``.
    """
    out_sizes = {id(layer): out_hw for layer, _, out_hw in model.describe()}
    rows = []
    for path, mod in model.named_modules():
        if isinstance(mod, (Conv2d, Deconv2d)):
            bias = mod.bias.data.size if mod.bias is not None else 0
            rows.append(LayerCost(path, mod.kind, _bucket(path), mod.weight.data.size, bias,
                                  mod.macs(out_sizes[id(mod)])))
        elif isinstance(mod, BatchNorm2d):
            rows.append(LayerCost(path, mod.kind, _bucket(path), 0,
                                  mod.weight.data.size + mod.bias.data.size, 0))
    spec = head_spec(model.config)
    ratio = reduction_ratio(spec) if spec.layers else None
    return CostReport(rows, ratio)


def formula_report(spec):
    """Per-layer formula counts for ``spec`` in its own variant."""
    rows = []
    for i, l in enumerate(spec.layers):
        hw = l.out_h * l.out_w
        if spec.variant == "lightweight":
            rows.append(LayerCost(f"head.{i}.deconv", "deconv", "head", l.kernel**2 * l.c_in, 0,
                                  l.kernel**2 * l.c_in * hw))
            rows.append(LayerCost(f"head.{i}.pointwise", "conv", "head", l.c_in * l.c_out, 0,
                                  l.c_in * l.c_out * hw))
        else:
            rows.append(LayerCost(f"head.{i}.deconv", "deconv", "head", l.kernel**2 * l.c_in * l.c_out, 0,
                                  l.kernel**2 * l.c_in * l.c_out * hw))
    return CostReport(rows, reduction_ratio(spec) if spec.layers else None)
