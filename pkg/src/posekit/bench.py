"""Inference timing harness.

Each round runs the optional pre-processing callable outside the timed
region, then times the forward call alone with a monotonic clock. The first
``warmup`` rounds are discarded.
"""
import dataclasses
import time

import numpy as np

from . import kernels
from . import tensor as T
from .nn import record_layer_times


@dataclasses.dataclass
class BenchReport:
    rounds: int
    warmup: int
    backend: str
    input_shape: tuple
    times: list
    layer_seconds: dict

    @property
    def iterations(self):
        return len(self.times)

    @property
    def mean_fps(self):
        return len(self.times) / sum(self.times)

    @property
    def min_fps(self):
        return 1.0 / max(self.times)

    @property
    def max_fps(self):
        return 1.0 / min(self.times)

    def layer_shares(self):
        """Fraction of timed forward time per leaf layer, plus ``other`` for glue code."""
        total = sum(self.times)
        shares = {k: v / total for k, v in self.layer_seconds.items()}
        shares["other"] = max(0.0, 1.0 - sum(shares.values()))
        return shares

    def to_text(self, top=None):
        lines = [
            f"backend={self.backend}",
            f"input_shape={'x'.join(map(str, self.input_shape))}",
            f"rounds={self.rounds}",
            f"warmup={self.warmup}",
            f"timed_iterations={self.iterations}",
            f"mean_fps={self.mean_fps:.4f}",
            f"min_fps={self.min_fps:.4f}",
            f"max_fps={self.max_fps:.4f}",
            f"mean_ms={1000.0 * sum(self.times) / len(self.times):.4f}",
        ]
        shares = sorted(self.layer_shares().items(), key=lambda kv: -kv[1])
        if top is not None:
            shares = shares[:top]
        lines += [f"share[{k}]={v:.4f}" for k, v in shares]
        return "\n".join(lines) + "\n"


def run_bench(model, inputs, rounds=50, warmup=5, preprocess=None, backend=None):
    """Time ``rounds`` single forward passes; returns a :class:`BenchReport`.

    ``preprocess(inputs) -> batch`` runs before each round, untimed.
    Per-layer times are accumulated over the timed rounds only.
    """
    if rounds < 1 or not 0 <= warmup < rounds:
        raise ValueError(f"need rounds >= 1 and 0 <= warmup < rounds, got {rounds}, {warmup}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[None]
    model.eval()
    layer_seconds = {}
    times = []
    with kernels.using(backend or kernels.backend_name()), T.no_grad():
        name = kernels.backend_name()
        for i in range(rounds):
            batch = preprocess(inputs) if preprocess is not None else inputs
            if i < warmup:
                model(batch)
                continue
            with record_layer_times() as layers:
                start = time.perf_counter()
                model(batch)
                times.append(time.perf_counter() - start)
            for k, v in layers.items():
                layer_seconds[k] = layer_seconds.get(k, 0.0) + v
    return BenchReport(rounds, warmup, name, tuple(inputs.shape), times, layer_seconds)
