"""Compare the compiled and numpy convolution kernels.

Times each kernel on the layer shapes of the default model at batch 1 (and
a small training batch), then the full model forward under each backend.
Usage: ``python3 benchmarks/bench_kernels.py [--repeat N] [--json]``
"""
import argparse
import json
import time

import numpy as np

from posekit import _kernels_py, kernels
from posekit.bench import run_bench
from posekit.model import ModelConfig, build_model

try:
    from posekit import _kernels as _kernels_ext
except ImportError:
    _kernels_ext = None

# name, N, Cin, H, W, Cout, k, stride, padding, groups
CASES = [
    ("backbone 3x3/2", 1, 16, 128, 96, 24, 3, 2, 1, 1),
    ("depthwise 4x4/2 (deconv)", 1, 256, 32, 24, 256, 4, 2, 1, 256),
    ("attention 3x3 1->1", 1, 1, 64, 48, 1, 3, 1, 1, 1),
    ("pointwise 256->256", 1, 256, 64, 48, 256, 1, 1, 0, 1),
    ("toy 3x3/2 batch 8", 8, 16, 16, 16, 32, 3, 2, 1, 1),
]


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    impls = {"python": _kernels_py}
    if _kernels_ext is not None:
        impls["cython"] = _kernels_ext
    rows = []
    for name, n, cin, h, w, cout, k, s, p, g in CASES:
        x = rng.normal(size=(n, cin, h, w))
        wt = rng.normal(size=(cout, cin // g, k, k))
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        gy = rng.normal(size=(n, cout, ho, wo))
        for op, call in (
            ("forward", lambda m: m.conv2d_forward(x, wt, s, p, g)),
            ("grad_input", lambda m: m.conv2d_grad_input(gy, wt, h, w, s, p, g)),
            ("grad_weight", lambda m: m.conv2d_grad_weight(x, gy, k, k, s, p, g)),
        ):
            row = {"case": name, "op": op}
            for label, mod in impls.items():
                row[label] = _time(lambda: call(mod), repeat)
            rows.append(row)
    return rows


def model_rows(rounds):
    model = build_model(ModelConfig())
    x = np.random.default_rng(0).random((1, 3, 256, 192))
    out = {}
    for name in kernels.available():
        out[name] = run_bench(model, x, rounds=rounds, warmup=min(5, rounds - 1), backend=name).mean_fps
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rows = kernel_rows(args.repeat)
    fps = model_rows(args.rounds)
    if args.json:
        print(json.dumps({"kernels": rows, "model_fps": fps}, indent=2))
        return
    have_ext = _kernels_ext is not None
    print(f"{'case':26s} {'op':12s} {'numpy ms':>10s}" + (f" {'cython ms':>10s} {'speedup':>8s}" if have_ext else ""))
    for r in rows:
        line = f"{r['case']:26s} {r['op']:12s} {1000 * r['python']:10.3f}"
        if have_ext:
            line += f" {1000 * r['cython']:10.3f} {r['python'] / r['cython']:8.2f}"
        print(line)
    print()
    print("full model, 1x3x256x192, routed kernels (dense 1x1 always uses matmul):")
    for name, v in fps.items():
        print(f"  {name:8s} {v:8.2f} fps")


if __name__ == "__main__":
    main()
