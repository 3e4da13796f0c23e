"""Independent reference implementations used as test oracles.

Nothing here imports the package's kernels or metric code: convolutions are
explicit loops, the transposed convolution scatters each input pixel, and AP
is computed by exhaustive search over ranks with exact rationals.
"""
import math
from fractions import Fraction

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            g = co // cout_g
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin_g):
                        for ky in range(kh):
                            iy = oy * stride - padding + ky
                            if not 0 <= iy < h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride - padding + kx
                                if 0 <= ix < wd:
                                    acc += x[bi, g * cin_g + ci, iy, ix] * w[co, ci, ky, kx]
                    out[bi, co, oy, ox] = acc
    return out


def deconv2d_scatter(x, w, b=None, stride=1, padding=0, groups=1):
    """Transposed convolution as a scatter: every input pixel adds a scaled kernel copy."""
    n, cin, h, wd = x.shape
    _, cout_g, kh, kw = w.shape
    cin_g = cin // groups
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    full = np.zeros((n, cout_g * groups, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for bi in range(n):
        for ci in range(cin):
            g = ci // cin_g
            for iy in range(h):
                for ix in range(wd):
                    v = x[bi, ci, iy, ix]
                    for co in range(cout_g):
                        full[bi, g * cout_g + co, iy * stride:iy * stride + kh, ix * stride:ix * stride + kw] += v * w[ci, co]
    out = full[:, :, padding:padding + ho, padding:padding + wo].copy()
    if b is not None:
        out += np.asarray(b).reshape(1, -1, 1, 1)
    return out


def hard_sigmoid(v):
    return min(max((v + 3.0) / 6.0, 0.0), 1.0)


def oks_loop(pred, gt, vis, area, k):
    vals = []
    for (px, py), (gx, gy), v, kj in zip(pred, gt, vis, k):
        if v > 0:
            d2 = (px - gx) ** 2 + (py - gy) ** 2
            vals.append(math.exp(-d2 / (2.0 * area * kj * kj)))
    return sum(vals) / len(vals)


def ap_bruteforce(oks_values, scores, num_gt, thresholds, recall_points):
    """Mean over thresholds of 101-point interpolated precision, by exhaustive search.

    ``oks_values``/``scores`` describe the predictions; ``num_gt`` counts
    ground-truth instances. Precision is an exact rational; recall is the
    float ``tp / num_gt`` compared against the float recall grid, as in the
    reference COCO evaluator. Each interpolated value is
    ``max{precision_k : recall_k >= r}``.
    """
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    per_t, rec_t = [], []
    for t in thresholds:
        hits = [1 if oks_values[i] >= t else 0 for i in order]
        prec, rec = [], []
        tp = 0
        for k, hit in enumerate(hits, 1):
            tp += hit
            prec.append(Fraction(tp, k))
            rec.append(tp / num_gt)
        q = []
        for r in recall_points:
            r = float(r)
            cands = [p for p, rc in zip(prec, rec) if rc >= r]
            q.append(float(max(cands)) if cands else 0.0)
        per_t.append(math.fsum(q) / len(recall_points) if hits else 0.0)
        rec_t.append(float(rec[-1]) if rec else 0.0)
    return math.fsum(per_t) / len(thresholds), per_t, math.fsum(rec_t) / len(thresholds)
