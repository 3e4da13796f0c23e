"""OKS-based AP/AR and PCKh.

Matching is one prediction per ground-truth instance (top-down crops share an
id with their annotation), so there is no greedy cross-instance assignment.
That agrees with the official COCO evaluator only when each image holds a
single person.
"""
import dataclasses
import math

import numpy as np

from .codec import KeypointSet, coco17

DEFAULT_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def coco_k():
    """Per-joint OKS falloff constants for COCO-17 (twice the annotation sigmas)."""
    return 2.0 * np.asarray(coco17()["sigmas"])


class NoLabeledJointsError(ValueError):
    """OKS is undefined when the ground truth has no labeled joint."""


def oks(pred, gt, area, per_joint_k=None):
    """Mean over labeled ground-truth joints of ``exp(-d^2 / (2 * area * k^2))``."""
    if area <= 0:
        raise ValueError(f"area must be positive, got {area}")
    k = coco_k() if per_joint_k is None else np.asarray(per_joint_k, dtype=np.float64)
    if len(k) != len(gt):
        raise ValueError(f"{len(k)} OKS constants for {len(gt)} joints")
    mask = gt.visibility > 0
    if not mask.any():
        raise NoLabeledJointsError("ground truth has no labeled joints")
    with np.errstate(invalid="ignore", over="ignore"):
        d2 = np.sum((pred.coords[mask] - gt.coords[mask]) ** 2, axis=1)
        e = np.exp(-d2 / (2.0 * area * k[mask] ** 2))
    e = np.where(np.isnan(e), 0.0, e)
    return float(np.mean(e))


@dataclasses.dataclass
class EvalInstance:
    id: int
    gt: KeypointSet
    area: float
    pred: KeypointSet | None = None
    score: float = 1.0
    bbox: tuple | None = None

    def __post_init__(self):
        if not self.area > 0:
            raise ValueError(f"instance {self.id}: area must be positive, got {self.area}")
        if not math.isfinite(self.score):
            raise ValueError(f"instance {self.id}: score must be finite")

    @property
    def labeled(self):
        return bool(np.any(self.gt.visibility > 0))


@dataclasses.dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ar: float
    thresholds: tuple
    precision: tuple
    recall: tuple
    oks: dict

    def summary(self):
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AR": self.ar}

    def to_text(self):
        lines = [f"{k}={v:.6f}" for k, v in self.summary().items()]
        lines += [f"AP@{t:.2f}={p:.6f}" for t, p in zip(self.thresholds, self.precision)]
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            **self.summary(),
            "thresholds": [float(t) for t in self.thresholds],
            "precision": [float(p) for p in self.precision],
            "recall": [float(r) for r in self.recall],
        }


def _interpolated_ap(hits, num_gt):
    """101-point interpolated precision for ranked hit flags."""
    if num_gt == 0 or len(hits) == 0:
        return 0.0, 0.0
    ctp = np.cumsum(hits)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(hits), envelope[np.minimum(idx, len(hits) - 1)], 0.0)
    return math.fsum(q) / len(RECALL_POINTS), float(recall[-1])


def evaluate(instances, thresholds=DEFAULT_THRESHOLDS, per_joint_k=None):
    """AP/AR over OKS thresholds; a prediction is a hit at ``t`` iff its OKS >= t.

    Instances without labeled joints are ignored. Predictions are ranked by
    descending score, ties in input order.
    """
    ids = [inst.id for inst in instances]
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise ValueError(f"duplicate instance id {dup}")
    valid = [inst for inst in instances if inst.labeled]
    num_gt = len(valid)
    preds = [inst for inst in valid if inst.pred is not None]
    scores = {inst.id: oks(inst.pred, inst.gt, inst.area, per_joint_k) for inst in preds}
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ranked = np.array([scores[preds[i].id] for i in order])

    thresholds = tuple(float(t) for t in thresholds)
    precision, recall = [], []
    for t in thresholds:
        ap_t, rec_t = _interpolated_ap((ranked >= t).astype(np.int64), num_gt)
        precision.append(ap_t)
        recall.append(rec_t)

    def at(t):
        for tt, p in zip(thresholds, precision):
            if abs(tt - t) < 1e-9:
                return p
        return float("nan")

    return EvalResult(
        ap=math.fsum(precision) / len(thresholds) if thresholds else 0.0,
        ap50=at(0.5),
        ap75=at(0.75),
        ar=math.fsum(recall) / len(thresholds) if thresholds else 0.0,
        thresholds=thresholds,
        precision=tuple(precision),
        recall=tuple(recall),
        oks=scores,
    )


@dataclasses.dataclass
class PCKhResult:
    per_joint: np.ndarray
    mean: float


def pckh(preds, gts, head_sizes, alpha=0.5, visibility=None):
    """Fraction of labeled joints within ``alpha * head_size`` (boundary counts as correct).

    ``preds`` and ``gts`` are N x J x 2 arrays or sequences of
    :class:`KeypointSet`; with arrays, ``visibility`` (N x J) marks labeled
    joints (default: all).
    """
    if len(gts) and isinstance(gts[0], KeypointSet):
        visibility = np.stack([g.visibility for g in gts])
        gts = np.stack([g.coords for g in gts])
    if len(preds) and isinstance(preds[0], KeypointSet):
        preds = np.stack([p.coords for p in preds])
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    heads = np.asarray(head_sizes, dtype=np.float64).reshape(-1)
    if np.any(~(heads > 0)):
        raise ValueError("head sizes must be positive")
    labeled = np.ones(gts.shape[:2], dtype=bool) if visibility is None else np.asarray(visibility) > 0
    dist = np.linalg.norm(preds - gts, axis=-1)
    hit = (dist <= alpha * heads[:, None]) & labeled
    counts = labeled.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(counts > 0, hit.sum(axis=0) / np.maximum(counts, 1), np.nan)
    total = labeled.sum()
    return PCKhResult(per_joint, float(hit.sum() / total) if total else float("nan"))
