"""Heatmap regression losses.

The weighted loss scales each pixel's squared error by ``F(gt) + 1`` where
``F`` is a weight-generation function applied to the ground-truth heatmap,
so pixels near a keypoint count more than background.
"""
import warnings

import numpy as np

from . import tensor as T

WEIGHT_KINDS = {
    "none": lambda x: np.zeros_like(x),
    "x": lambda x: x,
    "2x": lambda x: 2.0 * x,
    "x2": lambda x: x * x,
    "exp": np.exp,
}


class AllJointsMaskedWarning(RuntimeWarning):
    """Every joint had weight 0; the loss is defined as 0."""


def _check_kind(kind):
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {kind!r}; choose from {', '.join(WEIGHT_KINDS)}")


def weight_gen_eval(kind, x):
    """Evaluate weight-generation function ``kind`` on values in [0, 1]."""
    _check_kind(kind)
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        raise ValueError(f"weight_gen_eval domain is [0, 1], got {x!r}")
    out = WEIGHT_KINDS[kind](arr)
    return float(out) if out.ndim == 0 else out


def _joint_weights(joint_weights, n, j):
    if joint_weights is None:
        return np.ones((n, j))
    w = np.asarray(joint_weights, dtype=np.float64)
    if w.shape == (j,):
        w = np.broadcast_to(w, (n, j))
    if w.shape != (n, j):
        raise ValueError(f"joint_weights must have shape ({j},) or ({n}, {j}), got {w.shape}")
    return w


def heatmap_weighting_loss(pred, gt, kind="x", joint_weights=None, normalize_pixels=True):
    """Mean over weighted joints of ``w_j * mean_pixels((F(gt) + 1) * (pred - gt)^2)``.

    ``pred`` is N x J x H x W (a :class:`Tensor` to differentiate through);
    ``gt`` is a constant of the same shape. ``joint_weights`` (J or N x J)
    masks joints; the average runs over (sample, joint) pairs with weight > 0.
    """
    _check_kind(kind)
    pred = T.as_tensor(pred)
    gt_arr = gt.data if isinstance(gt, T.Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_arr.shape or pred.ndim != 4:
        raise ValueError(f"pred {pred.shape} and gt {gt_arr.shape} must be equal N x J x H x W shapes")
    n, j, h, w = pred.shape
    jw = _joint_weights(joint_weights, n, j)
    active = int(np.count_nonzero(jw > 0))
    if active == 0:
        warnings.warn("all joints masked; loss is 0", AllJointsMaskedWarning, stacklevel=2)
        scale = np.zeros((n, j, 1, 1))
    else:
        per_pixel = 1.0 / (h * w) if normalize_pixels else 1.0
        scale = (jw * (per_pixel / active)).reshape(n, j, 1, 1)
    pixel_weights = (WEIGHT_KINDS[kind](gt_arr) + 1.0) * scale
    diff = T.sub(pred, gt_arr)
    return T.sum(T.mul(T.mul(diff, diff), pixel_weights))


def mse_loss(pred, gt, joint_weights=None, normalize_pixels=True):
    """Plain masked MSE: the weighted loss with ``F = 0``."""
    return heatmap_weighting_loss(pred, gt, "none", joint_weights, normalize_pixels)


def loss_by_name(name):
    """Loss callable for a config string: ``mse`` or one of the weight kinds."""
    if name == "mse":
        return mse_loss
    _check_kind(name)
    return lambda pred, gt, joint_weights=None: heatmap_weighting_loss(pred, gt, name, joint_weights)

