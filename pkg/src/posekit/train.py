"""Training and evaluation loops for the toy pipeline."""
import dataclasses
import math

import numpy as np

from . import config as cfgtext
from . import tensor as T
from .codec import (COCO_FLIP_PAIRS, KeypointSet, apply_affine_points, decode_batch, flip_average,
                    flip_heatmaps, gaussian_encode, input_to_heatmap)
from .config import ConfigError
from .losses import loss_by_name
from .metrics import EvalInstance, evaluate


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    base_lr: float = 5e-4
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (243, 286)
    warmup_iters: int = 500
    warmup_ratio: float = 0.001
    loss: str = "x"
    seed: int = 0
    flip_test: bool = True
    augment_flip: bool = False
    flip_pairs: tuple[tuple[int, int], ...] | None = None
    pck_threshold: float = 1.0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            raise ConfigError(f"milestones {self.milestones} must lie in [1, epochs)")
        if self.warmup_iters < 0 or not 0 < self.warmup_ratio <= 1:
            raise ConfigError("warm-up needs warmup_iters >= 0 and warmup_ratio in (0, 1]")
        try:
            loss_by_name(self.loss)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self):
        return cfgtext.dump(self)

    def pairs_for(self, num_joints):
        if self.flip_pairs is not None:
            return tuple(self.flip_pairs)
        return COCO_FLIP_PAIRS if num_joints == 17 else ()


def learning_rate(cfg, iteration, epoch):
    """Step decay at each milestone, times a linear warm-up over the first iterations.

    Warm-up factor: ``ratio + (1 - ratio) * t / warmup_iters`` for ``t < warmup_iters``.
    """
    lr = cfg.base_lr * cfg.lr_decay ** sum(1 for m in cfg.milestones if epoch >= m)
    if iteration < cfg.warmup_iters:
        lr *= cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * iteration / cfg.warmup_iters
    return lr


def heatmap_targets(keypoints, model_config, sigma):
    """Gaussian targets and joint weights from crop-space keypoints."""
    to_hm = input_to_heatmap(model_config.feature_stride)
    maps, weights = [], []
    for kps in keypoints:
        m, w = gaussian_encode(apply_affine_points(to_hm, kps, "heatmap"), model_config.output_size, sigma)
        maps.append(m)
        weights.append(w)
    return np.stack(maps), np.stack(weights)


def keypoint_errors(pred_hm_coords, keypoints, model_config):
    """Per-joint Euclidean error in heatmap pixels (NaN for unlabeled joints)."""
    to_hm = input_to_heatmap(model_config.feature_stride)
    gt = np.stack([to_hm.apply(k.coords) for k in keypoints])
    vis = np.stack([k.visibility for k in keypoints])
    err = np.linalg.norm(pred_hm_coords - gt, axis=-1)
    return np.where(vis > 0, err, np.nan)


def train(model, dataset, cfg, log=None):
    """Adam training on ``dataset``; returns per-epoch history dicts.

    Each history entry holds ``epoch``, ``loss`` (mean over batches),
    ``lr`` (last used), ``mean_error`` (heatmap pixels, from the training
    forward passes) and ``pck`` (fraction within ``cfg.pck_threshold``).
    """
    cfg.validate()
    mcfg = model.config
    rng = np.random.default_rng(cfg.seed)
    targets, weights = heatmap_targets(dataset.keypoints, mcfg, dataset.manifest.sigma)
    loss_fn = loss_by_name(cfg.loss)
    params = model.parameters()
    pairs = cfg.pairs_for(mcfg.num_joints)
    n = len(dataset)
    history = []
    iteration = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, preds = [], np.zeros((n, mcfg.num_joints, 2))
        flips = rng.random(n) < 0.5 if cfg.augment_flip else np.zeros(n, dtype=bool)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = dataset.inputs[idx].copy()
            y = targets[idx].copy()
            w = weights[idx].copy()
            f = flips[idx]
            if f.any():
                x[f] = x[f][..., ::-1]
                y[f] = flip_heatmaps(y[f], pairs)
                for a, b in pairs:
                    w[np.ix_(f, [a, b])] = w[np.ix_(f, [b, a])]
            lr = learning_rate(cfg, iteration, epoch)
            out = model(x)
            loss = loss_fn(out, y, w)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch} iteration {iteration}")
            T.zero_grad(params)
            loss.backward()
            T.adam_step(params, lr)
            losses.append(value)
            hm = out.data
            if f.any():
                hm = hm.copy()
                hm[f] = flip_heatmaps(hm[f], pairs)
            preds[idx] = decode_batch(hm)[0]
            iteration += 1
        err = keypoint_errors(preds, dataset.keypoints, mcfg)
        entry = {
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "mean_error": float(np.nanmean(err)),
            "pck": float(np.nanmean(err <= cfg.pck_threshold)),
        }
        history.append(entry)
        if log is not None:
            log(entry)
    return history


def predict_heatmaps(model, inputs, flip_test=True, flip_pairs=(), batch_size=16):
    """Eval-mode heatmaps, averaged with the mirrored input's when ``flip_test``."""
    model.eval()
    outs = []
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            x = inputs[start:start + batch_size]
            hm = model(x).data
            if flip_test:
                hm = flip_average(hm, model(np.ascontiguousarray(x[..., ::-1])).data, flip_pairs)
            outs.append(hm)
    return np.concatenate(outs)


def evaluate_heatmaps(heatmaps, dataset, model_config, per_joint_k=None):
    """Decode heatmaps, map back to image space, and score against the dataset annotations.

    Returns ``(EvalResult, per_sample)`` where ``per_sample`` lists dicts
    with image-space predictions, score, OKS and heatmap-pixel error.
    """
    coords, scores = decode_batch(heatmaps)
    hm_to_input = input_to_heatmap(model_config.feature_stride).inverse()
    instances, rows = [], []
    errors = keypoint_errors(coords, dataset.keypoints, model_config)
    for i, gt_inst in enumerate(dataset.instances):
        rec = dataset.record(i)
        crop = hm_to_input.apply(coords[i])
        image = rec.inverse_affine.apply(crop)
        pred = KeypointSet(image, np.full(len(image), 2), "image")
        inst = EvalInstance(gt_inst.id, gt_inst.gt, gt_inst.area, pred, float(np.mean(scores[i])), gt_inst.bbox)
        instances.append(inst)
        rows.append({"id": gt_inst.id, "keypoints": image.tolist(), "score": inst.score,
                     "mean_error_hm": float(np.nanmean(errors[i]))})
    k = per_joint_k
    if k is None and model_config.num_joints != 17:
        k = np.full(model_config.num_joints, 0.1)
    result = evaluate(instances, per_joint_k=k)
    for row in rows:
        row["oks"] = result.oks.get(row["id"])
    return result, rows

