import dataclasses

import numpy as np
import pytest

from posekit.codec import decode_batch, input_to_heatmap
from posekit.config import ConfigError
from posekit.dataio import load_dataset, synth_generate
from posekit.losses import WEIGHT_KINDS
from posekit.model import ModelConfig, build_model
from posekit.train import (NumericError, TrainConfig, evaluate_heatmaps, heatmap_targets, keypoint_errors,
                           learning_rate, predict_heatmaps, train)

MICRO = ModelConfig(input_size=(32, 32), num_joints=4, backbone_channels=(8, 8, 8), head_layers=1, head_kernel=4,
                    head_channels=8, squeeze_ratio=4)
TOY = ModelConfig(input_size=(32, 32), backbone_channels=(16, 32, 32), head_layers=1, head_kernel=4,
                  head_channels=32, squeeze_ratio=4)


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("micro")
    synth_generate(path, 8, MICRO, seed=0)
    return load_dataset(path)


# ---------------------------------------------------------------------------
# schedule


def test_lr_at_iteration_zero():
    assert learning_rate(TrainConfig(), 0, 0) == pytest.approx(5e-7, rel=1e-12)


def test_lr_after_first_milestone():
    cfg = TrainConfig()
    assert learning_rate(cfg, 10_000, cfg.milestones[0]) == pytest.approx(5e-5, rel=1e-12)
    assert learning_rate(cfg, 10_000, cfg.milestones[0] - 1) == 5e-4
    assert learning_rate(cfg, 10_000, cfg.milestones[1]) == pytest.approx(5e-6, rel=1e-12)


def test_warmup_monotone_and_continuous():
    cfg = TrainConfig()
    lrs = [learning_rate(cfg, t, 0) for t in range(cfg.warmup_iters + 1)]
    assert all(a < b for a, b in zip(lrs, lrs[1:cfg.warmup_iters]))
    # the last warm-up step plus one increment lands on the base rate
    step = lrs[1] - lrs[0]
    assert abs(lrs[cfg.warmup_iters - 1] + step - lrs[cfg.warmup_iters]) <= 1e-12
    assert lrs[cfg.warmup_iters] == cfg.base_lr


def test_default_milestones_proportional():
    cfg = TrainConfig()
    assert cfg.milestones == (round(170 / 210 * 300), round(200 / 210 * 300))


@pytest.mark.parametrize("change,match", [
    (dict(milestones=(20, 10)), "increasing"),
    (dict(milestones=(300,)), "epochs"),
    (dict(loss="huber"), "unknown"),
    (dict(batch_size=0), "batch_size"),
    (dict(warmup_ratio=0.0), "warm-up"),
])
def test_train_config_validation(change, match):
    with pytest.raises(ConfigError, match=match):
        dataclasses.replace(TrainConfig(), **change).validate()


# ---------------------------------------------------------------------------
# training loop


def test_targets_peak_at_keypoints(micro_data):
    maps, weights = heatmap_targets(micro_data.keypoints, MICRO, micro_data.manifest.sigma)
    assert maps.shape == (8, 4, 8, 8)
    coords, _ = decode_batch(maps)
    to_hm = input_to_heatmap(MICRO.feature_stride)
    gt = np.stack([to_hm.apply(k.coords) for k in micro_data.keypoints])
    err = np.abs(coords - gt)[weights > 0]
    cell = np.rint(coords)[weights > 0]
    # border cells get no quarter offset, so only the rounding bound applies there
    interior = (cell > 0) & (cell < np.array([8 - 1, 8 - 1]))
    assert np.all(err[interior] <= 0.25 + 1e-12)
    assert np.all(err <= 0.5 + 1e-12)


def _short(kind="x", epochs=6):
    return TrainConfig(epochs=epochs, batch_size=4, base_lr=3e-3, warmup_iters=4, milestones=(), loss=kind, seed=3)


def test_bit_reproducible(micro_data):
    a, b = build_model(MICRO, seed=1), build_model(MICRO, seed=1)
    ha = train(a, micro_data, _short(epochs=3))
    hb = train(b, micro_data, _short(epochs=3))
    assert ha == hb
    assert a.checksum() == b.checksum()


@pytest.mark.parametrize("kind", sorted(WEIGHT_KINDS))
def test_every_kind_trains_stably(micro_data, kind):
    history = train(build_model(MICRO, seed=0), micro_data, _short(kind, epochs=15))
    losses = [h["loss"] for h in history]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_non_finite_loss_aborts(micro_data):
    bad = dataclasses.replace(micro_data, inputs=micro_data.inputs.copy())
    bad.inputs[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="non-finite loss"):
        train(build_model(MICRO), bad, _short(epochs=1))


def test_log_callback_sees_every_epoch(micro_data):
    seen = []
    train(build_model(MICRO), micro_data, _short(epochs=2), log=seen.append)
    assert [e["epoch"] for e in seen] == [1, 2]
    assert set(seen[0]) == {"epoch", "loss", "lr", "mean_error", "pck"}


# ---------------------------------------------------------------------------
# evaluation path


def test_ground_truth_heatmaps_score_perfect_ap(tmp_path):
    synth_generate(tmp_path, 6, ModelConfig(), seed=2)
    ds = load_dataset(tmp_path)
    maps, _ = heatmap_targets(ds.keypoints, ModelConfig(), ds.manifest.sigma)
    result, rows = evaluate_heatmaps(maps, ds, ModelConfig())
    assert result.ap == 1.0
    assert all(r["mean_error_hm"] <= 0.3536 for r in rows)


def test_flip_test_differs_only_by_averaging(micro_data):
    model = build_model(MICRO, seed=4)
    plain = predict_heatmaps(model, micro_data.inputs, flip_test=False)
    flipped = predict_heatmaps(model, micro_data.inputs[..., ::-1].copy(), flip_test=False)
    both = predict_heatmaps(model, micro_data.inputs, flip_test=True, flip_pairs=())
    np.testing.assert_allclose(both, 0.5 * (plain + flipped[..., ::-1]), rtol=0, atol=1e-14)


def test_held_out_learnability(tmp_path):
    synth_generate(tmp_path / "train", 32, TOY, seed=1)
    synth_generate(tmp_path / "test", 16, TOY, seed=2)
    tr, te = load_dataset(tmp_path / "train"), load_dataset(tmp_path / "test")
    model = build_model(TOY, seed=0)
    train(model, tr, TrainConfig(epochs=40, batch_size=8, base_lr=3e-3, warmup_iters=40, milestones=(30,)))
    coords, _ = decode_batch(predict_heatmaps(model, te.inputs, flip_test=False))
    assert np.nanmean(keypoint_errors(coords, te.keypoints, TOY)) < 4.0
