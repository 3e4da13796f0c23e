import filecmp
import json
import struct

import numpy as np
import pytest

from posekit.codec import apply_affine_points
from posekit.dataio import (BadMagicError, DataFormatError, DimOverflowError, TensorFileError, TruncatedError,
                            attach_predictions, load_coco_keypoints, load_coco_predictions, load_dataset,
                            read_tensor_file, render_input, synth_generate, write_coco_predictions,
                            write_tensor_file)
from posekit.codec import KeypointSet
from posekit.model import ModelConfig

SMALL = ModelConfig(input_size=(32, 24), backbone_channels=(8, 8, 8), head_layers=1, head_channels=8,
                    squeeze_ratio=4)


# ---------------------------------------------------------------------------
# tensor files


@pytest.mark.parametrize("shape", [(3, 4, 5), (7,), (), (2, 0, 3)])
def test_tensor_round_trip_bitwise(tmp_path, rng, shape):
    arr = rng.normal(size=shape)
    if arr.size:
        arr.flat[0] = -0.0
    path = tmp_path / "t.pht"
    write_tensor_file(path, arr)
    back = read_tensor_file(path).data
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "t.pht"
    write_tensor_file(path, np.array([[1.5, -2.0]]))
    data = path.read_bytes()
    assert data[:4] == b"PHT1" and data[4] == 2
    assert struct.unpack("<2I", data[5:13]) == (1, 2)
    assert struct.unpack("<2d", data[13:]) == (1.5, -2.0)


def test_empty_tensor_has_no_payload(tmp_path):
    path = tmp_path / "e.pht"
    write_tensor_file(path, np.zeros((0, 4)))
    assert len(path.read_bytes()) == 4 + 1 + 8


def test_tensor_file_errors(tmp_path, rng):
    path = tmp_path / "t.pht"
    write_tensor_file(path, rng.normal(size=(2, 3)))
    data = path.read_bytes()
    cases = {
        "magic": (b"PHT2" + data[4:], BadMagicError),
        "payload": (data[:-1], TruncatedError),
        "header": (data[:7], TruncatedError),
        "rank": (data[:4], TruncatedError),
        "trailing": (data + b"\0", TensorFileError),
        "huge": (b"PHT1\x02" + struct.pack("<2I", 2**32 - 1, 2**32 - 1), DimOverflowError),
    }
    for name, (blob, err) in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(err):
            read_tensor_file(tmp_path / name)
    assert not issubclass(TruncatedError, BadMagicError) and not issubclass(DimOverflowError, TruncatedError)


# ---------------------------------------------------------------------------
# COCO-style documents


def _annotation(i, kps, area=100.0):
    return {"id": i, "keypoints": kps, "area": area, "bbox": [0, 0, 10, 10]}


def test_minimal_document(tmp_path):
    kps = []
    for j in range(17):
        kps += [float(j), 2.0 * j, j % 3]
    (tmp_path / "a.json").write_text(json.dumps({"annotations": [_annotation(42, kps, 250.0)]}))
    insts, report = load_coco_keypoints(tmp_path / "a.json")
    assert report.loaded == report.total == 1 and not report.skipped
    (inst,) = insts
    assert inst.id == 42 and inst.area == 250.0
    assert inst.gt.coords[5].tolist() == [5.0, 10.0]
    assert inst.gt.visibility.tolist() == [j % 3 for j in range(17)]
    assert inst.bbox == (0.0, 0.0, 10.0, 10.0)


def test_all_invisible_instance_is_unlabeled(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"annotations": [_annotation(1, [0.0] * 51)]}))
    (inst,), _ = load_coco_keypoints(tmp_path / "a.json")
    assert not inst.labeled


def test_malformed_entries_skipped_and_counted(tmp_path):
    good = _annotation(1, [1.0, 1.0, 2.0] * 17)
    entries = [good, _annotation(2, [1.0] * 50), {"id": 3}, _annotation(4, [1.0, 1.0, 5.0] * 17), "junk"]
    (tmp_path / "a.json").write_text(json.dumps({"annotations": entries}))
    insts, report = load_coco_keypoints(tmp_path / "a.json")
    assert [i.id for i in insts] == [1]
    assert report.total == 5 and report.loaded + len(report.skipped) == report.total
    assert [i for i, _ in report.skipped] == [1, 2, 3, 4]
    assert "50" in report.skipped[0][1]
    assert "skipped=4" in report.to_text()


def test_unparseable_document_reports_location(tmp_path):
    (tmp_path / "a.json").write_text('{"annotations": [\n  {"id": 1,,}\n]}')
    with pytest.raises(DataFormatError, match="line 2 column"):
        load_coco_keypoints(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('{"images": []}')
    with pytest.raises(DataFormatError, match="annotations"):
        load_coco_keypoints(tmp_path / "b.json")


def test_prediction_round_trip(tmp_path, rng):
    pred = KeypointSet(rng.random((17, 2)), np.ones(17, dtype=int))
    write_coco_predictions(tmp_path / "p.json", [(5, pred, 0.25)])
    preds = load_coco_predictions(tmp_path / "p.json")
    np.testing.assert_array_equal(preds[5][0].coords, pred.coords)
    assert preds[5][1] == 0.25
    (tmp_path / "a.json").write_text(json.dumps([_annotation(5, [1.0, 1.0, 2.0] * 17)]))
    insts, _ = load_coco_keypoints(tmp_path / "a.json")
    attach_predictions(insts, preds)
    assert insts[0].score == 0.25


# ---------------------------------------------------------------------------
# synthetic dataset


def test_same_seed_identical_files(tmp_path):
    synth_generate(tmp_path / "a", 3, SMALL, seed=11)
    synth_generate(tmp_path / "b", 3, SMALL, seed=11)
    synth_generate(tmp_path / "c", 3, SMALL, seed=12)
    names = ["manifest.txt", "keypoints.txt", "annotations.json"] + [f"samples/{i:06d}.pht" for i in range(3)]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    assert not filecmp.cmp(tmp_path / "a" / "keypoints.txt", tmp_path / "c" / "keypoints.txt", shallow=False)


def test_two_joint_manifest(tmp_path):
    cfg = ModelConfig(input_size=(32, 32), num_joints=2, backbone_channels=(8, 8, 8), head_layers=1,
                      head_channels=8, squeeze_ratio=4)
    manifest = synth_generate(tmp_path, 1, cfg, seed=0)
    assert manifest.samples == 1 and manifest.joints == 2
    text = (tmp_path / "manifest.txt").read_text()
    assert "samples=1\n" in text and "joints=2\n" in text
    ds = load_dataset(tmp_path)
    assert len(ds) == 1 and len(ds.keypoints[0]) == 2


def test_blob_argmax_near_a_keypoint(tmp_path):
    synth_generate(tmp_path, 8, SMALL, seed=3)
    ds = load_dataset(tmp_path)
    for inp, kps in zip(ds.inputs, ds.keypoints):
        y, x = np.unravel_index(np.argmax(inp[0]), inp[0].shape)
        d = np.abs(kps.coords - np.array([x, y])).max(axis=1)
        assert d.min() <= 1.0


def test_each_blob_peaks_at_its_joint(rng):
    kps = KeypointSet([[5.3, 7.8], [20.0, 11.6]], [2, 2], "crop")
    out = render_input(kps, (24, 32), 3)
    for j in range(2):
        # isolate one blob through its identity code on channel 2
        mask = np.abs(out[2] - out[0] * (j + 1) / 2) < 1e-12
        y, x = np.unravel_index(np.argmax(np.where(mask, out[0], -1)), out[0].shape)
        assert max(abs(x - kps.coords[j, 0]), abs(y - kps.coords[j, 1])) <= 0.5


def test_dataset_contents_consistent(tmp_path):
    synth_generate(tmp_path, 4, SMALL, seed=5)
    ds = load_dataset(tmp_path)
    h, w = SMALL.input_size
    assert ds.inputs.shape == (4, 3, h, w)
    for i in range(4):
        rec = ds.record(i)
        assert rec.input.shape == (3, h, w)
        assert np.all((rec.keypoints.coords >= 0) & (rec.keypoints.coords <= [w - 1, h - 1]))
        # crop keypoints map back onto the image-space annotation
        back = apply_affine_points(rec.inverse_affine, rec.keypoints, "image")
        np.testing.assert_allclose(back.coords, ds.instances[i].gt.coords, rtol=0, atol=1e-9)


def test_synth_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(tmp_path, 0, SMALL)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
    synth_generate(tmp_path, 2, SMALL, seed=0)
    lines = (tmp_path / "keypoints.txt").read_text().splitlines()
    (tmp_path / "keypoints.txt").write_text(lines[0] + "\n")
    with pytest.raises(DataFormatError, match="1 keypoint records for 2"):
        load_dataset(tmp_path)
