"""Tensor files, COCO-style keypoint documents, and the synthetic pose dataset.

Dataset directory layout::

    manifest.txt          canonical key=value manifest
    samples/NNNNNN.pht    one C x H x W input tensor per sample
    keypoints.txt         "id x y v x y v ..." per line, crop (input) space
    annotations.json      COCO-style image-space annotations with crop boxes
"""
import dataclasses
import json
import math
import os
import struct

import numpy as np

from . import config as cfgtext
from .codec import KeypointSet, apply_affine_points, build_crop_affine, coco17
from .metrics import EvalInstance
from .tensor import Tensor

TENSOR_MAGIC = b"PHT1"
MAX_PAYLOAD = 1 << 40


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class DimOverflowError(TensorFileError):
    pass


class DataFormatError(ValueError):
    pass


def write_tensor_file(path, tensor):
    """Magic ``PHT1``, u8 rank, u32 LE dims, float64 LE values."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    if arr.ndim > 255:
        raise DimOverflowError(f"rank {arr.ndim} does not fit in one byte")
    if any(d >= 1 << 32 for d in arr.shape):
        raise DimOverflowError(f"dimension in {arr.shape} does not fit in 32 bits")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 5:
        raise TruncatedError(f"{path}: missing rank byte")
    rank = data[4]
    header = 5 + 4 * rank
    if len(data) < header:
        raise TruncatedError(f"{path}: header needs {header} bytes, file has {len(data)}")
    shape = struct.unpack(f"<{rank}I", data[5:header])
    count = math.prod(shape)
    if count * 8 > MAX_PAYLOAD:
        raise DimOverflowError(f"{path}: dims {shape} imply {count * 8} payload bytes")
    if len(data) < header + 8 * count:
        raise TruncatedError(f"{path}: payload needs {8 * count} bytes, file has {len(data) - header}")
    if len(data) > header + 8 * count:
        raise TensorFileError(f"{path}: {len(data) - header - 8 * count} trailing bytes")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=header).astype(np.float64)
    return Tensor(values.reshape(shape))


# ---------------------------------------------------------------------------
# COCO-style documents


@dataclasses.dataclass
class LoadReport:
    total: int = 0
    loaded: int = 0
    skipped: list = dataclasses.field(default_factory=list)

    def to_text(self):
        lines = [f"total={self.total}", f"loaded={self.loaded}", f"skipped={len(self.skipped)}"]
        lines += [f"skip[{i}]={reason}" for i, reason in self.skipped]
        return "\n".join(lines) + "\n"


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _entries(doc, path):
    if isinstance(doc, dict) and isinstance(doc.get("annotations"), list):
        return doc["annotations"]
    if isinstance(doc, list):
        return doc
    raise DataFormatError(f"{path}: expected an 'annotations' list")


def _keypoints(entry, num_joints):
    kp = entry.get("keypoints")
    if not isinstance(kp, list) or len(kp) != 3 * num_joints:
        n = len(kp) if isinstance(kp, list) else type(kp).__name__
        raise ValueError(f"keypoints must be a list of {3 * num_joints} numbers, got {n}")
    arr = np.asarray(kp, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("keypoints contain non-finite values")
    kps = KeypointSet.from_flat(arr, "image")
    if np.any((kps.visibility < 0) | (kps.visibility > 2)):
        raise ValueError("visibility flags must be 0, 1 or 2")
    return kps


def load_coco_keypoints(path, num_joints=17):
    """Ground-truth instances from a COCO-style document.

    Each annotation needs ``id``, ``keypoints`` (x, y, v triples), ``area``
    and ``bbox``. Malformed entries are skipped and listed in the report.
    Returns ``(instances, report)``.
    """
    entries = _entries(_read_json(path), path)
    report = LoadReport(total=len(entries))
    instances = []
    for i, entry in enumerate(entries):
        try:
            if not isinstance(entry, dict):
                raise ValueError("annotation is not an object")
            for key in ("id", "keypoints", "area", "bbox"):
                if key not in entry:
                    raise ValueError(f"missing {key!r}")
            kps = _keypoints(entry, num_joints)
            bbox = tuple(float(v) for v in entry["bbox"])
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 numbers")
            inst = EvalInstance(int(entry["id"]), kps, float(entry["area"]), bbox=bbox)
        except (ValueError, TypeError) as exc:
            report.skipped.append((i, str(exc)))
            continue
        instances.append(inst)
    report.loaded = len(instances)
    return instances, report


def load_coco_predictions(path, num_joints=17):
    """``{id: (KeypointSet, score)}`` from a results list of ``{id, keypoints, score}``."""
    entries = _entries(_read_json(path), path)
    out = {}
    for i, entry in enumerate(entries):
        try:
            out[int(entry["id"])] = (_keypoints(entry, num_joints), float(entry.get("score", 1.0)))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataFormatError(f"{path}: prediction {i}: {exc}") from None
    return out


def attach_predictions(instances, predictions):
    for inst in instances:
        if inst.id in predictions:
            inst.pred, inst.score = predictions[inst.id]
    return instances


def write_coco_predictions(path, items):
    """Write ``(id, KeypointSet, score)`` items as a results list."""
    doc = [{"id": int(i), "keypoints": [float(v) for v in kps.to_flat()], "score": float(s)} for i, kps, s in items]
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------------------
# synthetic dataset

FORMAT_VERSION = 1

# standing figure, x right / y down, in units of body height
_COCO_TEMPLATE = np.array([
    [0.00, -0.40], [0.03, -0.43], [-0.03, -0.43], [0.06, -0.41], [-0.06, -0.41],
    [0.12, -0.28], [-0.12, -0.28], [0.16, -0.10], [-0.16, -0.10], [0.18, 0.06],
    [-0.18, 0.06], [0.08, 0.05], [-0.08, 0.05], [0.09, 0.28], [-0.09, 0.28],
    [0.10, 0.50], [-0.10, 0.50],
])


@dataclasses.dataclass
class DatasetManifest:
    format_version: int = FORMAT_VERSION
    samples: int = 0
    input_size: tuple[int, int] = (64, 48)
    joints: int = 17
    channels: int = 3
    sigma: float = 2.0
    seed: int = 0

    def to_text(self):
        return cfgtext.dump(self)


@dataclasses.dataclass
class SampleRecord:
    id: int
    input: np.ndarray
    keypoints: KeypointSet
    bbox: tuple
    inverse_affine: object


def _skeleton(rng, num_joints):
    """Random pose in body-height units, centred near the origin."""
    if num_joints == 17:
        parents = coco17()["parents"]
        pts = np.zeros((17, 2))
        pts[0] = _COCO_TEMPLATE[0]
        for j in range(1, 17):
            p = parents[j]
            limb = _COCO_TEMPLATE[j] - _COCO_TEMPLATE[p]
            ang = rng.uniform(-0.35, 0.35)
            c, s = math.cos(ang), math.sin(ang)
            limb = np.array([c * limb[0] - s * limb[1], s * limb[0] + c * limb[1]]) * rng.uniform(0.85, 1.15)
            pts[j] = pts[p] + limb
    else:
        pts = np.zeros((num_joints, 2))
        heading = rng.uniform(0, 2 * math.pi)
        for j in range(1, num_joints):
            heading += rng.uniform(-1.2, 1.2)
            pts[j] = pts[j - 1] + rng.uniform(0.2, 0.35) * np.array([math.cos(heading), math.sin(heading)])
    tilt = rng.uniform(-0.5, 0.5)
    c, s = math.cos(tilt), math.sin(tilt)
    pts = pts @ np.array([[c, s], [-s, c]])
    return pts - pts.mean(axis=0)


def _parents(num_joints):
    return coco17()["parents"] if num_joints == 17 else [-1] + list(range(num_joints - 1))


def render_input(kps, size, channels):
    """Input tensor from crop-space keypoints.

    Channel 0 holds a unit blob per joint (max-composited), channel 1 the
    limb ridges, channel 2 blobs whose height encodes the joint index; any
    further channels carry phase codes of the index.
    """
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    j = len(kps)
    out = np.zeros((channels, h, w))
    blobs = np.exp(-((xs[None] - kps.coords[:, 0, None, None]) ** 2 + (ys[None] - kps.coords[:, 1, None, None]) ** 2) / 2.0)
    blobs *= (kps.visibility > 0)[:, None, None]
    out[0] = blobs.max(axis=0)
    if channels > 1:
        ridge = np.zeros((h, w))
        for child, parent in enumerate(_parents(j)):
            if parent < 0 or kps.visibility[child] <= 0 or kps.visibility[parent] <= 0:
                continue
            a, b = kps.coords[parent], kps.coords[child]
            ab = b - a
            denom = float(ab @ ab) or 1.0
            t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
            d2 = (xs - a[0] - t * ab[0]) ** 2 + (ys - a[1] - t * ab[1]) ** 2
            ridge = np.maximum(ridge, 0.5 * np.exp(-d2 / 2.0))
        out[1] = ridge
    for c in range(2, channels):
        if c == 2:
            code = (np.arange(j) + 1.0) / j
        else:
            code = 0.5 + 0.5 * np.cos(2.0 * math.pi * (c - 2) * np.arange(j) / j)
        out[c] = (blobs * code[:, None, None]).max(axis=0)
    return out


def _synth_sample(rng, sample_id, input_size, num_joints, channels):
    h, w = input_size
    img_h, img_w = 4 * h, 4 * w
    pose = _skeleton(rng, num_joints) * rng.uniform(0.5, 0.8) * img_h
    pose += np.array([rng.uniform(0.35, 0.65) * img_w, rng.uniform(0.35, 0.65) * img_h])
    image_kps = KeypointSet(pose, np.full(num_joints, 2), "image")
    lo, hi = pose.min(axis=0), pose.max(axis=0)
    tight = ((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, max(hi[0] - lo[0], 1.0), max(hi[1] - lo[1], 1.0))
    crop_box = (tight[0], tight[1], tight[2] * 1.25, tight[3] * 1.25)
    affine = build_crop_affine(crop_box, h / w, 0.0, 1.0, input_size)
    crop_kps = apply_affine_points(affine, image_kps, "crop")
    return SampleRecord(sample_id, render_input(crop_kps, input_size, channels), crop_kps, crop_box,
                        affine.inverse()), image_kps, tight


def synth_generate(out_dir, n, config, seed=0, sigma=2.0):
    """Write ``n`` synthetic samples for ``config`` to ``out_dir``; returns the manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    lines, annotations = [], []
    for i in range(n):
        rec, image_kps, tight = _synth_sample(rng, i, config.input_size, config.num_joints, config.in_channels)
        write_tensor_file(os.path.join(out_dir, "samples", f"{i:06d}.pht"), rec.input)
        flat = rec.keypoints.to_flat()
        lines.append(" ".join([str(i)] + [repr(float(v)) for v in flat]))
        annotations.append({
            "id": i,
            "keypoints": [float(v) for v in image_kps.to_flat()],
            "area": float(tight[2] * tight[3]),
            "bbox": [tight[0] - tight[2] / 2, tight[1] - tight[3] / 2, tight[2], tight[3]],
            "crop_box": [float(v) for v in rec.bbox],
        })
    with open(os.path.join(out_dir, "keypoints.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "annotations.json"), "w") as fh:
        json.dump({"annotations": annotations}, fh)
    manifest = DatasetManifest(FORMAT_VERSION, n, tuple(config.input_size), config.num_joints,
                               config.in_channels, float(sigma), seed)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(manifest.to_text())
    return manifest


@dataclasses.dataclass
class Dataset:
    manifest: DatasetManifest
    inputs: np.ndarray
    keypoints: list
    instances: list
    crop_boxes: list

    def __len__(self):
        return len(self.inputs)

    def record(self, i):
        box = self.crop_boxes[i]
        aff = build_crop_affine(box, self.manifest.input_size[0] / self.manifest.input_size[1], 0.0, 1.0,
                                self.manifest.input_size)
        return SampleRecord(i, self.inputs[i], self.keypoints[i], box, aff.inverse())


def load_dataset(path):
    """Read a dataset directory written by :func:`synth_generate`."""
    mpath = os.path.join(path, "manifest.txt")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    with open(mpath) as fh:
        manifest = cfgtext.load(DatasetManifest, fh.read())
    if manifest.format_version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset format {manifest.format_version}")
    h, w = manifest.input_size
    inputs = np.zeros((manifest.samples, manifest.channels, h, w))
    for i in range(manifest.samples):
        arr = read_tensor_file(os.path.join(path, "samples", f"{i:06d}.pht")).data
        if arr.shape != (manifest.channels, h, w):
            raise DataFormatError(f"sample {i}: shape {arr.shape} disagrees with manifest")
        inputs[i] = arr
    keypoints = []
    with open(os.path.join(path, "keypoints.txt")) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 1 + 3 * manifest.joints:
                raise DataFormatError(f"keypoints.txt line {lineno}: expected {1 + 3 * manifest.joints} fields")
            keypoints.append(KeypointSet.from_flat([float(v) for v in parts[1:]], "crop"))
    if len(keypoints) != manifest.samples:
        raise DataFormatError(f"{len(keypoints)} keypoint records for {manifest.samples} samples")
    apath = os.path.join(path, "annotations.json")
    instances, report = load_coco_keypoints(apath, manifest.joints)
    if report.skipped:
        raise DataFormatError(f"{apath}: {len(report.skipped)} malformed annotations")
    boxes = [tuple(a["crop_box"]) for a in _entries(_read_json(apath), apath)]
    return Dataset(manifest, inputs, keypoints, instances, boxes)
