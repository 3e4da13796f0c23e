"""Keypoints <-> Gaussian heatmaps, crop geometry, flip test and augmentation draws.

Coordinates are continuous pixel coordinates in which integer values are pixel
centres. Heatmap space relates to input space by ``x_hm = (x_in + 0.5) / s - 0.5``
for feature stride ``s``; under this convention mirroring an input of width
``W`` (``x -> W - 1 - x``) is exactly mirroring its heatmap.
"""
import dataclasses
import functools
import json
import math
from importlib import resources

import numpy as np

SPACES = ("image", "crop", "heatmap")


@functools.lru_cache(maxsize=None)
def coco17():
    """The shipped COCO 17-joint table (names, flip pairs, body halves, OKS sigmas)."""
    with resources.files("posekit").joinpath("data/coco17.json").open() as fh:
        table = json.load(fh)
    table["flip_pairs"] = [tuple(p) for p in table["flip_pairs"]]
    return table


COCO_FLIP_PAIRS = tuple(tuple(p) for p in coco17()["flip_pairs"])


@dataclasses.dataclass
class KeypointSet:
    """``J`` keypoints with visibility 0 (absent), 1 (occluded, labeled) or 2 (visible)."""

    coords: np.ndarray
    visibility: np.ndarray
    space: str = "image"

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.coords) != len(self.visibility):
            raise ValueError(f"{len(self.coords)} coordinates but {len(self.visibility)} visibility flags")
        if self.space not in SPACES:
            raise ValueError(f"unknown coordinate space {self.space!r}")

    def __len__(self):
        return len(self.coords)

    @property
    def labeled(self):
        return self.visibility > 0

    @classmethod
    def from_flat(cls, values, space="image"):
        """From COCO-style ``x, y, v`` triples."""
        arr = np.asarray(values, dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, :2], arr[:, 2].astype(np.int64), space)

    def to_flat(self):
        out = np.zeros((len(self), 3))
        out[:, :2] = self.coords
        out[:, 2] = self.visibility
        return out.reshape(-1)


@dataclasses.dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source ``(x, y, 1)`` to destination ``(x, y)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(2, 3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def scaling(cls, sx, sy=None, tx=0.0, ty=0.0):
        return cls(np.array([[sx, 0.0, tx], [0.0, sx if sy is None else sy, ty]]))

    def _full(self):
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    @property
    def determinant(self):
        return float(np.linalg.det(self.matrix[:, :2]))

    def inverse(self):
        if self.determinant == 0.0:
            raise ValueError("affine transform is degenerate")
        return AffineTransform(np.linalg.inv(self._full())[:2])

    def __matmul__(self, other):
        """``(A @ B)`` applies ``B`` first, then ``A``."""
        return AffineTransform((self._full() @ other._full())[:2])

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]


def apply_affine_points(t, points, space=None):
    """Transform keypoint coordinates; visibility is kept, ``space`` becomes the new tag."""
    return KeypointSet(t.apply(points.coords), points.visibility.copy(), space or points.space)


def build_crop_affine(bbox, aspect, rotation_deg, scale, out_size):
    """Affine from image space to an ``out_size = (H, W)`` crop around ``bbox``.

    ``bbox`` is ``(cx, cy, w, h)``. The short side grows about the centre
    until ``h / w == aspect``, the box is multiplied by ``scale``, content is
    rotated by ``rotation_deg`` about the centre, and the box corners land on
    ``(0, 0)`` and ``(W, H)``.
    """
    cx, cy, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise ValueError(f"bounding box has zero area: {bbox}")
    out_h, out_w = out_size
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output size must be positive, got {out_size}")
    if h < w * aspect:
        h = w * aspect
    else:
        w = h / aspect
    w *= scale
    h *= scale
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    lin = np.array([[out_w / w, 0.0], [0.0, out_h / h]]) @ np.array([[c, s], [-s, c]])
    shift = np.array([out_w / 2.0, out_h / 2.0]) - lin @ np.array([cx, cy])
    return AffineTransform(np.hstack([lin, shift[:, None]]))


def input_to_heatmap(stride):
    """Input-pixel to heatmap-pixel transform for feature stride ``stride``."""
    return AffineTransform.scaling(1.0 / stride, 1.0 / stride, 0.5 / stride - 0.5, 0.5 / stride - 0.5)


# ---------------------------------------------------------------------------
# encode / decode


def gaussian_encode(kps, size, sigma=2.0):
    """Render one unnormalized Gaussian per labeled joint.

    The Gaussian is evaluated at the joint's exact position and kept within
    ``3 * sigma`` of the nearest grid point, which is also its peak. Unlabeled
    joints, and joints whose nearest grid point is off the map, get an empty
    map and weight 0.
    """
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"heatmap size must be positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = len(kps)
    maps = np.zeros((n, h, w))
    weights = np.zeros(n)
    radius = int(math.floor(3.0 * sigma))
    for j in range(n):
        if kps.visibility[j] <= 0:
            continue
        mx, my = kps.coords[j]
        if not (np.isfinite(mx) and np.isfinite(my)):
            continue
        cx, cy = int(math.floor(mx + 0.5)), int(math.floor(my + 0.5))
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        x0, x1 = max(cx - radius, 0), min(cx + radius, w - 1)
        y0, y1 = max(cy - radius, 0), min(cy + radius, h - 1)
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        gx = np.exp(-((xs - mx) ** 2) / (2.0 * sigma**2))
        gy = np.exp(-((ys - my) ** 2) / (2.0 * sigma**2))
        maps[j, y0:y1 + 1, x0:x1 + 1] = np.outer(gy, gx)
        weights[j] = 1.0
    return maps, weights


def _quarter_offsets(hm, px, py):
    # per-axis shift toward the larger neighbour; only where both neighbours exist
    j, h, w = hm.shape
    idx = np.arange(j)
    dx = np.zeros(j)
    dy = np.zeros(j)
    inner_x = (px > 0) & (px < w - 1)
    inner_y = (py > 0) & (py < h - 1)
    right = hm[idx, py, np.minimum(px + 1, w - 1)]
    left = hm[idx, py, np.maximum(px - 1, 0)]
    down = hm[idx, np.minimum(py + 1, h - 1), px]
    up = hm[idx, np.maximum(py - 1, 0), px]
    dx[inner_x & (right > left)] = 0.25
    dx[inner_x & (left > right)] = -0.25
    dy[inner_y & (down > up)] = 0.25
    dy[inner_y & (up > down)] = -0.25
    return dx, dy


def decode(hm, quarter_offset=True):
    """Peak location per joint, shifted a quarter pixel toward the larger neighbour.

    Ties in the maximum go to the first cell in row-major order. Returns a
    heatmap-space :class:`KeypointSet` and the peak values as scores.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 3:
        raise ValueError(f"expected J x H x W heatmaps, got shape {hm.shape}")
    coords, scores = decode_batch(hm[None], quarter_offset)
    return KeypointSet(coords[0], np.full(len(hm), 2), "heatmap"), scores[0]


def decode_batch(hm, quarter_offset=True):
    """Vectorized :func:`decode` over ``N x J x H x W``; returns ``(coords, scores)`` arrays."""
    hm = np.asarray(hm, dtype=np.float64)
    n, j, h, w = hm.shape
    if h < 1 or w < 1:
        raise ValueError("heatmaps must be non-empty")
    flat = hm.reshape(n, j, -1)
    arg = flat.argmax(axis=2)
    scores = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0]
    py, px = np.divmod(arg, w)
    coords = np.stack([px, py], axis=-1).astype(np.float64)
    if quarter_offset:
        for b in range(n):
            dx, dy = _quarter_offsets(hm[b], px[b], py[b])
            coords[b, :, 0] += dx
            coords[b, :, 1] += dy
    return coords, scores


# ---------------------------------------------------------------------------
# flip test


def _check_pairs(pairs, num_joints):
    seen = set()
    for a, b in pairs:
        for k in (a, b):
            if not 0 <= k < num_joints:
                raise ValueError(f"flip pair index {k} out of range for {num_joints} joints")
            if k in seen:
                raise ValueError(f"joint {k} appears in more than one flip pair")
            seen.add(k)
        if a == b:
            raise ValueError(f"flip pair ({a}, {b}) pairs a joint with itself")


def flip_heatmaps(hm, flip_pairs):
    """Mirror along width and swap left/right joint channels (axis -3)."""
    hm = np.asarray(hm, dtype=np.float64)
    _check_pairs(flip_pairs, hm.shape[-3])
    out = hm[..., ::-1].copy()
    for a, b in flip_pairs:
        out[..., [a, b], :, :] = out[..., [b, a], :, :]
    return out


def flip_average(hm_orig, hm_flipped, flip_pairs):
    """Average ``hm_orig`` with the un-mirrored, channel-swapped ``hm_flipped``."""
    hm_orig = np.asarray(hm_orig, dtype=np.float64)
    hm_flipped = np.asarray(hm_flipped, dtype=np.float64)
    if hm_orig.shape != hm_flipped.shape:
        raise ValueError(f"shape mismatch {hm_orig.shape} vs {hm_flipped.shape}")
    return 0.5 * (hm_orig + flip_heatmaps(hm_flipped, flip_pairs))


def flip_keypoints(kps, width, flip_pairs):
    """Mirror keypoints in a space of ``width`` pixels and swap paired joints."""
    _check_pairs(flip_pairs, len(kps))
    coords = kps.coords.copy()
    coords[:, 0] = width - 1 - coords[:, 0]
    vis = kps.visibility.copy()
    for a, b in flip_pairs:
        coords[[a, b]] = coords[[b, a]]
        vis[[a, b]] = vis[[b, a]]
    return KeypointSet(coords, vis, kps.space)


# ---------------------------------------------------------------------------
# augmentation


def half_body_transform(kps, upper_ids, lower_ids, rng, padding=1.5, half=None):
    """Box around the labeled joints of one body half, or ``None`` for a no-op.

    ``half`` forces ``"upper"`` or ``"lower"``; otherwise it is drawn with
    equal odds. Fewer than two labeled joints in the chosen half is a no-op.
    The box is ``(cx, cy, w, h)`` with the joint extent scaled by ``padding``.
    """
    if half is None:
        half = "upper" if rng.random() < 0.5 else "lower"
    ids = np.asarray(upper_ids if half == "upper" else lower_ids, dtype=np.int64)
    if ids.size == 0:
        return None
    pts = kps.coords[ids][kps.visibility[ids] > 0]
    if len(pts) < 2:
        return None
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = (lo + hi) / 2.0
    size = (hi - lo) * padding
    return (float(centre[0]), float(centre[1]), float(size[0]), float(size[1]))


@dataclasses.dataclass(frozen=True)
class AugmentFlags:
    rotate: bool = True
    scale: bool = True
    flip: bool = True
    half_body: bool = True
    max_rotation: float = 80.0
    scale_range: tuple = (0.5, 1.5)
    flip_prob: float = 0.5
    half_body_prob: float = 0.3

    @classmethod
    def disabled(cls):
        return cls(rotate=False, scale=False, flip=False, half_body=False)


@dataclasses.dataclass(frozen=True)
class Augmentation:
    rotation_deg: float
    scale: float
    flip: bool
    half_body: bool


def sample_augmentation(rng, flags=AugmentFlags()):
    """Draw rotation, scale, flip and half-body choices.

    Four uniforms are consumed on every call whatever the flags, so enabling
    one augmentation never shifts the others' random stream.
    """
    u_rot, u_scale, u_flip, u_half = rng.random(4)
    lo, hi = flags.scale_range
    return Augmentation(
        rotation_deg=float((2.0 * u_rot - 1.0) * flags.max_rotation) if flags.rotate else 0.0,
        scale=float(lo + (hi - lo) * u_scale) if flags.scale else 1.0,
        flip=bool(u_flip < flags.flip_prob) if flags.flip else False,
        half_body=bool(u_half < flags.half_body_prob) if flags.half_body else False,
    )
