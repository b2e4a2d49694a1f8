"""Invertible weak/strong augmentation pipelines for images and label maps.

Every geometric step (crop, flip, rotate, translate, shear) is folded into a
single 3x3 homogeneous matrix that maps *output* pixel coordinates ``(x, y)``
(column, row) to *input* pixel coordinates. Warping therefore needs exactly
one resampling, and inversion is a matrix inverse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import IGNORE

GEOMETRIC_OPS = ("rotate", "translate", "shear", "hflip")
COLOR_OPS = ("brightness", "contrast", "gaussian-noise")
PHOTOMETRIC_KINDS = ("brightness", "contrast", "saturation", "gaussian-noise")
CROP_RELATIONS = ("same", "min-overlap", "any")
AUGMENTATION_SUBSETS = (
    "crop+color",
    "crop+geom",
    "crop+color+geom",
    "crop+color+cutout",
    "crop+geom+cutout",
    "crop+color+geom+cutout",
)

MAX_ROTATE_DEG = 30.0
MAX_TRANSLATE_FRAC = 0.25
MAX_SHEAR = 0.3
MAX_BRIGHTNESS = 0.4
MAX_CONTRAST = 0.4
MAX_SATURATION = 0.5
MAX_NOISE_STD = 0.08
CUTOUT_FILL = 0.5


def _size(s) -> tuple[int, int]:
    if isinstance(s, (int, np.integer)):
        return int(s), int(s)
    h, w = s
    return int(h), int(w)


@dataclass(frozen=True)
class GeomTransform:
    matrix: np.ndarray
    out_size: tuple
    in_size: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m[:2, :2])) <= 1e-9:
            raise ValueError("geometric transform is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "out_size", _size(self.out_size))
        object.__setattr__(self, "in_size", _size(self.in_size))

    def allclose(self, other: "GeomTransform", atol: float = 1e-9) -> bool:
        return (
            self.out_size == other.out_size
            and self.in_size == other.in_size
            and bool(np.all(np.abs(self.matrix - other.matrix) <= atol))
        )

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "out_size": list(self.out_size),
            "in_size": list(self.in_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeomTransform":
        return cls(np.array(d["matrix"]), tuple(d["out_size"]), tuple(d["in_size"]))


def identity(size) -> GeomTransform:
    return GeomTransform(np.eye(3), size, size)


def translation(dy: float, dx: float, size) -> GeomTransform:
    """Content moves by (+dy, +dx): output pixel p reads input pixel p - d."""
    m = np.eye(3)
    m[0, 2], m[1, 2] = -dx, -dy
    return GeomTransform(m, size, size)


def crop(top: int, left: int, height: int, width: int, in_size) -> GeomTransform:
    m = np.eye(3)
    m[0, 2], m[1, 2] = left, top
    return GeomTransform(m, (height, width), in_size)


def hflip(size) -> GeomTransform:
    h, w = _size(size)
    m = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return GeomTransform(m, (h, w), (h, w))


def _about_center(linear: np.ndarray, size) -> GeomTransform:
    h, w = _size(size)
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    m = np.eye(3)
    m[:2, :2] = linear
    m[:2, 2] = c - linear @ c
    return GeomTransform(m, (h, w), (h, w))


def rotation(degrees: float, size) -> GeomTransform:
    t = math.radians(degrees)
    return _about_center(np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]), size)


def shear(amount: float, size) -> GeomTransform:
    return _about_center(np.array([[1.0, amount], [0.0, 1.0]]), size)


def invert(g: GeomTransform) -> GeomTransform:
    if abs(np.linalg.det(g.matrix[:2, :2])) <= 1e-9:
        raise ValueError("cannot invert a near-singular transform")
    return GeomTransform(np.linalg.inv(g.matrix), g.in_size, g.out_size)


def compose(g_outer: GeomTransform, g_inner: GeomTransform) -> GeomTransform:
    """Transform equivalent to warping by ``g_inner`` and then by ``g_outer``."""
    return GeomTransform(g_inner.matrix @ g_outer.matrix, g_outer.out_size, g_inner.in_size)


def source_coords(g: GeomTransform) -> tuple[np.ndarray, np.ndarray]:
    """Input-frame (row, col) coordinates read by every output pixel."""
    h, w = g.out_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    m = g.matrix
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return sy, sx


def apply_geom_to_labels(g: GeomTransform, labels: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp; out-of-frame or IGNORE sources become IGNORE."""
    labels = np.asarray(labels)
    if labels.shape != g.in_size:
        raise ValueError(f"label map shape {labels.shape} != transform input size {g.in_size}")
    h_in, w_in = g.in_size
    sy, sx = source_coords(g)
    r = np.floor(sy + 0.5).astype(np.int64)
    c = np.floor(sx + 0.5).astype(np.int64)
    inside = (r >= 0) & (r < h_in) & (c >= 0) & (c < w_in)
    out = np.full(g.out_size, IGNORE, dtype=labels.dtype)
    out[inside] = labels[r[inside], c[inside]]
    return out


def warp_image(g: GeomTransform, image: np.ndarray) -> np.ndarray:
    """Bilinear warp of a C,H,W image; samples outside the input read 0."""
    image = np.asarray(image)
    c_, h_in, w_in = image.shape
    if (h_in, w_in) != g.in_size:
        raise ValueError(f"image size {(h_in, w_in)} != transform input size {g.in_size}")
    sy, sx = source_coords(g)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((c_,) + g.out_size, dtype=image.dtype)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h_in) & (xx >= 0) & (xx < w_in)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = image[:, np.clip(yy, 0, h_in - 1), np.clip(xx, 0, w_in - 1)]
            out += (vals * wgt).astype(image.dtype)
    return out


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class PhotometricOp:
    """``magnitude`` in [0, 1] scaled to the op's range; ``sign`` picks direction."""

    kind: str
    magnitude: float
    sign: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PHOTOMETRIC_KINDS:
            raise ValueError(f"unknown photometric op {self.kind!r}")

    def apply(self, image: np.ndarray) -> np.ndarray:
        m, s = float(self.magnitude), float(self.sign)
        if self.kind == "brightness":
            out = image + s * MAX_BRIGHTNESS * m
        elif self.kind == "contrast":
            mean = image.mean()
            out = (image - mean) * (1.0 + s * MAX_CONTRAST * m) + mean
        elif self.kind == "saturation":
            gray = image.mean(axis=0, keepdims=True)
            out = gray + (image - gray) * (1.0 + s * MAX_SATURATION * m)
        else:
            noise = np.random.default_rng(self.seed).normal(0.0, MAX_NOISE_STD * m, image.shape)
            out = image + noise
        return np.clip(out, 0.0, 1.0).astype(image.dtype)


@dataclass(frozen=True)
class CutoutBox:
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class CutoutConfig:
    n_boxes: int = 1
    min_frac: float = 0.25
    max_frac: float = 0.5


@dataclass(frozen=True)
class AugRecord:
    geometric: GeomTransform
    photometric: tuple = ()
    cutout: tuple = ()
    # (top, left, height, width) of the crop in the source image
    crop_window: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {
            "geometric": self.geometric.to_dict(),
            "photometric": [vars(op) for op in self.photometric],
            "cutout": [vars(b) for b in self.cutout],
            "crop_window": None if self.crop_window is None else list(self.crop_window),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AugRecord":
        return cls(
            GeomTransform.from_dict(d["geometric"]),
            tuple(PhotometricOp(**op) for op in d["photometric"]),
            tuple(CutoutBox(**b) for b in d["cutout"]),
            None if d.get("crop_window") is None else tuple(d["crop_window"]),
        )


def identity_record(size) -> AugRecord:
    h, w = _size(size)
    return AugRecord(identity((h, w)), crop_window=(0, 0, h, w))


def apply_to_image(rec: AugRecord, image: np.ndarray) -> np.ndarray:
    out = warp_image(rec.geometric, image)
    for op in rec.photometric:
        out = op.apply(out)
    for b in rec.cutout:
        out[:, b.top:b.top + b.height, b.left:b.left + b.width] = CUTOUT_FILL
    return out


def cutout_mask(rec: AugRecord) -> np.ndarray:
    mask = np.zeros(rec.geometric.out_size, dtype=bool)
    for b in rec.cutout:
        mask[b.top:b.top + b.height, b.left:b.left + b.width] = True
    return mask


# ---------------------------------------------------------------------------
# sampling


def parse_subset(subset: str) -> tuple[tuple, bool]:
    """Map an augmentation-subset name to (op pool, use cutout)."""
    if subset not in AUGMENTATION_SUBSETS:
        raise ValueError(f"unknown augmentation subset {subset!r}; choose from {AUGMENTATION_SUBSETS}")
    parts = subset.split("+")
    pool: tuple = ()
    if "geom" in parts:
        pool += GEOMETRIC_OPS
    if "color" in parts:
        pool += COLOR_OPS
    return pool, "cutout" in parts


def _sample_window(rng: np.random.Generator, input_size, crop_size) -> tuple:
    (h_in, w_in), (h, w) = _size(input_size), _size(crop_size)
    if h > h_in or w > w_in:
        raise ValueError(f"crop {(h, w)} larger than input {(h_in, w_in)}")
    top = int(rng.integers(0, h_in - h + 1))
    left = int(rng.integers(0, w_in - w + 1))
    return top, left, h, w


def _cropped(window, input_size, flip: bool) -> GeomTransform:
    top, left, h, w = window
    g = crop(top, left, h, w, _size(input_size))
    return compose(hflip((h, w)), g) if flip else g


def window_overlap(a: tuple, b: tuple) -> float:
    """Intersection area of two (top, left, h, w) windows over the area of ``b``."""
    dy = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    dx = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return max(dy, 0) * max(dx, 0) / float(b[2] * b[3])


def sample_weak(rng: np.random.Generator, input_size, crop_size, flip_prob: float = 0.5) -> AugRecord:
    window = _sample_window(rng, input_size, crop_size)
    flip = bool(rng.random() < flip_prob)
    return AugRecord(_cropped(window, input_size, flip), crop_window=window)


def sample_strong(
    rng: np.random.Generator,
    input_size,
    crop_size,
    weak_record: AugRecord,
    pool: Sequence[str] = GEOMETRIC_OPS + COLOR_OPS,
    n_ops: int = 2,
    magnitude_range: tuple = (0.0, 1.0),
    cutout: Optional[CutoutConfig] = CutoutConfig(),
    crop_relation: str = "min-overlap",
    min_overlap: float = 0.25,
    flip_prob: float = 0.5,
    max_tries: int = 1000,
) -> AugRecord:
    """RandAugment-style strong view whose crop is tied to ``weak_record``.

    With ``crop_relation="same"`` the weak view's full geometric map (crop and
    flip) is the starting point; otherwise a fresh crop and flip are drawn.
    """
    pool = tuple(pool)
    if not pool:
        raise ValueError("augmentation pool is empty")
    if crop_relation not in CROP_RELATIONS:
        raise ValueError(f"unknown crop relation {crop_relation!r}")
    h, w = _size(crop_size)

    if crop_relation == "same":
        geom = weak_record.geometric
        window = weak_record.crop_window
    else:
        for _ in range(max_tries):
            window = _sample_window(rng, input_size, crop_size)
            if crop_relation == "any" or window_overlap(weak_record.crop_window, window) >= min_overlap:
                break
        else:
            raise ValueError(
                f"no crop with overlap >= {min_overlap} after {max_tries} draws "
                f"(input {input_size}, crop {crop_size})"
            )
        flip = bool(rng.random() < flip_prob)
        geom = _cropped(window, input_size, flip)

    photometric = []
    lo, hi = magnitude_range
    for kind in rng.choice(np.array(pool), size=n_ops, replace=True):
        kind = str(kind)
        m = float(rng.uniform(lo, hi))
        sign = 1 if rng.random() < 0.5 else -1
        if kind == "rotate":
            op = rotation(sign * MAX_ROTATE_DEG * m, (h, w))
        elif kind == "translate":
            phi = float(rng.uniform(0.0, 2 * math.pi))
            op = translation(MAX_TRANSLATE_FRAC * h * m * math.sin(phi), MAX_TRANSLATE_FRAC * w * m * math.cos(phi), (h, w))
        elif kind == "shear":
            op = shear(sign * MAX_SHEAR * m, (h, w))
        elif kind == "hflip":
            op = hflip((h, w))
        else:
            seed = int(rng.integers(0, 2**31 - 1)) if kind == "gaussian-noise" else 0
            photometric.append(PhotometricOp(kind, m, sign, seed))
            continue
        geom = compose(op, geom)

    boxes = []
    if cutout is not None:
        for _ in range(cutout.n_boxes):
            bh = int(rng.integers(math.ceil(cutout.min_frac * h), math.floor(cutout.max_frac * h) + 1))
            bw = int(rng.integers(math.ceil(cutout.min_frac * w), math.floor(cutout.max_frac * w) + 1))
            boxes.append(CutoutBox(int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1)), bh, bw))

    return AugRecord(geom, tuple(photometric), tuple(boxes), crop_window=window)
