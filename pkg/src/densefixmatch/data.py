"""Synthetic shapes segmentation data, labeled/unlabeled splits and samplers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .matching import read_pgm, write_pgm

SHAPE_KINDS = ("rectangle", "circle", "triangle")
BACKGROUND_NOISE = 0.05
# bump when generator output changes, so cached runs on old data are not reused
GENERATOR_VERSION = 2


@dataclass
class Sample:
    image: np.ndarray  # 3,H,W in [0, 1]
    labels: np.ndarray  # H,W uint8
    id: int
    shapes: tuple = ()  # foreground class of each drawn shape, in paint order


@dataclass(frozen=True)
class SynthParams:
    n: int = 512
    height: int = 48
    width: int = 48
    num_classes: int = 4
    imbalance: float = 1.0
    color_spread: float = 0.18


def class_palette(num_classes: int) -> np.ndarray:
    """Mean RGB colour per foreground class, spread around the hue circle."""
    hues = np.arange(num_classes - 1) / max(num_classes - 1, 1)
    pal = np.zeros((num_classes, 3))
    for c, hue in enumerate(hues, start=1):
        angle = 2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))
        pal[c] = 0.5 + 0.35 * np.cos(angle)
    return pal


def class_probabilities(num_classes: int, imbalance: float) -> np.ndarray:
    c = np.arange(1, num_classes, dtype=np.float64)
    w = imbalance ** (-c)
    return w / w.sum()


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    scale = min(h, w)
    r = rng.uniform(0.08, 0.16) * scale
    cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
    if kind == "circle":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if kind == "rectangle":
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    # upward-pointing isosceles triangle inscribed in the radius-r box
    top, bottom = cy - r, cy + r
    frac = (ys - top) / (bottom - top)
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * r)


def _one_image(rng: np.random.Generator, p: SynthParams, palette: np.ndarray, probs: np.ndarray):
    h, w, k = p.height, p.width, p.num_classes
    while True:
        # greyish background: random brightness with a faint tint
        base = rng.uniform(0.2, 0.8) + rng.uniform(-0.06, 0.06, size=3)
        image = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
        labels = np.zeros((h, w), dtype=np.uint8)
        shapes = []
        for _ in range(int(rng.integers(2, 6))):
            c = int(rng.choice(np.arange(1, k), p=probs))
            shapes.append(c)
            mask = _shape_mask(SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)], rng, h, w)
            color = np.clip(palette[c] + rng.normal(0.0, p.color_spread, size=3), 0.0, 1.0)
            image[:, mask] = color[:, None]
            labels[mask] = c
        fg = np.count_nonzero(labels)
        if 0 < fg < h * w:
            break
    image = image + rng.normal(0.0, BACKGROUND_NOISE, size=image.shape)
    return np.clip(image, 0.0, 1.0), labels, tuple(shapes)


def gen_dataset(seed: int, n: int = 512, height: int = 48, width: int = 48, num_classes: int = 4,
                imbalance: float = 1.0, color_spread: float = 0.18) -> list[Sample]:
    """Images of 2-5 coloured shapes on a noisy plain background.

    Class 0 is background. Foreground class ``c`` is drawn with probability
    proportional to ``imbalance ** -c``; its shape kind is fixed by the class
    and its colour is a class mean plus Gaussian jitter, so colours of
    different classes overlap.
    """
    if num_classes < 3:
        raise ValueError("need at least 3 classes (background plus two shapes)")
    if imbalance < 1:
        raise ValueError("imbalance must be >= 1")
    p = SynthParams(n, height, width, num_classes, imbalance, color_spread)
    palette = class_palette(num_classes)
    probs = class_probabilities(num_classes, imbalance)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, labels, shapes = _one_image(rng, p, palette, probs)
        out.append(Sample(image, labels, i, shapes))
    return out


# ---------------------------------------------------------------------------
# splits and samplers


@dataclass(frozen=True)
class SplitSpec:
    labeled: tuple
    unlabeled: tuple
    seed: int


def make_splits(n_total: int, n_labeled: int, n_splits: int = 4, base_seed: int = 0) -> list[SplitSpec]:
    if not 0 <= n_labeled <= n_total:
        raise ValueError(f"n_labeled={n_labeled} outside [0, {n_total}]")
    splits = []
    for s in range(n_splits):
        seed = int(np.random.SeedSequence([base_seed, s]).generate_state(1)[0])
        rng = np.random.default_rng(seed)
        labeled = np.sort(rng.choice(n_total, size=n_labeled, replace=False))
        rest = np.setdiff1d(np.arange(n_total), labeled)
        splits.append(SplitSpec(tuple(int(i) for i in labeled), tuple(int(i) for i in rest), seed))
    return splits


@dataclass(frozen=True)
class BatchPlan:
    mode: str
    ids: tuple
    labeled: tuple  # per-element flag

    @property
    def labeled_ids(self) -> list[int]:
        return [i for i, f in zip(self.ids, self.labeled) if f]

    @property
    def unlabeled_ids(self) -> list[int]:
        return [i for i, f in zip(self.ids, self.labeled) if not f]

    @property
    def B_L(self) -> int:
        return sum(self.labeled)

    @property
    def B_U(self) -> int:
        return len(self.ids) - self.B_L


class CyclicStream:
    """Endless reshuffled pass over ``ids``; position q lives in epoch q // len."""

    def __init__(self, ids: Sequence[int], seed: int, tag: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.seed, self.tag = seed, tag
        self._cache: dict[int, np.ndarray] = {}

    def _epoch(self, e: int) -> np.ndarray:
        perm = self._cache.get(e)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.tag, e]).permutation(self.ids)
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[e] = perm
        return perm

    def take(self, step: int, size: int) -> list[int]:
        n = len(self.ids)
        out = []
        for q in range(step * size, (step + 1) * size):
            out.append(int(self._epoch(q // n)[q % n]))
        return out


class ExplicitSampler:
    """Separate labeled and unlabeled streams; every batch has B_L + B_U items."""

    def __init__(self, split: SplitSpec, B_L: int, B_U: int, seed: int):
        if B_L < 1 or B_U < 1:
            raise ValueError("B_L and B_U must be >= 1")
        if not split.labeled:
            raise ValueError("labeled pool is empty")
        if not split.unlabeled:
            raise ValueError("unlabeled pool is empty; run the supervised baseline instead")
        self.B_L, self.B_U = B_L, B_U
        self.lab = CyclicStream(split.labeled, seed, 0)
        self.unl = CyclicStream(split.unlabeled, seed, 1)

    def plan(self, step: int) -> BatchPlan:
        lab, unl = self.lab.take(step, self.B_L), self.unl.take(step, self.B_U)
        return BatchPlan("explicit", tuple(lab + unl), (True,) * len(lab) + (False,) * len(unl))


class SupervisedSampler:
    """The labeled stream of :class:`ExplicitSampler` on its own."""

    def __init__(self, split: SplitSpec, B_L: int, seed: int):
        if B_L < 1:
            raise ValueError("B_L must be >= 1")
        if not split.labeled:
            raise ValueError("labeled pool is empty")
        self.lab = CyclicStream(split.labeled, seed, 0)
        self.B_L = B_L

    def plan(self, step: int) -> BatchPlan:
        lab = self.lab.take(step, self.B_L)
        return BatchPlan("supervised", tuple(lab), (True,) * len(lab))


class ImplicitSampler:
    """One stream over labeled and unlabeled ids together."""

    def __init__(self, split: SplitSpec, B: int, seed: int):
        if B < 1:
            raise ValueError("B must be >= 1")
        self.B = B
        self.labeled_set = frozenset(split.labeled)
        self.stream = CyclicStream(sorted(split.labeled + split.unlabeled), seed, 2)

    def plan(self, step: int) -> BatchPlan:
        ids = self.stream.take(step, self.B)
        return BatchPlan("implicit", tuple(ids), tuple(i in self.labeled_set for i in ids))


def _stream(sampler, start: int) -> Iterator[BatchPlan]:
    step = start
    while True:
        yield sampler.plan(step)
        step += 1


def explicit_batches(split: SplitSpec, B_L: int, B_U: int, seed: int, start: int = 0) -> Iterator[BatchPlan]:
    return _stream(ExplicitSampler(split, B_L, B_U, seed), start)


def implicit_batches(split: SplitSpec, B: int, seed: int, start: int = 0) -> Iterator[BatchPlan]:
    return _stream(ImplicitSampler(split, B, seed), start)


# ---------------------------------------------------------------------------
# label barrier


class LabelAccessError(PermissionError):
    """Raised when the training path asks for the labels of an unlabeled sample."""


class TrainView:
    """What the training loop may see: all images, labels of labeled ids only."""

    def __init__(self, samples: Sequence[Sample], split: SplitSpec):
        self._samples = {s.id: s for s in samples}
        self._labeled = frozenset(split.labeled)

    def image(self, i: int) -> np.ndarray:
        return self._samples[i].image

    def labels(self, i: int) -> np.ndarray:
        if i not in self._labeled:
            raise LabelAccessError(f"sample {i} is unlabeled in this split")
        return self._samples[i].labels


# ---------------------------------------------------------------------------
# export / import


def export_dataset(directory, samples: Sequence[Sample], params: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for s in samples:
        img, lab = f"image_{s.id:05d}.npy", f"label_{s.id:05d}.pgm"
        np.save(d / img, s.image)
        write_pgm(d / lab, s.labels)
        files.append({"id": s.id, "image": img, "labels": lab, "shapes": list(s.shapes)})
    manifest = {"format": "densefixmatch-synth/1", "params": params, "samples": files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d / "manifest.json"


def import_dataset(directory) -> tuple[list[Sample], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = [
        Sample(np.load(d / f["image"]), read_pgm(d / f["labels"]), int(f["id"]), tuple(f.get("shapes", ())))
        for f in manifest["samples"]
    ]
    return samples, manifest["params"]
