"""Confidence-filtered pseudo-labels and their alignment to the strong view."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .augment import AugRecord, apply_geom_to_labels, compose, invert
from .autodiff import IGNORE


def pseudolabel(probs, tau: float) -> np.ndarray:
    """Hard labels from a K,H,W (or N,K,H,W) probability map.

    A pixel keeps its most likely class (lowest index on ties) when that
    class's probability is at least ``tau``, otherwise it becomes IGNORE.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    p = np.asarray(getattr(probs, "data", probs))
    axis = p.ndim - 3
    labels = np.argmax(p, axis=axis).astype(np.uint8)
    conf = np.max(p, axis=axis)
    labels[conf < tau] = IGNORE
    return labels


def match(pl: np.ndarray, alpha_rec: AugRecord, strong_rec: AugRecord) -> np.ndarray:
    """Move a weak-view pseudo-label into the strong view's pixel frame.

    One nearest-neighbour warp by strong ∘ weak⁻¹; only the geometric parts
    of the two records are used.
    """
    if pl.shape != alpha_rec.geometric.out_size:
        raise ValueError(f"pseudo-label shape {pl.shape} != weak view size {alpha_rec.geometric.out_size}")
    return apply_geom_to_labels(compose(strong_rec.geometric, invert(alpha_rec.geometric)), pl)


def valid_count(lm: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(lm) != IGNORE))


def write_pgm(path, lm: np.ndarray) -> None:
    """Binary 8-bit PGM; IGNORE is stored as 255."""
    lm = np.asarray(lm, dtype=np.uint8)
    h, w = lm.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(lm.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = raw[m.end(): m.end() + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
