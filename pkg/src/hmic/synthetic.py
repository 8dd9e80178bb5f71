"""Procedural stand-in slides for the Normal / EE / CD hierarchy.

Parent classes differ in blob size and density; CD slides additionally carry dark stripes
whose period encodes the Marsh severity. Tissue sits on an ellipse over a white
background so border patches are blank. Output is deterministic per seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import PatchSpec, extract_patches, quantize

PARENT_LABELS = ("Normal", "EE", "CD")
CHILD_LABELS = ("I", "IIIa", "IIIb", "IIIc")
ROUTED_PARENT = "CD"

TISSUE_RGB = np.array([195.0, 112.0, 172.0])
NUCLEUS_RGB = np.array([120.0, 60.0, 150.0])
STRIPE_RGB = np.array([115.0, 55.0, 125.0])
BACKGROUND = 246.0
NOISE_SIGMA = 4.0
# per-slide multiplicative stain variation, uniform in [1 - j, 1 + j] per channel
STAIN_JITTER = 0.02

# (blob radius, fraction of tissue area covered by blob centres' disks)
BLOBS = {"Normal": (9, 0.08), "EE": (3, 0.40), "CD": (5, 0.18)}
STRIPE_PERIOD = {"I": 16, "IIIa": 10, "IIIb": 6, "IIIc": 4}
STRIPE_WIDTH = 2


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    parent_label: str
    child_label: str | None
    split: str


def _leaf_classes():
    leaves = [(p, None) for p in PARENT_LABELS if p != ROUTED_PARENT]
    return leaves + [(ROUTED_PARENT, c) for c in CHILD_LABELS]


def _stamp_disks(img, rng, radius, coverage, color, mask):
    h, w = mask.shape
    count = int(round(coverage * mask.sum() / (np.pi * radius * radius)))
    ys = rng.integers(0, h, size=count)
    xs = rng.integers(0, w, size=count)
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = yy * yy + xx * xx <= radius * radius
    for cy, cx in zip(ys, xs):
        if not mask[cy, cx]:
            continue
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
        sub = disk[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
        sub = sub & mask[y0:y1, x0:x1]
        img[y0:y1, x0:x1][sub] = color


def render_slide(rng, parent: str, child: str | None, size: int = 256) -> np.ndarray:
    """One synthetic slide as a (size, size, 3) uint8 image."""
    if parent not in PARENT_LABELS:
        raise ValueError(f"unknown parent label {parent!r}")
    if (child is not None) != (parent == ROUTED_PARENT):
        raise ValueError("a child label is required for CD and forbidden otherwise")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    ry, rx = size * rng.uniform(0.42, 0.47), size * rng.uniform(0.42, 0.47)
    tissue = ((yy - c) / ry) ** 2 + ((xx - c) / rx) ** 2 <= 1.0

    stain = rng.uniform(1 - STAIN_JITTER, 1 + STAIN_JITTER, size=3)
    img = np.full((size, size, 3), BACKGROUND)
    img[tissue] = TISSUE_RGB * stain

    if child is not None:
        period = STRIPE_PERIOD[child]
        angle = rng.uniform(-0.3, 0.3)
        phase = rng.uniform(0, period)
        coord = yy * np.cos(angle) + xx * np.sin(angle) + phase
        stripes = tissue & (np.mod(coord, period) < STRIPE_WIDTH)
        img[stripes] = STRIPE_RGB * stain

    radius, coverage = BLOBS[parent]
    _stamp_disks(img, rng, radius, coverage, NUCLEUS_RGB * stain, tissue)

    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return quantize(img)


def generate_slides(seed: int = 0, n_slides_per_class: int = 6, image_size: int = 256,
                    test_fraction: float = 0.25):
    """Slides for every leaf class (Normal, EE and each CD severity).

    Returns ``(records, images)`` in generation order. The last ``test_fraction`` of each
    leaf class (at least one slide) is marked ``split="test"``.
    """
    if n_slides_per_class < 2:
        raise ValueError("need at least two slides per class for a train/test split")
    records, images = [], []
    root = np.random.SeedSequence(seed)
    leaves = _leaf_classes()
    streams = root.spawn(len(leaves) * n_slides_per_class)
    n_test = max(1, int(round(n_slides_per_class * test_fraction)))
    k = 0
    for parent, child in leaves:
        tag = parent if child is None else f"{parent}-{child}"
        for j in range(n_slides_per_class):
            rng = np.random.default_rng(streams[k])
            k += 1
            split = "test" if j >= n_slides_per_class - n_test else "train"
            records.append(SlideRecord(f"{tag}-{j:03d}", parent, child, split))
            images.append(render_slide(rng, parent, child, image_size))
    return records, images


def tissue_fraction(patch) -> float:
    """Share of pixels noticeably darker than the white background."""
    gray = np.asarray(patch, dtype=np.float64).mean(axis=-1)
    return float(np.mean(gray < BACKGROUND - 4 * NOISE_SIGMA))


def synthetic_patch_dataset(seed: int = 0, n_slides_per_class: int = 4, image_size: int = 128,
                            patch_size: int = 32, level: str = "parent", min_tissue: float = 0.9):
    """Mostly-tissue patches with integer labels and slide split.

    ``level`` is ``"parent"`` (labels over PARENT_LABELS, all slides) or ``"child"``
    (labels over CHILD_LABELS, CD slides only). Returns ``(x uint8, y, split)``.
    """
    if level not in ("parent", "child"):
        raise ValueError("level must be 'parent' or 'child'")
    records, images = generate_slides(seed, n_slides_per_class, image_size)
    xs, ys, splits = [], [], []
    for rec, img in zip(records, images):
        if level == "child" and rec.child_label is None:
            continue
        label = (PARENT_LABELS.index(rec.parent_label) if level == "parent"
                 else CHILD_LABELS.index(rec.child_label))
        for p in extract_patches(img, PatchSpec(patch_size), rec.slide_id):
            if tissue_fraction(p.image) >= min_tissue:
                xs.append(p.image)
                ys.append(label)
                splits.append(rec.split)
    return np.stack(xs), np.array(ys, dtype=int), np.array(splits)


def balance_classes(y, split, seed: int = 0) -> np.ndarray:
    """Sorted indices of a class-balanced subsample, drawn separately within each split."""
    y, split = np.asarray(y), np.asarray(split)
    rng = np.random.default_rng(seed)
    keep = []
    for part in np.unique(split):
        in_part = split == part
        classes = np.unique(y[in_part])
        n = min(int(np.sum(in_part & (y == c))) for c in classes)
        for c in classes:
            keep.append(rng.permutation(np.flatnonzero(in_part & (y == c)))[:n])
    return np.sort(np.concatenate(keep))
