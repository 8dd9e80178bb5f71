"""Image-level transforms: patch extraction, bilinear resize, color balancing and a
per-channel optical-density stain normalizer.

Images are ``uint8`` arrays of shape (height, width, 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interp import bilinear

# Image-independent gray-world gains reached at a balancing percentage of 100.
DEFAULT_REFERENCE_GAINS = (0.85, 1.15, 1.0)
# Percentages used to augment parent-level training data.
DEFAULT_BALANCE_LEVELS = (0.01, 1.0, 10.0, 50.0)


class PatchSizeError(ValueError):
    pass


def quantize(values):
    """Float channel values in [0, 255] -> uint8 by round-half-up, clamped."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def as_image(array) -> np.ndarray:
    img = np.asarray(array)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected a (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be non-empty")
    return img


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int
    overlap_fraction: float = 0.0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.stride < 1:
            raise ValueError("overlap leaves a stride below one pixel")

    @property
    def stride(self) -> int:
        return int(np.floor(self.patch_size * (1.0 - self.overlap_fraction) + 0.5))


@dataclass
class Patch:
    image: np.ndarray
    slide_id: str
    origin_x: int
    origin_y: int


def window_origins(length: int, size: int, stride: int) -> list:
    """Sliding-window starts along one axis, plus an end-aligned start if needed for coverage."""
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return starts


def extract_patches(image, spec: PatchSpec, slide_id: str = "") -> list:
    """Square crops in row-major origin order (y, then x)."""
    img = as_image(image)
    h, w = img.shape[:2]
    if spec.patch_size > min(h, w):
        raise PatchSizeError(f"patch size {spec.patch_size} exceeds image {w}x{h}")
    s = spec.patch_size
    return [Patch(img[y:y + s, x:x + s].copy(), slide_id, x, y)
            for y in window_origins(h, s, spec.stride)
            for x in window_origins(w, s, spec.stride)]


def resize_bilinear(image, target_w: int, target_h: int) -> np.ndarray:
    img = as_image(image)
    if (target_h, target_w) == img.shape[:2]:
        return img.copy()
    return quantize(bilinear(img, target_h, target_w))


@dataclass(frozen=True)
class ColorBalanceParams:
    """``out = (alpha * A * diag(gains) * in) ** gamma`` on [0, 1] channel values."""
    alpha: float = 1.0
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gains: tuple = (1.0, 1.0, 1.0)
    gamma: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        g = np.asarray(self.gains, dtype=float)
        if m.shape != (3, 3) or g.shape != (3,):
            raise ValueError("matrix must be 3x3 and gains length 3")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(g))
                and np.isfinite(self.alpha) and np.isfinite(self.gamma)):
            raise ValueError("color-balance parameters must be finite")
        if self.alpha <= 0 or self.gamma <= 0 or np.any(g <= 0):
            raise ValueError("alpha, gamma and gains must be > 0")
        object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in m))
        object.__setattr__(self, "gains", tuple(float(v) for v in g))

    def transform(self) -> np.ndarray:
        """The combined 3x3 linear map ``alpha * A * diag(gains)``."""
        return self.alpha * np.asarray(self.matrix) @ np.diag(self.gains)


IDENTITY_BALANCE = ColorBalanceParams()


def color_balance_float(rgb, params: ColorBalanceParams):
    """Apply the balancing transform to float RGB values in [0, 1]; result clamped to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = rgb @ params.transform().T
    if params.gamma != 1.0:
        lin = np.maximum(lin, 0.0) ** params.gamma
    return np.clip(lin, 0.0, 1.0)


def color_balance(image, params: ColorBalanceParams) -> np.ndarray:
    img = as_image(image)
    if params == IDENTITY_BALANCE:
        return img.copy()
    return quantize(color_balance_float(img / 255.0, params) * 255.0)


def balance_level_params(percentage: float, reference_gains=DEFAULT_REFERENCE_GAINS) -> ColorBalanceParams:
    """Map a balancing percentage to parameters.

    Gains move linearly from (1, 1, 1) at 0% to ``reference_gains`` at 100%; the exposure
    gain, color matrix and gamma stay at identity.
    """
    if percentage < 0:
        raise ValueError("balancing percentage must be >= 0")
    t = percentage / 100.0
    ref = np.asarray(reference_gains, dtype=float)
    # this form reproduces both endpoints exactly in floating point
    gains = (1.0 - t) + t * ref
    return ColorBalanceParams(gains=tuple(gains))


@dataclass(frozen=True)
class StainNormParams:
    """Target per-channel mean and standard deviation in optical-density space."""
    mean: tuple
    std: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("stain statistics need three channels")
        if any(s <= 0 for s in self.std):
            raise ValueError("target standard deviations must be > 0")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))


def optical_density(image):
    return -np.log((np.asarray(image, dtype=np.float64) + 1.0) / 256.0)


def from_optical_density(od):
    return quantize(256.0 * np.exp(-od) - 1.0)


def stain_stats(images) -> StainNormParams:
    """Per-channel OD mean/std pooled over one image or a stack of images."""
    od = optical_density(np.asarray(images)).reshape(-1, 3)
    std = od.std(axis=0)
    return StainNormParams(tuple(od.mean(axis=0)), tuple(np.where(std > 0, std, 1.0)))


def stain_normalize(image, params: StainNormParams) -> np.ndarray:
    """Shift and scale each OD channel to the target statistics.

    A channel with zero spread is passed through unchanged.
    """
    img = as_image(image)
    od = optical_density(img)
    out = img.copy()
    for c in range(3):
        ch = od[..., c]
        sd = ch.std()
        if sd <= 0:
            continue
        mapped = (ch - ch.mean()) / sd * params.std[c] + params.mean[c]
        out[..., c] = from_optical_density(mapped)
    return out


def to_float(images) -> np.ndarray:
    """uint8 images -> float32 network inputs in [0, 1]."""
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)
