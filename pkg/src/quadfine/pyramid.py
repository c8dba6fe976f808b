"""RoI feature pyramid assembly and sampling.

A refinement pyramid holds three square feature levels (28, 56, 112,
coarse to fine) plus a 14x14 reference grid obtained by average-pooling the
28 level. Crops resample bilinearly with half-pixel centers and clamped
borders. All operations are read-only and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LEVEL_SIZES = (28, 56, 112)
REFERENCE_SIZE = 14


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite values")
    return a


def avg_pool2(a: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the trailing two axes."""
    *lead, h, w = a.shape
    return a.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-level [C,H,W] features keyed by square size, plus the reference grid."""

    levels: dict[int, np.ndarray]
    reference: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if tuple(sorted(self.levels)) != LEVEL_SIZES:
            raise ValueError(f"pyramid must have levels {LEVEL_SIZES}, got {sorted(self.levels)}")
        c = None
        for size in LEVEL_SIZES:
            fm = _check_finite(self.levels[size], f"level {size}")
            if fm.ndim != 3 or fm.shape[1:] != (size, size):
                raise ValueError(f"level {size} has shape {fm.shape}")
            if c is None:
                c = fm.shape[0]
            elif fm.shape[0] != c:
                raise ValueError("channel count differs across levels")
            self.levels[size] = fm
        ref = self.reference
        if ref is None:
            ref = avg_pool2(self.levels[28])
        object.__setattr__(self, "reference", _check_finite(ref, "reference grid"))
        if self.reference.shape != (c, REFERENCE_SIZE, REFERENCE_SIZE):
            raise ValueError(f"reference grid has shape {self.reference.shape}")

    @property
    def channels(self) -> int:
        return self.levels[28].shape[0]

    @classmethod
    def from_finest(cls, finest: np.ndarray) -> "FeaturePyramid":
        """Derive the 56/28 levels (and reference) from a [C,112,112] block."""
        finest = _check_finite(finest, "finest level")
        if finest.shape[1:] != (112, 112):
            raise ValueError(f"finest level must be [C,112,112], got {finest.shape}")
        f56 = avg_pool2(finest)
        f28 = avg_pool2(f56)
        return cls(levels={112: finest, 56: f56, 28: f28})


def roi_level_select(w: float, h: float) -> int:
    """FPN start level for an RoI: floor(4 + log2(sqrt(w*h)/224)), clamped to [4, 5]."""
    if w < 1 or h < 1:
        raise ValueError("RoI dimensions must be >= 1 pixel")
    i = math.floor(4 + math.log2(math.sqrt(w * h) / 224.0))
    return min(5, max(4, i))


def _bilinear_grid(fm: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at fractional pixel coords (border-clamped)."""
    c, h, w = fm.shape
    y = np.clip(ys, 0.0, h - 1.0)
    x = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (y - y0).astype(fm.dtype)
    wx = (x - x0).astype(fm.dtype)
    top = fm[:, y0, x0] * (1 - wx) + fm[:, y0, x1] * wx
    bot = fm[:, y1, x0] * (1 - wx) + fm[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_feature(fm: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear sample at normalized coords (x, y) in [0,1], half-pixel centers."""
    fm = np.asarray(fm, dtype=np.float32)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"normalized coords out of range: ({x}, {y})")
    c, h, w = fm.shape
    return _bilinear_grid(fm, np.asarray([y * h - 0.5]), np.asarray([x * w - 0.5]))[:, 0]


def resample_square(fm: np.ndarray, box: tuple[float, float, float, float], size: int) -> np.ndarray:
    """Crop a normalized box from [C,H,W] and resample to size x size bilinearly."""
    fm = np.asarray(fm, dtype=np.float32)
    x0, y0, x1, y1 = box
    c, h, w = fm.shape
    us = y0 + (np.arange(size) + 0.5) / size * (y1 - y0)
    vs = x0 + (np.arange(size) + 0.5) / size * (x1 - x0)
    ys = us * h - 0.5
    xs = vs * w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_grid(fm, yy.reshape(-1), xx.reshape(-1)).reshape(c, size, size)


def roi_extract(image_pyramid: dict[int, np.ndarray], box: tuple[float, float, float, float],
                image_size: int) -> FeaturePyramid:
    """Build the 28/56/112 RoI pyramid from full-image FPN levels P2..P5.

    ``image_pyramid`` maps FPN indices (2..5) to [C,H,W] arrays; ``box`` is
    (x0, y0, x1, y1) normalized to [0,1]. The crop is taken from levels
    {P_i, P_{i-1}, P_{i-2}} at sizes {28, 56, 112} with the start level from
    :func:`roi_level_select`.
    """
    x0, y0, x1, y1 = box
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(f"degenerate or out-of-bounds box {box}")
    w_px = (x1 - x0) * image_size
    h_px = (y1 - y0) * image_size
    start = roi_level_select(w_px, h_px)
    levels = {}
    for step, size in enumerate(LEVEL_SIZES):
        fpn_index = start - step
        if fpn_index not in image_pyramid:
            raise ValueError(f"image pyramid missing FPN level P{fpn_index}")
        levels[size] = resample_square(image_pyramid[fpn_index], box, size)
    return FeaturePyramid(levels=levels)
