"""Binary mask algebra: 2x nearest-neighbor sampling, or-pool downsampling,
incoherent-region maps, multi-level incoherence pyramids, and boundary bands.

Masks are dense row-major ``numpy`` arrays of dtype uint8 with values in
{0, 1}. Nearest-neighbor downsampling samples the top-left pixel of each 2x2
block; odd-sized inputs are zero-padded on the bottom/right before sampling.
All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "as_mask",
    "downsample_nn",
    "upsample_nn",
    "orpool_downsample",
    "incoherence",
    "incoherence_pyramid",
    "reconstruction_error",
    "mask_at_level",
    "contour",
    "boundary_band",
    "IncoherencePyramid",
    "load_pgm",
    "save_pgm",
]


def as_mask(a) -> np.ndarray:
    """Validate and convert an array-like to a 2D uint8 {0,1} mask."""
    m = np.asarray(a)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    m = m.astype(np.uint8, copy=False)
    if m.size and m.max() > 1:
        raise ValueError("mask values must be in {0, 1}")
    return m


def _pad_even(m: np.ndarray) -> np.ndarray:
    """Zero-pad bottom/right so both dimensions are even."""
    h, w = m.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        m = np.pad(m, ((0, ph), (0, pw)))
    return m


def downsample_nn(m: np.ndarray) -> np.ndarray:
    """2x nearest-neighbor downsample, keeping the top-left pixel per block."""
    m = _pad_even(as_mask(m))
    return np.ascontiguousarray(m[::2, ::2])


def upsample_nn(m: np.ndarray) -> np.ndarray:
    """2x nearest-neighbor upsample, replicating each pixel into a 2x2 block."""
    m = np.asarray(m)
    return np.repeat(np.repeat(m, 2, axis=0), 2, axis=1)


def orpool_downsample(m: np.ndarray) -> np.ndarray:
    """2x downsample taking the logical OR over each 2x2 block."""
    m = _pad_even(as_mask(m))
    h, w = m.shape
    blocks = m.reshape(h // 2, 2, w // 2, 2)
    return blocks.max(axis=(1, 3))


def incoherence(m: np.ndarray) -> np.ndarray:
    """Incoherent-region map of ``m`` at half resolution.

    A half-resolution pixel is incoherent when ``m`` cannot be reconstructed
    from its 2x downsampling inside that pixel's 2x2 block, i.e. the or-pooled
    XOR of ``m`` with the down-then-up resampled mask. Equivalent to flagging
    every non-constant 2x2 block of ``m``.
    """
    m = _pad_even(as_mask(m))
    rec = upsample_nn(downsample_nn(m))
    return orpool_downsample(m ^ rec)


def reconstruction_error(m: np.ndarray) -> np.ndarray:
    """Per-pixel XOR of ``m`` with its down-then-up reconstruction.

    Same resolution as ``m``; flags the pixels whose values are lost by 2x
    nearest-neighbor sampling (the field that :func:`incoherence` or-pools).
    """
    m = _pad_even(as_mask(m))
    return m ^ upsample_nn(downsample_nn(m))


def mask_at_level(gt: np.ndarray, level: int, depth: int = 3) -> np.ndarray:
    """Ground truth downsampled to quadtree level ``level`` (1 = coarsest).

    With ``depth`` levels, level ``depth`` sits at half the input resolution
    and each coarser level halves again.
    """
    if not 1 <= level <= depth:
        raise ValueError(f"level must be in [1, {depth}], got {level}")
    m = as_mask(gt)
    for _ in range(depth - level + 1):
        m = downsample_nn(m)
    return m


@dataclass(frozen=True)
class IncoherencePyramid:
    """Per-level incoherence maps, index 0 = coarsest level (L1).

    Level l+1 has exactly twice the height/width of level l.
    """

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i in range(1, len(self.levels)):
            ph, pw = self.levels[i - 1].shape
            h, w = self.levels[i].shape
            if (h, w) != (2 * ph, 2 * pw):
                raise ValueError(
                    f"level {i + 1} shape {(h, w)} is not 2x level {i} shape {(ph, pw)}"
                )

    @property
    def depth(self) -> int:
        return len(self.levels)

    def nested(self) -> bool:
        """True when every finer 1-pixel lies under a coarser 1-pixel."""
        for i in range(1, len(self.levels)):
            cover = upsample_nn(self.levels[i - 1])
            if np.any(self.levels[i] & ~cover):
                return False
        return True

    def closed(self) -> "IncoherencePyramid":
        """Apply the parent constraint by upward closure (add parents)."""
        levels = [lvl.copy() for lvl in self.levels]
        for i in range(len(levels) - 1, 0, -1):
            levels[i - 1] |= orpool_downsample(levels[i])
        return IncoherencePyramid(tuple(levels))


def incoherence_pyramid(gt: np.ndarray, depth: int = 3) -> IncoherencePyramid:
    """Incoherence maps of ``gt`` for ``depth`` levels, coarsest first.

    The finest map sits at half the ground-truth resolution; the input
    resolution must be divisible by 2**depth.
    """
    gt = as_mask(gt)
    h, w = gt.shape
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if h % (1 << depth) or w % (1 << depth):
        raise ValueError(
            f"resolution {h}x{w} not divisible by 2^{depth}; cannot build pyramid"
        )
    levels = []
    m = gt
    for _ in range(depth):
        levels.append(incoherence(m))
        m = downsample_nn(m)
    return IncoherencePyramid(tuple(reversed(levels)))


def contour(m: np.ndarray) -> np.ndarray:
    """Contour pixels: foreground pixels with a background 4-neighbor.

    Pixels outside the image do not count as background, so constant masks
    have no contour.
    """
    m = as_mask(m).astype(bool)
    edge = np.zeros_like(m)
    edge[:-1, :] |= m[:-1, :] & ~m[1:, :]
    edge[1:, :] |= m[1:, :] & ~m[:-1, :]
    edge[:, :-1] |= m[:, :-1] & ~m[:, 1:]
    edge[:, 1:] |= m[:, 1:] & ~m[:, :-1]
    return edge.astype(np.uint8)


def boundary_band(m: np.ndarray, d: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``d`` of a contour pixel of ``m``."""
    if d < 1:
        raise ValueError("band distance must be >= 1")
    c = contour(m).astype(bool)
    if not c.any():
        return np.zeros_like(c, dtype=np.uint8)
    band = c.copy()
    for _ in range(d):
        grown = band.copy()
        grown[:-1, :] |= band[1:, :]
        grown[1:, :] |= band[:-1, :]
        prev = grown.copy()
        grown[:, :-1] |= prev[:, 1:]
        grown[:, 1:] |= prev[:, :-1]
        band = grown
    return band.astype(np.uint8)


def save_pgm(path, m: np.ndarray) -> None:
    """Write a mask as binary PGM (P5, maxval 255, foreground 255)."""
    m = as_mask(m)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((m * np.uint8(255)).tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM and threshold at 128 into a {0,1} mask."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (missing P5 magic)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval > 255:
        raise ValueError(f"{path}: maxval {maxval} exceeds one byte")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return (data.reshape(h, w) >= 128).astype(np.uint8)
