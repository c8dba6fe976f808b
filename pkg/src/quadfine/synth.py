"""Deterministic synthetic dataset generator.

Each sample is one analytic shape (ellipse, polygon, or star) rasterized at
224x224, a degraded 28x28 coarse probability map standing in for a coarse
mask head, and a simulated feature pyramid whose channels carry enough signal
to make refinement learnable: rendered intensity with texture noise, a
clipped signed-distance channel, a gradient-magnitude channel, and fixed
random projections of local 3x3 patches.

Everything is a pure function of (spec/config, seed). On disk: ground truth
as PGM, coarse and features as FTNS tensors (finest 112 level; coarser levels
are derived by average pooling at load time), plus a tab-separated manifest
``id  gt  coarse  features  split`` with paths relative to the manifest.
Sample generation is independent per id and file writes are atomic.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .masks import as_mask, boundary_band, save_pgm, load_pgm
from .pyramid import FeaturePyramid, avg_pool2
from .tensorio import load_tensor, save_tensor

CANVAS = 224
COARSE_SIZE = 28


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # ellipse | polygon | star
    center: tuple[float, float]  # fractional (cx, cy)
    size: tuple[float, float]  # ellipse: semi-axes; polygon/star: (outer, inner) radius
    rotation: float = 0.0
    vertices: int = 0  # polygon/star only, >= 3
    seed: int = 0


@dataclass(frozen=True)
class NoiseConfig:
    p: float = 0.9  # per-pixel perturbation probability inside the band
    radius: int = 2  # band distance and max morphological radius


@dataclass(frozen=True)
class FeatureConfig:
    channels: int = 32
    texture_amp: float = 0.25
    sdt_noise_px: float = 0.2  # sigma of the distance-field perturbation, pixels
    sdt_clip_px: float = 8.0
    projection_seed: int = 0


@dataclass(frozen=True)
class GenConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train_fraction: float = 0.8


@dataclass(frozen=True)
class Sample:
    id: str
    gt: np.ndarray  # 224x224 {0,1}
    coarse: np.ndarray  # 28x28 float32 in [0,1]
    pyramid: FeaturePyramid


def _polygon_vertices(spec: ShapeSpec) -> np.ndarray:
    n = spec.vertices
    if n < 3:
        raise ValueError(f"{spec.kind} needs >= 3 vertices, got {n}")
    cx, cy = spec.center
    r_out, r_in = spec.size
    if spec.kind == "polygon":
        angles = spec.rotation + 2 * math.pi * np.arange(n) / n
        radii = np.full(n, r_out)
    else:  # star: alternate outer/inner radius
        angles = spec.rotation + math.pi * np.arange(2 * n) / n
        radii = np.where(np.arange(2 * n) % 2 == 0, r_out, r_in)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    x1, y1 = verts[-1]
    for x2, y2 in verts:
        straddles = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= straddles & (px < x_cross)
        x1, y1 = x2, y2
    return inside


def rasterize(spec: ShapeSpec, resolution: int = CANVAS) -> np.ndarray:
    """Rasterize an analytic shape onto pixel centers; bit-identical per spec."""
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    coords = (np.arange(resolution) + 0.5) / resolution
    py, px = np.meshgrid(coords, coords, indexing="ij")
    if spec.kind == "ellipse":
        a, b = spec.size
        if a <= 0 or b <= 0:
            raise ValueError(f"degenerate ellipse axes {spec.size}")
        cx, cy = spec.center
        ct, st = math.cos(spec.rotation), math.sin(spec.rotation)
        dx, dy = px - cx, py - cy
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif spec.kind in ("polygon", "star"):
        if spec.size[0] <= 0 or (spec.kind == "star" and spec.size[1] <= 0):
            raise ValueError(f"degenerate {spec.kind} radius {spec.size}")
        inside = _points_in_polygon(px, py, _polygon_vertices(spec))
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    mask = inside.astype(np.uint8)
    if not mask.any():
        raise ValueError(f"shape rasterized to an empty mask: {spec}")
    return mask


def _chebyshev_morph(binary: np.ndarray, radius: int, dilate: bool) -> np.ndarray:
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), bool)
    if dilate:
        return ndimage.binary_dilation(binary, footprint)
    return ndimage.binary_erosion(binary, footprint)


def degrade_to_coarse(gt: np.ndarray, noise: NoiseConfig, seed: int) -> np.ndarray:
    """Average-pool the ground truth to 28x28 and corrupt the boundary band.

    Band pixels are, with probability ``noise.p``, replaced by the value of a
    random erosion or dilation (radius 1..noise.radius) of the thresholded
    pooled mask. Changes never leave the band; deterministic per seed.
    """
    gt = as_mask(gt)
    if gt.shape != (CANVAS, CANVAS):
        raise ValueError(f"expected {CANVAS}x{CANVAS} ground truth, got {gt.shape}")
    factor = CANVAS // COARSE_SIZE
    pooled = gt.reshape(COARSE_SIZE, factor, COARSE_SIZE, factor).mean(axis=(1, 3)).astype(np.float32)
    if noise.p <= 0.0 or noise.radius < 1:
        return pooled
    binary = pooled >= 0.5
    band = boundary_band(binary.astype(np.uint8), noise.radius).astype(bool)
    rng = np.random.default_rng(seed)
    selected = (rng.random(pooled.shape) < noise.p) & band
    use_dilation = rng.random(pooled.shape) < 0.5
    radii = rng.integers(1, noise.radius + 1, size=pooled.shape)
    out = pooled.copy()
    for r in range(1, noise.radius + 1):
        dil = _chebyshev_morph(binary, r, dilate=True)
        ero = _chebyshev_morph(binary, r, dilate=False)
        at_r = selected & (radii == r)
        out[at_r & use_dilation] = dil[at_r & use_dilation]
        out[at_r & ~use_dilation] = ero[at_r & ~use_dilation]
    return np.clip(out, 0.0, 1.0)


def signed_distance(gt: np.ndarray) -> np.ndarray:
    """Signed Euclidean distance to the contour: positive inside, pixels."""
    fg = as_mask(gt).astype(bool)
    if fg.all():
        return np.full(fg.shape, np.inf, dtype=np.float64)
    if not fg.any():
        return np.full(fg.shape, -np.inf, dtype=np.float64)
    inside = ndimage.distance_transform_edt(fg)
    outside = ndimage.distance_transform_edt(~fg)
    return inside - outside


def synth_features(gt: np.ndarray, coarse: np.ndarray | None, channels: int, seed: int,
                   config: FeatureConfig | None = None) -> FeaturePyramid:
    """Simulated feature pyramid for one sample (coarse is accepted for
    interface symmetry; the default channel recipe derives everything from gt).
    """
    cfg = config or FeatureConfig()
    if channels < 4:
        raise ValueError("need at least 4 feature channels")
    gt = as_mask(gt)
    h, w = gt.shape
    rng = np.random.default_rng(seed)

    rendered = gt.astype(np.float32)
    if cfg.texture_amp > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
        tex /= max(tex.std(), 1e-12)
        rendered = rendered + np.float32(cfg.texture_amp) * tex.astype(np.float32)

    sdt = signed_distance(gt)
    sdt = sdt + rng.normal(0.0, cfg.sdt_noise_px, size=sdt.shape)
    ch_sdt = (np.clip(sdt, -cfg.sdt_clip_px, cfg.sdt_clip_px) / cfg.sdt_clip_px).astype(np.float32)

    gy, gx = np.gradient(rendered.astype(np.float64))
    ch_grad = np.sqrt(gx * gx + gy * gy).astype(np.float32)

    proj_rng = np.random.default_rng(cfg.projection_seed)
    proj = proj_rng.normal(0.0, 1.0 / 3.0, size=(channels - 3, 9)).astype(np.float32)
    padded = np.pad(rendered, 1, mode="edge")
    patches = np.lib.stride_tricks.sliding_window_view(padded, (3, 3)).reshape(h, w, 9)
    projected = (patches @ proj.T).transpose(2, 0, 1)

    full = np.concatenate([rendered[None], ch_sdt[None], ch_grad[None], projected], axis=0)
    return FeaturePyramid.from_finest(avg_pool2(full))


def default_shape_spec(rng: np.random.Generator, index: int = 0) -> ShapeSpec:
    """Draw a shape from the default distribution (kept fat enough that
    incoherent regions stay sparse and pooled values match point samples)."""
    kind = rng.choice(["ellipse", "polygon", "star"], p=[0.4, 0.3, 0.3])
    center = (rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58))
    rotation = rng.uniform(0.0, math.pi)
    if kind == "ellipse":
        size = (rng.uniform(0.18, 0.34), rng.uniform(0.18, 0.34))
        vertices = 0
    elif kind == "polygon":
        size = (rng.uniform(0.20, 0.36), 0.0)
        vertices = int(rng.integers(4, 9))
    else:
        outer = rng.uniform(0.24, 0.34)
        size = (outer, outer * rng.uniform(0.56, 0.7))
        vertices = int(rng.integers(5, 7))
    return ShapeSpec(kind=kind, center=center, size=size, rotation=rotation,
                     vertices=vertices, seed=index)


def _check_margin(gt: np.ndarray, margin: int = 2) -> None:
    if gt[:margin].any() or gt[-margin:].any() or gt[:, :margin].any() or gt[:, -margin:].any():
        raise ValueError("shape touches the canvas border margin")


def make_sample(index: int, seed: int, config: GenConfig) -> Sample:
    """Build sample ``index`` of the dataset identified by ``seed``."""
    shape_rng = np.random.default_rng([seed, 1, index])
    spec = default_shape_spec(shape_rng, index)
    gt = rasterize(spec, CANVAS)
    _check_margin(gt)
    coarse = degrade_to_coarse(gt, config.noise, seed=hash_seed(seed, 2, index))
    pyramid = synth_features(gt, coarse, config.features.channels,
                             seed=hash_seed(seed, 3, index), config=config.features)
    return Sample(id=f"sample_{index:04d}", gt=gt, coarse=coarse, pyramid=pyramid)


def hash_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integer parts (for nested rngs)."""
    h = 1469598103934665603
    for part in parts:
        for b in int(part).to_bytes(8, "little", signed=True):
            h = ((h ^ b) * 1099511628211) & 0x7FFFFFFFFFFFFFFF
    return h


def generate_dataset(out_dir, count: int, config: GenConfig | None = None, seed: int = 0) -> Path:
    """Write ``count`` samples plus a manifest; returns the manifest path."""
    config = config or GenConfig()
    config = replace(config, features=replace(config.features, projection_seed=hash_seed(seed, 4)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = round(config.train_fraction * count)
    lines = []
    for i in range(count):
        sample = make_sample(i, seed, config)
        gt_path = f"{sample.id}_gt.pgm"
        coarse_path = f"{sample.id}_coarse.ftns"
        feat_path = f"{sample.id}_features.ftns"
        save_pgm(out_dir / gt_path, sample.gt)
        save_tensor(out_dir / coarse_path, sample.coarse[None].astype(np.float32))
        save_tensor(out_dir / feat_path, sample.pyramid.levels[112])
        split = "train" if i < n_train else "test"
        lines.append(f"{sample.id}\t{gt_path}\t{coarse_path}\t{feat_path}\t{split}\n")
    manifest = out_dir / "manifest.tsv"
    tmp = manifest.with_suffix(".tsv.tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, manifest)
    return manifest


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    gt_path: Path
    coarse_path: Path
    feature_path: Path
    split: str


def read_manifest(manifest_path) -> list[ManifestRecord]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for line in manifest_path.read_text("utf-8").splitlines():
        if not line.strip():
            continue
        sid, gt, coarse, feat, split = line.split("\t")
        records.append(ManifestRecord(sid, base / gt, base / coarse, base / feat, split))
    return records


def load_sample(record: ManifestRecord) -> Sample:
    gt = load_pgm(record.gt_path)
    coarse = load_tensor(record.coarse_path)[0]
    pyramid = FeaturePyramid.from_finest(load_tensor(record.feature_path))
    return Sample(id=record.id, gt=gt, coarse=coarse, pyramid=pyramid)
