"""Evaluation metrics and analytic cost models.

Mask IoU, boundary IoU (intersection of each mask with its own contour band,
band distance defaulting to 2% of the image diagonal), incoherent-region
statistics of a coarse prediction, the oracle fill study, and forward-pass
FLOPs / peak-activation-memory models for the sparse token sequence versus a
dense grid transformer. All pure functions.

Cost model conventions: one multiply-accumulate = 2 FLOPs; per encoder layer
projections 4*2*T*C^2, attention scores+apply 2*2*T^2*C, FFN 2*2*T*C*(4C);
decoder 2*T*C^2 + 2*T*C. Peak activation memory is the larger of the
attention phase (heads*T^2 score matrices plus x,Q,K,V rows live) and the
FFN phase (input, 4C hidden, output rows live) at 4 bytes per value; layers
run sequentially so one layer is live at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import detect_oracle
from .masks import (
    as_mask,
    boundary_band,
    incoherence_pyramid,
    mask_at_level,
    upsample_nn,
)
from .quadtree import build, oracle_refined_values, propagate


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; two empty masks count as identical (1.0)."""
    a, b = as_mask(a).astype(bool), as_mask(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def default_band_distance(shape: tuple[int, int]) -> int:
    """Boundary-band distance: 2% of the image diagonal, at least 1 pixel."""
    return max(1, round(0.02 * float(np.hypot(*shape))))


def boundary_iou(a: np.ndarray, b: np.ndarray, d: int | None = None) -> float:
    """IoU restricted to each mask's own boundary band of distance ``d``."""
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if d is None:
        d = default_band_distance(a.shape)
    a_strip = a & boundary_band(a, d)
    b_strip = b & boundary_band(b, d)
    return mask_iou(a_strip, b_strip)


def _coarse_to_binary(coarse: np.ndarray) -> np.ndarray:
    coarse = np.asarray(coarse)
    if coarse.dtype == np.uint8 and coarse.max(initial=0) <= 1:
        return coarse.astype(np.uint8)
    return (coarse >= 0.5).astype(np.uint8)


def _upsample_to(m: np.ndarray, size: int) -> np.ndarray:
    while m.shape[0] < size:
        m = upsample_nn(m)
    if m.shape[0] != size:
        raise ValueError(f"cannot upsample {m.shape} to {size} by doubling")
    return m


def incoherence_stats(gt: np.ndarray, coarse: np.ndarray, depth: int = 3) -> dict[str, float]:
    """Incoherent-region statistics of a coarse prediction against gt.

    area_fraction: union of incoherence over levels, mapped to the finest
    level, relative to the gt bounding box at that level. err_recall:
    fraction of wrongly predicted pixels (coarse upsampled to gt resolution)
    that lie inside incoherent regions; 1.0 when there are no errors.
    err_acc: fraction of incoherent-region pixels the coarse prediction gets
    right; 1.0 when there are no incoherent pixels.
    """
    gt = as_mask(gt)
    if not gt.any():
        raise ValueError("empty ground-truth mask")
    pyr = incoherence_pyramid(gt, depth)
    finest = gt.shape[0] // 2
    union = np.zeros((finest, finest), np.uint8)
    for lvl in pyr.levels:
        union |= _upsample_to(lvl, finest)

    gt_fine = mask_at_level(gt, depth, depth)
    rows = np.nonzero(gt_fine.any(axis=1))[0]
    cols = np.nonzero(gt_fine.any(axis=0))[0]
    bbox_area = int((rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1))
    area_fraction = float(union.sum()) / bbox_area

    pred = _upsample_to(_coarse_to_binary(coarse), gt.shape[0])
    inc_full = _upsample_to(union, gt.shape[0]).astype(bool)
    wrong = pred != gt
    n_wrong = int(wrong.sum())
    err_recall = 1.0 if n_wrong == 0 else int((wrong & inc_full).sum()) / n_wrong
    n_inc = int(inc_full.sum())
    err_acc = 1.0 if n_inc == 0 else int((~wrong & inc_full).sum()) / n_inc
    return {"area_fraction": area_fraction, "err_recall": err_recall, "err_acc": err_acc}


def oracle_fill_study(gt: np.ndarray, coarse: np.ndarray, detection=None,
                      depth: int = 3) -> dict[str, float]:
    """IoU of the coarse prediction vs the same prediction with incoherent
    regions filled with ground-truth values through quadtree propagation.

    ``detection`` defaults to the reconstruction-complete oracle; a
    DetectionResult (or any nested pyramid) substitutes the learned detector.
    """
    gt = as_mask(gt)
    truth = mask_at_level(gt, depth, depth)
    coarse = np.asarray(coarse, dtype=np.float64)
    iou_coarse = mask_iou(_upsample_to(_coarse_to_binary(coarse), truth.shape[0]), truth)
    if detection is None:
        detection = detect_oracle(gt, depth, reconstruction_complete=True)
    tree = build(detection)
    refined = oracle_refined_values(tree, gt)
    _, filled = propagate(tree, coarse, refined)
    return {"iou_coarse": iou_coarse, "iou_filled": mask_iou(filled, truth)}


@dataclass(frozen=True)
class AttentionCost:
    """Token/model dimensions for the sparse-vs-dense cost comparison."""

    nodes: int
    reference_tokens: int = 196
    channels: int = 256
    heads: int = 4
    layers: int = 3
    ffn_mult: int = 4

    @property
    def tokens(self) -> int:
        return self.nodes + self.reference_tokens


def flops_model(cost: AttentionCost) -> int:
    """Forward-pass FLOPs of the sequence encoder plus pixel decoder."""
    t, c = cost.tokens, cost.channels
    per_layer = 4 * 2 * t * c * c + 2 * 2 * t * t * c + 2 * 2 * t * c * (cost.ffn_mult * c)
    decoder = 2 * t * c * c + 2 * t * c
    return cost.layers * per_layer + decoder


def memory_model(cost: AttentionCost) -> int:
    """Peak activation bytes: max of attention phase and FFN phase, 4 B/value."""
    t, c = cost.tokens, cost.channels
    if t == 0:
        return 0
    attention_phase = cost.heads * t * t * 4 + 4 * t * c * 4
    ffn_phase = (2 + cost.ffn_mult) * t * c * 4
    return max(attention_phase, ffn_phase)


def flops_mlp(nodes: int, channels: int = 256) -> int:
    """Forward FLOPs of the per-node MLP baseline (three hidden layers)."""
    c = channels
    return nodes * (3 * 2 * c * c + 2 * c)


@dataclass(frozen=True)
class EvalRecord:
    """Per-sample evaluation row emitted as one JSON line."""

    id: str
    mask_iou: float
    boundary_iou: float
    band: int
    incoherent_area_fraction: float
    node_count: int
    flops: int
    memory_bytes: int
    detector_recall: float | None = None
    detector_accuracy: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "mask_iou": self.mask_iou,
            "boundary_iou": self.boundary_iou,
            "band": self.band,
            "incoherent_area_fraction": self.incoherent_area_fraction,
            "node_count": self.node_count,
            "flops": self.flops,
            "memory_bytes": self.memory_bytes,
            "detector_recall": self.detector_recall,
            "detector_accuracy": self.detector_accuracy,
        }
