"""Incoherent-region detection.

Two modes share one output contract:

* an exact oracle derived from the ground-truth mask (optionally
  "reconstruction-complete": each level additionally flags pixels whose value
  differs from their parent's, upward-closed, which is what exact coarse-to-
  fine filling needs), and
* a learned cascade: a four-conv 3x3 trunk plus 1x1 classifier on the
  coarsest level, then per finer level a single 1x1 fusion conv over the
  level features concatenated with the upsampled coarser probability map and
  a 1x1 classifier. Binarized finer levels are always intersected with the
  upsampled coarser binarization, so every detection satisfies the guidance
  restriction; the ablation hook disables only the coarser-probability input
  to the fusion convs.

Training uses BCE against the oracle maps with recall-oriented dilation
jitter. Inference with shared read-only parameters is thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .masks import (
    IncoherencePyramid,
    incoherence_pyramid,
    mask_at_level,
    reconstruction_error,
    upsample_nn,
)
from .pyramid import LEVEL_SIZES, FeaturePyramid, resample_square
from .synth import hash_seed

THRESHOLD = 0.5


def detect_oracle(gt: np.ndarray, depth: int = 3,
                  reconstruction_complete: bool = False) -> IncoherencePyramid:
    """Oracle incoherence pyramid of a ground-truth mask.

    The plain pyramid holds the per-level or-pooled XOR maps. With
    ``reconstruction_complete`` each level l >= 2 is unioned with the
    unpooled reconstruction-error field of the level-l mask (pixels whose
    value is lost going one level coarser) and the result is upward-closed,
    which makes coarse-to-fine filling with true values exact.
    """
    pyr = incoherence_pyramid(gt, depth)
    if not reconstruction_complete:
        return pyr
    levels = [lvl.copy() for lvl in pyr.levels]
    for l in range(2, depth + 1):
        levels[l - 1] |= reconstruction_error(mask_at_level(gt, l, depth))
    return IncoherencePyramid(tuple(levels)).closed()


@dataclass(frozen=True)
class DetectionResult:
    """Per-level probabilities and binarized maps, coarsest (28) first.

    Binarized levels always satisfy the guidance restriction; ``guided``
    records whether the coarser-probability input fusion was enabled.
    """

    probs: dict[int, np.ndarray]
    masks: dict[int, np.ndarray]
    guided: bool

    def __post_init__(self):
        sizes = sorted(self.masks)
        for coarse_size, fine_size in zip(sizes, sizes[1:]):
            cover = upsample_nn(self.masks[coarse_size])
            bad = self.masks[fine_size] & ~cover
            if bad.any():
                r, c = next(zip(*np.nonzero(bad)))
                raise ValueError(
                    f"guidance restriction violated at level {fine_size} pixel ({r}, {c})"
                )

    def binary_levels(self) -> tuple[np.ndarray, ...]:
        return tuple(self.masks[size] for size in sorted(self.masks))


@dataclass(frozen=True)
class JitterConfig:
    p: float = 0.5
    r: int = 1


class Detector:
    """Cascaded incoherence detector over the 28/56/112 feature pyramid."""

    def __init__(self, channels: int, guidance: bool = True, seed: int = 0,
                 dtype=np.float32):
        self.channels = channels
        self.guidance = guidance
        self.dtype = dtype
        rng = np.random.default_rng(hash_seed(seed, 101))
        c = channels
        self.params: dict[str, nn.Parameter] = {}

        def param(name, shape, fan_in):
            p = nn.Parameter(name, nn.init_uniform(rng, shape, fan_in, dtype))
            self.params[name] = p
            return p

        def zero_param(name, shape):
            p = nn.Parameter(name, np.zeros(shape, dtype))
            self.params[name] = p
            return p

        # stage-1 trunk: first conv folds in the coarse-mask channel
        in_ch = c + 1
        for i in range(4):
            param(f"trunk{i}.w", (c, in_ch, 3, 3), in_ch * 9)
            zero_param(f"trunk{i}.b", (c,))
            in_ch = c
        param("head1.w", (1, c, 1, 1), c)
        zero_param("head1.b", (1,))
        fuse_in = c + 1 if guidance else c
        for stage in (2, 3):
            param(f"fuse{stage}.w", (c, fuse_in, 1, 1), fuse_in)
            zero_param(f"fuse{stage}.b", (c,))
            param(f"head{stage}.w", (1, c, 1, 1), c)
            zero_param(f"head{stage}.b", (1,))

    def parameters(self) -> list[nn.Parameter]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = arrays[name].astype(self.dtype)

    def forward(self, pyramid: FeaturePyramid, coarse: np.ndarray) -> dict[int, nn.Tensor]:
        """Per-level incoherence logits as graph tensors, keyed by level size."""
        if pyramid.channels != self.channels:
            raise ValueError(
                f"pyramid has {pyramid.channels} channels, detector built for {self.channels}"
            )
        coarse = np.asarray(coarse, dtype=self.dtype)
        if coarse.shape != (LEVEL_SIZES[0], LEVEL_SIZES[0]):
            coarse = resample_square(coarse[None], (0.0, 0.0, 1.0, 1.0), LEVEL_SIZES[0])[0]
        p = self.params
        x = nn.Tensor(np.concatenate(
            [pyramid.levels[28].astype(self.dtype), coarse[None]], axis=0))
        h = x
        for i in range(4):
            h = nn.relu(nn.conv2d(h, p[f"trunk{i}.w"], p[f"trunk{i}.b"]))
        logits = {28: nn.conv2d(h, p["head1.w"], p["head1.b"])}
        prev_prob = nn.sigmoid(logits[28])
        for stage, size in ((2, 56), (3, 112)):
            feats = nn.Tensor(pyramid.levels[size].astype(self.dtype))
            if self.guidance:
                guide = nn.upsample2_nn(prev_prob)
                fused_in = nn.concat([feats, guide], axis=0)
            else:
                fused_in = feats
            fused = nn.relu(nn.conv2d(fused_in, p[f"fuse{stage}.w"], p[f"fuse{stage}.b"]))
            logits[size] = nn.conv2d(fused, p[f"head{stage}.w"], p[f"head{stage}.b"])
            prev_prob = nn.sigmoid(logits[size])
        return logits

    def detect(self, pyramid: FeaturePyramid, coarse: np.ndarray,
               threshold: float = THRESHOLD) -> DetectionResult:
        logits = self.forward(pyramid, coarse)
        probs = {size: 1.0 / (1.0 + np.exp(-t.data[0])) for size, t in logits.items()}
        masks: dict[int, np.ndarray] = {}
        prev = None
        for size in sorted(probs):
            m = (probs[size] >= threshold).astype(np.uint8)
            if prev is not None:
                m &= upsample_nn(prev)
            masks[size] = m
            prev = m
        return DetectionResult(probs=probs, masks=masks, guided=self.guidance)


def jitter_targets(oracle: IncoherencePyramid, jitter: JitterConfig, seed: int) -> list[np.ndarray]:
    """Dilation-only jitter of the oracle maps (recall matters more than precision)."""
    rng = np.random.default_rng(seed)
    out = []
    for lvl in oracle.levels:
        target = lvl
        if jitter.p > 0 and rng.random() < jitter.p:
            radius = int(rng.integers(0, jitter.r + 1))
            if radius > 0 and lvl.any():
                from scipy import ndimage

                footprint = np.ones((2 * radius + 1, 2 * radius + 1), bool)
                target = ndimage.binary_dilation(lvl.astype(bool), footprint).astype(np.uint8)
        out.append(target)
    return out


def detector_loss(logits: dict[int, nn.Tensor], target: IncoherencePyramid,
                  jitter: JitterConfig | None = None, seed: int = 0) -> nn.Tensor:
    """Mean BCE over all levels' pixels against (optionally jittered) targets.

    Weighted by the incoherence-loss coefficient (0.5) only when composed
    into the joint objective; this returns the plain BCE.
    """
    targets = jitter_targets(target, jitter, seed) if jitter else list(target.levels)
    sizes = sorted(logits)
    if len(sizes) != len(targets):
        raise ValueError(f"{len(sizes)} predicted levels vs {len(targets)} target levels")
    flat_logits = nn.concat([nn.reshape(logits[s], (-1,)) for s in sizes], axis=0)
    flat_targets = np.concatenate([t.reshape(-1) for t in targets]).astype(np.float64)
    return nn.bce_with_logits(flat_logits, flat_targets)


def detector_metrics(pred, oracle: IncoherencePyramid,
                     accuracy_mode: str = "precision") -> dict[str, float]:
    """Recall and accuracy of detected pixels vs the oracle, pooled over levels.

    ``pred`` is a DetectionResult or a plain IncoherencePyramid. Accuracy is
    precision over detected pixels by default; ``pixel`` switches to balanced
    pixelwise accuracy.
    """
    if isinstance(pred, IncoherencePyramid):
        pred_levels = pred.levels
    else:
        pred_levels = tuple(pred.masks[size] for size in sorted(pred.masks))
    tp = fp = fn = tn = 0
    for lvl_pred, lvl in zip(pred_levels, oracle.levels):
        p = lvl_pred.astype(bool)
        o = lvl.astype(bool)
        tp += int((p & o).sum())
        fp += int((p & ~o).sum())
        fn += int((~p & o).sum())
        tn += int((~p & ~o).sum())
    recall = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
    if accuracy_mode == "precision":
        if tp + fp == 0:
            accuracy = 1.0 if (tp + fn) == 0 else 0.0
        else:
            accuracy = tp / (tp + fp)
    elif accuracy_mode == "pixel":
        accuracy = (tp + tn) / max(tp + tn + fp + fn, 1)
    else:
        raise ValueError(f"unknown accuracy mode {accuracy_mode!r}")
    return {"recall": recall, "accuracy": accuracy}


@dataclass
class DetectorTrainResult:
    model: Detector
    epoch_losses: list[float] = field(default_factory=list)


def train_detector(samples, epochs: int, seed: int = 0, guidance: bool = True,
                   lr: float = 0.5, momentum: float = 0.9, weight_decay: float = 1e-4,
                   jitter: JitterConfig | None = None) -> DetectorTrainResult:
    """SGD training against oracle incoherence maps; deterministic per seed.

    ``samples`` is a sequence of (pyramid, coarse, gt) triples or Sample
    objects. Oracle maps are computed once per sample and reused. The
    learning rate steps down by 10x at 2/3 and 11/12 of the run, which keeps
    the rare-positive heads from oscillating late in training.
    """
    jitter = jitter if jitter is not None else JitterConfig()
    triples = []
    for s in samples:
        if hasattr(s, "pyramid"):
            triples.append((s.pyramid, s.coarse, s.gt))
        else:
            triples.append(s)
    if not triples:
        raise ValueError("no training samples")
    channels = triples[0][0].channels
    model = Detector(channels, guidance=guidance, seed=seed)
    oracles = [detect_oracle(gt) for _, _, gt in triples]
    opt = nn.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    order_rng = np.random.default_rng(hash_seed(seed, 7))
    decay_at = {round(epochs * 2 / 3), round(epochs * 11 / 12)}
    losses = []
    for epoch in range(epochs):
        if epoch in decay_at:
            opt.lr *= 0.1
        order = order_rng.permutation(len(triples))
        total = 0.0
        for j in order:
            pyramid, coarse, _ = triples[j]
            opt.zero_grad()
            logits = model.forward(pyramid, coarse)
            loss = detector_loss(logits, oracles[j], jitter,
                                 seed=hash_seed(seed, 11, epoch, int(j)))
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"detector loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data)
        losses.append(total / len(triples))
    return DetectorTrainResult(model=model, epoch_losses=losses)
