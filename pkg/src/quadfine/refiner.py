"""Refinement transformer over quadtree nodes, with baselines and training.

The node encoder fuses four cues per node: the feature vector at the node's
location and level, a projection of the 3x3 coarse-probability patch, a
compression of the 3x3 feature neighborhood, and (added after fusion) a fixed
2D sinusoidal positional encoding plus a learned per-level embedding. The
sequence encoder runs post-norm transformer layers (self-attention then FFN)
over all node tokens together with the full 14x14 reference grid; a two-layer
MLP decodes per-token mask probabilities. A per-node MLP and a dense-grid
transformer consume the identical node encodings as baselines.

Training is teacher-forced: node selection comes from the reconstruction-
complete oracle while the learned detector (optional, joint flag) trains on
its own BCE. SGD with momentum, deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .detector import Detector, JitterConfig, detect_oracle, detector_loss
from .masks import downsample_nn, mask_at_level
from .metrics import AttentionCost, boundary_iou, memory_model
from .pyramid import LEVEL_SIZES, REFERENCE_SIZE, FeaturePyramid, avg_pool2
from .quadtree import PointQuadtree, build, incoherent_sequence, propagate, finest_only_propagate
from .synth import Sample, hash_seed

REFERENCE_LEVEL_INDEX = 3
REFINE_WEIGHT = 1.0  # refinement term coefficient in the joint objective
INCOHERENCE_WEIGHT = 0.5  # detector BCE coefficient in the joint objective
DENSE_MEMORY_BUDGET = 64 << 20  # bytes; dense grids beyond this are rejected


@dataclass(frozen=True)
class RefinerConfig:
    channels: int = 64
    heads: int = 4
    layers: int = 3
    ffn_mult: int = 4
    feature_channels: int = 32

    def __post_init__(self):
        if self.channels % (2 * self.heads) or self.channels % 4:
            raise ValueError("channels must be divisible by 4 and by 2*heads")


@dataclass(frozen=True)
class NodeCues:
    """Constant per-node inputs gathered outside the autodiff graph."""

    fine: np.ndarray  # [N, F] feature at the node's pixel and level
    context: np.ndarray  # [N, 9F] flattened 3x3 neighborhood, border-clamped
    coarse_patch: np.ndarray  # [N, 9] 3x3 coarse-probability patch
    position: np.ndarray  # [N, 2] normalized (x, y) pixel centers
    level_index: np.ndarray  # [N] 0..2 for tree levels, 3 for reference

    def __len__(self):
        return self.fine.shape[0]


def positional_encoding(position: np.ndarray, channels: int) -> np.ndarray:
    """Fixed sinusoidal encoding: channels/2 dims from x, channels/2 from y.

    Frequency term k uses wavelength 10000^(2k/(channels/2)); sin on even
    indices, cos on odd. Identical positions encode identically across levels.
    """
    n = position.shape[0]
    half = channels // 2
    k = np.arange(half // 2)
    inv_wavelength = np.power(10000.0, -2.0 * k / half)
    out = np.empty((n, channels), dtype=np.float64)
    for axis in (0, 1):  # x fills the first half, y the second
        phase = position[:, axis : axis + 1] * inv_wavelength[None, :]
        out[:, axis * half + 0 : (axis + 1) * half : 2] = np.sin(phase)
        out[:, axis * half + 1 : (axis + 1) * half : 2] = np.cos(phase)
    return out


def _gather_patches(fm: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Border-clamped 3x3 neighborhoods: [N, 9*C] in row-major patch order."""
    c, h, w = fm.shape
    patches = []
    for dr in (-1, 0, 1):
        rr = np.clip(rows + dr, 0, h - 1)
        for dc in (-1, 0, 1):
            cc = np.clip(cols + dc, 0, w - 1)
            patches.append(fm[:, rr, cc].T)  # [N, C]
    return np.concatenate(patches, axis=1)


def gather_cues(tree: PointQuadtree, node_ids, pyramid: FeaturePyramid,
                coarse: np.ndarray) -> NodeCues:
    """Assemble the four information cues for the given tree nodes."""
    coarse = np.asarray(coarse, dtype=np.float32)
    n = len(node_ids)
    f = pyramid.channels
    fine = np.empty((n, f), np.float32)
    context = np.empty((n, 9 * f), np.float32)
    patch = np.empty((n, 9), np.float32)
    pos = np.empty((n, 2), np.float64)
    level_index = np.empty(n, np.int64)
    by_level: dict[int, list[int]] = {}
    for row, nid in enumerate(node_ids):
        by_level.setdefault(tree.nodes[nid].level, []).append(row)
    for level, rows_at in by_level.items():
        res = tree.resolutions[level - 1]
        fm = pyramid.levels[res]
        idx = np.asarray(rows_at)
        rr = np.array([tree.nodes[node_ids[i]].r for i in rows_at])
        cc = np.array([tree.nodes[node_ids[i]].c for i in rows_at])
        fine[idx] = fm[:, rr, cc].T
        context[idx] = _gather_patches(fm, rr, cc)
        pos[idx, 0] = (cc + 0.5) / res
        pos[idx, 1] = (rr + 0.5) / res
        crow = np.clip((pos[idx, 1] * coarse.shape[0]).astype(np.int64), 0, coarse.shape[0] - 1)
        ccol = np.clip((pos[idx, 0] * coarse.shape[1]).astype(np.int64), 0, coarse.shape[1] - 1)
        patch[idx] = _gather_patches(coarse[None], crow, ccol)
        level_index[idx] = level - 1
    return NodeCues(fine, context, patch, pos, level_index)


def grid_cues(fm: np.ndarray, coarse_map: np.ndarray, level_index: int) -> NodeCues:
    """Cues for every pixel of a square feature map (reference grid / dense)."""
    c, size, _ = fm.shape
    rr, cc = np.divmod(np.arange(size * size), size)
    fine = fm[:, rr, cc].T.astype(np.float32)
    context = _gather_patches(fm.astype(np.float32), rr, cc)
    pos = np.stack([(cc + 0.5) / size, (rr + 0.5) / size], axis=1)
    coarse_map = np.asarray(coarse_map, dtype=np.float32)
    crow = np.clip((pos[:, 1] * coarse_map.shape[0]).astype(np.int64), 0, coarse_map.shape[0] - 1)
    ccol = np.clip((pos[:, 0] * coarse_map.shape[1]).astype(np.int64), 0, coarse_map.shape[1] - 1)
    patch = _gather_patches(coarse_map[None], crow, ccol)
    return NodeCues(fine, context, patch, pos,
                    np.full(size * size, level_index, np.int64))


def reference_cues(pyramid: FeaturePyramid, coarse: np.ndarray) -> NodeCues:
    """The full 14x14 reference grid, with cues from the pooled coarse map."""
    pooled_coarse = avg_pool2(np.asarray(coarse, dtype=np.float32)[None])[0]
    return grid_cues(pyramid.reference, pooled_coarse, REFERENCE_LEVEL_INDEX)


class NodeEncoder:
    """Projects and fuses the four cues into one C-vector per node."""

    def __init__(self, config: RefinerConfig, rng: np.random.Generator, dtype,
                 params: dict[str, nn.Parameter], prefix: str = "encoder"):
        c, f = config.channels, config.feature_channels
        self.config = config
        self.params = params
        self.prefix = prefix

        def param(name, shape, fan_in):
            params[f"{prefix}.{name}"] = nn.Parameter(
                f"{prefix}.{name}", nn.init_uniform(rng, shape, fan_in, dtype))

        def zero_param(name, shape):
            params[f"{prefix}.{name}"] = nn.Parameter(f"{prefix}.{name}", np.zeros(shape, dtype))

        param("context.w", (9 * f, c), 9 * f)
        zero_param("context.b", (c,))
        param("cue.w", (9, c), 9)
        zero_param("cue.b", (c,))
        param("fuse.w", (f + 2 * c, c), f + 2 * c)
        zero_param("fuse.b", (c,))
        param("level_emb", (4, c), c)

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def encode(self, cues: NodeCues) -> nn.Tensor:
        dtype = self._p("fuse.w").data.dtype
        ctx = nn.linear(nn.Tensor(cues.context.astype(dtype)), self._p("context.w"), self._p("context.b"))
        cue = nn.linear(nn.Tensor(cues.coarse_patch.astype(dtype)), self._p("cue.w"), self._p("cue.b"))
        stacked = nn.concat([nn.Tensor(cues.fine.astype(dtype)), cue, ctx], axis=1)
        fused = nn.linear(stacked, self._p("fuse.w"), self._p("fuse.b"))
        pos = positional_encoding(cues.position, self.config.channels).astype(dtype)
        levels = nn.embedding(self._p("level_emb"), cues.level_index)
        return nn.add(nn.add(fused, nn.Tensor(pos)), levels)


class Refiner:
    """Node encoder + post-norm transformer stack + sigmoid pixel decoder."""

    def __init__(self, config: RefinerConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or RefinerConfig()
        self.dtype = dtype
        rng = np.random.default_rng(hash_seed(seed, 211))
        self.params: dict[str, nn.Parameter] = {}
        self.encoder = NodeEncoder(self.config, rng, dtype, self.params)
        c = self.config.channels

        def param(name, shape, fan_in):
            self.params[name] = nn.Parameter(name, nn.init_uniform(rng, shape, fan_in, dtype))

        def const_param(name, shape, value):
            self.params[name] = nn.Parameter(name, np.full(shape, value, dtype))

        for i in range(self.config.layers):
            for proj in ("q", "k", "v", "o"):
                param(f"layer{i}.{proj}.w", (c, c), c)
                const_param(f"layer{i}.{proj}.b", (c,), 0.0)
            const_param(f"layer{i}.ln1.g", (c,), 1.0)
            const_param(f"layer{i}.ln1.b", (c,), 0.0)
            param(f"layer{i}.ffn1.w", (c, self.config.ffn_mult * c), c)
            const_param(f"layer{i}.ffn1.b", (self.config.ffn_mult * c,), 0.0)
            param(f"layer{i}.ffn2.w", (self.config.ffn_mult * c, c), self.config.ffn_mult * c)
            const_param(f"layer{i}.ffn2.b", (c,), 0.0)
            const_param(f"layer{i}.ln2.g", (c,), 1.0)
            const_param(f"layer{i}.ln2.b", (c,), 0.0)
        param("decoder.w1", (c, c), c)
        const_param("decoder.b1", (c,), 0.0)
        param("decoder.w2", (c, 1), c)
        const_param("decoder.b2", (1,), 0.0)

    def parameters(self) -> list[nn.Parameter]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arrays[name].astype(self.dtype)

    def _attention(self, x: nn.Tensor, i: int) -> nn.Tensor:
        p = self.params
        c = self.config.channels
        dh = c // self.config.heads
        q = nn.linear(x, p[f"layer{i}.q.w"], p[f"layer{i}.q.b"])
        k = nn.linear(x, p[f"layer{i}.k.w"], p[f"layer{i}.k.b"])
        v = nn.linear(x, p[f"layer{i}.v.w"], p[f"layer{i}.v.b"])
        heads = []
        for h in range(self.config.heads):
            qh = nn.narrow(q, 1, h * dh, dh)
            kh = nn.narrow(k, 1, h * dh, dh)
            vh = nn.narrow(v, 1, h * dh, dh)
            scores = nn.mul(nn.matmul(qh, nn.transpose(kh)), 1.0 / math.sqrt(dh))
            heads.append(nn.matmul(nn.softmax_rows(scores), vh))
        ctx = nn.concat(heads, axis=1)
        return nn.linear(ctx, p[f"layer{i}.o.w"], p[f"layer{i}.o.b"])

    def run_stack(self, tokens: nn.Tensor) -> nn.Tensor:
        p = self.params
        x = tokens
        for i in range(self.config.layers):
            x = nn.layer_norm(nn.add(x, self._attention(x, i)),
                              p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
            ff = nn.linear(nn.relu(nn.linear(x, p[f"layer{i}.ffn1.w"], p[f"layer{i}.ffn1.b"])),
                           p[f"layer{i}.ffn2.w"], p[f"layer{i}.ffn2.b"])
            x = nn.layer_norm(nn.add(x, ff), p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        return x

    def decode(self, tokens: nn.Tensor) -> nn.Tensor:
        p = self.params
        h = nn.relu(nn.linear(tokens, p["decoder.w1"], p["decoder.b1"]))
        return nn.sigmoid(nn.reshape(nn.linear(h, p["decoder.w2"], p["decoder.b2"]), (-1,)))

    def refine(self, node_cues: NodeCues, ref_cues: NodeCues | None
               ) -> tuple[nn.Tensor | None, nn.Tensor | None]:
        """Per-node and per-reference-token values in (0,1).

        Reference tokens join the sequence for attention and supervision but
        are never propagated. An empty node set returns (None, ref values) or
        (None, None) when there is nothing at all to run.
        """
        pieces = []
        if len(node_cues):
            pieces.append(self.encoder.encode(node_cues))
        if ref_cues is not None and len(ref_cues):
            pieces.append(self.encoder.encode(ref_cues))
        if not pieces:
            return None, None
        tokens = pieces[0] if len(pieces) == 1 else nn.concat(pieces, axis=0)
        values = self.decode(self.run_stack(tokens))
        n = len(node_cues)
        node_vals = nn.narrow(values, 0, 0, n) if n else None
        ref_vals = None
        if ref_cues is not None and len(ref_cues):
            ref_vals = nn.narrow(values, 0, n, len(ref_cues))
        return node_vals, ref_vals


class MLPRefiner:
    """Per-node baseline: identical node encodings, three hidden layers,
    no cross-node interaction."""

    def __init__(self, config: RefinerConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or RefinerConfig()
        self.dtype = dtype
        rng = np.random.default_rng(hash_seed(seed, 211))  # same encoder init as Refiner
        self.params: dict[str, nn.Parameter] = {}
        self.encoder = NodeEncoder(self.config, rng, dtype, self.params)
        c = self.config.channels
        for i, (fan_in, fan_out) in enumerate([(c, c), (c, c), (c, c), (c, 1)]):
            self.params[f"mlp{i}.w"] = nn.Parameter(
                f"mlp{i}.w", nn.init_uniform(rng, (fan_in, fan_out), fan_in, dtype))
            self.params[f"mlp{i}.b"] = nn.Parameter(f"mlp{i}.b", np.zeros(fan_out, dtype))

    def parameters(self) -> list[nn.Parameter]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            p.data = arrays[name].astype(self.dtype)

    def refine(self, node_cues: NodeCues, ref_cues=None) -> tuple[nn.Tensor | None, None]:
        if not len(node_cues):
            return None, None
        x = self.encoder.encode(node_cues)
        for i in range(3):
            x = nn.relu(nn.linear(x, self.params[f"mlp{i}.w"], self.params[f"mlp{i}.b"]))
        out = nn.sigmoid(nn.reshape(nn.linear(x, self.params["mlp3.w"], self.params["mlp3.b"]), (-1,)))
        return out, None


def dense_transformer_baseline(model: Refiner, pyramid: FeaturePyramid, coarse: np.ndarray,
                               size: int) -> nn.Tensor:
    """Dense-grid comparison: every position of one level becomes a token.

    Only 14 (reference grid) and 28 grids fit the desk memory budget; larger
    grids are rejected with the modeled peak-activation estimate.
    """
    est = memory_model(AttentionCost(nodes=size * size, reference_tokens=0,
                                     channels=model.config.channels,
                                     heads=model.config.heads,
                                     layers=model.config.layers))
    if size not in (14, 28):
        raise ValueError(
            f"dense grid {size}x{size} exceeds the desk budget: modeled peak "
            f"activation {est} bytes (budget {DENSE_MEMORY_BUDGET})"
        )
    if size == 14:
        pooled = avg_pool2(np.asarray(coarse, dtype=np.float32)[None])[0]
        cues = grid_cues(pyramid.reference, pooled, REFERENCE_LEVEL_INDEX)
    else:
        cues = grid_cues(pyramid.levels[28], coarse, 0)
    vals, _ = model.refine(cues, None)
    return vals


def node_targets(tree: PointQuadtree, node_ids, gt: np.ndarray) -> np.ndarray:
    """Ground-truth value at each node's level and position."""
    masks = {lvl: mask_at_level(gt, lvl, tree.depth) for lvl in range(1, tree.depth + 1)}
    return np.array([float(masks[tree.nodes[i].level][tree.nodes[i].r, tree.nodes[i].c])
                     for i in node_ids])


def reference_targets(gt: np.ndarray) -> np.ndarray:
    """GT downsampled to the 14x14 reference grid, flattened row-major."""
    m = mask_at_level(gt, 1, 3)
    return downsample_nn(m).astype(np.float64).reshape(-1)


def refine_loss(node_vals: nn.Tensor | None, ref_vals: nn.Tensor | None,
                node_target: np.ndarray, ref_target: np.ndarray | None,
                weight: float = REFINE_WEIGHT) -> nn.Tensor:
    """L1 refinement loss: mean over node tokens plus mean over reference tokens."""
    parts = []
    if node_vals is not None:
        parts.append(nn.l1_loss(node_vals, node_target))
    if ref_vals is not None and ref_target is not None:
        parts.append(nn.l1_loss(ref_vals, ref_target))
    if not parts:
        raise ValueError("refine_loss needs at least one supervised token set")
    total = parts[0] if len(parts) == 1 else nn.add(parts[0], parts[1])
    return nn.mul(total, weight)


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    cap_per_level: int = 100
    joint_detector: bool = False
    model: str = "refiner"  # refiner | mlp
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    val_limit: int = 16  # validation samples scored per epoch


@dataclass
class TrainResult:
    model: object
    detector: Detector | None
    log: list[dict]
    diverged: bool = False


@dataclass
class _SampleCache:
    tree: PointQuadtree
    coarse: np.ndarray
    pyramid: FeaturePyramid
    gt: np.ndarray
    ref_cues: NodeCues
    ref_target: np.ndarray


def _prepare(sample: Sample) -> _SampleCache:
    tree = build(detect_oracle(sample.gt, reconstruction_complete=True))
    return _SampleCache(
        tree=tree,
        coarse=sample.coarse,
        pyramid=sample.pyramid,
        gt=sample.gt,
        ref_cues=reference_cues(sample.pyramid, sample.coarse),
        ref_target=reference_targets(sample.gt),
    )


def teacher_forced_biou(model, cache: _SampleCache, band: int | None = None) -> float:
    """Boundary IoU of the propagated refinement with oracle node selection."""
    ids = incoherent_sequence(cache.tree, training=False)
    truth = mask_at_level(cache.gt, 3)
    if not ids:
        up = cache.coarse
        for _ in range(2):
            up = np.repeat(np.repeat(up, 2, 0), 2, 1)
        return boundary_iou((up >= 0.5).astype(np.uint8), truth, band)
    cues = gather_cues(cache.tree, ids, cache.pyramid, cache.coarse)
    is_mlp = isinstance(model, MLPRefiner)
    vals, _ = model.refine(cues, None if is_mlp else cache.ref_cues)
    refined = dict(zip(ids, vals.data.astype(np.float64)))
    _, mask = propagate(cache.tree, cache.coarse, refined)
    return boundary_iou(mask, truth, band)


def train_refiner(train_samples, val_samples=(), config: TrainConfig | None = None) -> TrainResult:
    """Teacher-forced refinement training; deterministic given the seed.

    Returns the trained model (last epoch-end state on divergence), the
    optional jointly trained detector, and per-epoch JSON-ready log rows
    ``{"epoch", "refine_l1", "inc_bce", "val_biou"}``.
    """
    config = config or TrainConfig()
    caches = [_prepare(s) for s in train_samples]
    if not caches:
        raise ValueError("no training samples")
    feature_channels = caches[0].pyramid.channels
    rcfg = replace(config.refiner, feature_channels=feature_channels)
    if config.model == "refiner":
        model = Refiner(rcfg, seed=config.seed)
    elif config.model == "mlp":
        model = MLPRefiner(rcfg, seed=config.seed)
    else:
        raise ValueError(f"unknown model kind {config.model!r}")
    detector = None
    params = model.parameters()
    oracle_maps = None
    if config.joint_detector:
        detector = Detector(feature_channels, seed=config.seed)
        params = params + detector.parameters()
        oracle_maps = [detect_oracle(c.gt) for c in caches]
    opt = nn.SGD(params, lr=config.lr, momentum=config.momentum,
                 weight_decay=config.weight_decay)
    order_rng = np.random.default_rng(hash_seed(config.seed, 31))
    val_caches = [_prepare(s) for s in list(val_samples)[: config.val_limit]]
    log: list[dict] = []
    last_good = model.state_arrays()
    last_good_det = detector.state_arrays() if detector else None
    diverged = False

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(caches))
        refine_total, inc_total, steps = 0.0, 0.0, 0
        for j in order:
            cache = caches[j]
            ids = incoherent_sequence(cache.tree, config.cap_per_level,
                                      seed=hash_seed(config.seed, 41, epoch, int(j)),
                                      training=True)
            if not ids:
                continue
            cues = gather_cues(cache.tree, ids, cache.pyramid, cache.coarse)
            target = node_targets(cache.tree, ids, cache.gt)
            opt.zero_grad()
            if isinstance(model, MLPRefiner):
                vals, _ = model.refine(cues, None)
                loss = refine_loss(vals, None, target, None)
            else:
                vals, ref_vals = model.refine(cues, cache.ref_cues)
                loss = refine_loss(vals, ref_vals, target, cache.ref_target)
            refine_part = float(loss.data)
            if detector is not None:
                logits = detector.forward(cache.pyramid, cache.coarse)
                inc = detector_loss(logits, oracle_maps[j], JitterConfig(),
                                    seed=hash_seed(config.seed, 43, epoch, int(j)))
                inc_total += float(inc.data)
                loss = nn.add(loss, nn.mul(inc, INCOHERENCE_WEIGHT))
            if not np.isfinite(loss.data):
                model.load_state(last_good)
                if detector is not None and last_good_det is not None:
                    detector.load_state(last_good_det)
                diverged = True
                break
            loss.backward()
            opt.step()
            refine_total += refine_part
            steps += 1
        if diverged:
            break
        val_biou = None
        if val_caches:
            val_biou = float(np.mean([teacher_forced_biou(model, c) for c in val_caches]))
        log.append({
            "epoch": epoch,
            "refine_l1": refine_total / max(steps, 1),
            "inc_bce": (inc_total / max(steps, 1)) if detector is not None else None,
            "val_biou": val_biou,
        })
        last_good = model.state_arrays()
        if detector is not None:
            last_good_det = detector.state_arrays()
    return TrainResult(model=model, detector=detector, log=log, diverged=diverged)


def refine_sample(model: Refiner, sample: Sample, detection, depth: int = 3,
                  propagation: str = "full") -> tuple[np.ndarray, np.ndarray, int]:
    """Full inference for one sample: detect, refine, propagate.

    ``detection`` is a DetectionResult, an IncoherencePyramid, or the string
    "oracle" (reconstruction-complete oracle from the sample's gt). Returns
    (probability map, binary mask, incoherent node count) at the resolution
    implied by ``depth`` (28 * 2**(depth-1)).
    """
    if detection == "oracle":
        detection = detect_oracle(sample.gt, reconstruction_complete=True)
    tree = build(detection)
    ids = incoherent_sequence(tree, training=False)
    active = [i for i in ids if tree.nodes[i].level <= depth]
    refined = {}
    if active:
        cues = gather_cues(tree, active, sample.pyramid, sample.coarse)
        ref = None if isinstance(model, MLPRefiner) else reference_cues(sample.pyramid, sample.coarse)
        vals, _ = model.refine(cues, ref)
        refined = dict(zip(active, vals.data.astype(np.float64)))
    if propagation == "full":
        skipped = {i: 0.0 for i in ids if tree.nodes[i].level > depth}
        prob, mask = propagate(tree, sample.coarse, {**refined, **skipped}, depth=depth)
    elif propagation == "finest":
        filler = {i: 0.0 for i in ids if i not in refined}
        prob, mask = finest_only_propagate(tree, sample.coarse, {**refined, **filler})
    else:
        raise ValueError(f"unknown propagation mode {propagation!r}")
    return prob, mask, len(active)
