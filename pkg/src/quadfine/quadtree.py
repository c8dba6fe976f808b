"""Point quadtree over incoherent pixels.

Roots are the incoherent pixels of the coarsest detection level; every
incoherent node owns the four quadrant pixels at the next finer level, and
only incoherent children expand further. Trees are immutable after build;
node order is (level, row, col). Propagation rewrites refined values into
the coarse map level by level, nearest-neighbor upsampling between levels,
so coherent children inherit their parent's corrected value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import IncoherencePyramid, mask_at_level, upsample_nn


@dataclass(frozen=True)
class QuadNode:
    level: int  # 1 = coarsest
    r: int
    c: int
    parent: int  # node index, -1 for roots
    incoherent: bool
    children: tuple[int, ...] = ()


@dataclass
class PointQuadtree:
    nodes: list[QuadNode]
    resolutions: tuple[int, ...]
    index: dict[tuple[int, int, int], int]

    @property
    def depth(self) -> int:
        return len(self.resolutions)

    def incoherent_ids(self, level: int | None = None) -> list[int]:
        return [
            i for i, n in enumerate(self.nodes)
            if n.incoherent and (level is None or n.level == level)
        ]

    def node_count(self) -> int:
        return len(self.nodes)

    def incoherent_count(self) -> int:
        return sum(1 for n in self.nodes if n.incoherent)

    def dump(self, refined: dict[int, float] | None = None) -> str:
        """Debug lines ``level,row,col,incoherent,refined_value`` in node order."""
        lines = []
        for i, n in enumerate(self.nodes):
            value = ""
            if refined is not None and i in refined:
                value = f"{refined[i]:.6f}"
            lines.append(f"{n.level},{n.r},{n.c},{int(n.incoherent)},{value}")
        return "\n".join(lines) + ("\n" if lines else "")


def _detection_levels(det) -> tuple[np.ndarray, ...]:
    if isinstance(det, IncoherencePyramid):
        return det.levels
    if hasattr(det, "binary_levels"):
        return det.binary_levels()
    raise TypeError(f"cannot build a quadtree from {type(det).__name__}")


def build(det) -> PointQuadtree:
    """Build the tree from a detection result or incoherence pyramid.

    Rejects inputs violating the guidance restriction (a finer incoherent
    pixel outside the upsampled coarser incoherence), reporting the offending
    coordinate.
    """
    levels = _detection_levels(det)
    depth = len(levels)
    resolutions = tuple(lvl.shape[0] for lvl in levels)
    for i, lvl in enumerate(levels):
        if lvl.shape[0] != lvl.shape[1]:
            raise ValueError(f"level {i + 1} is not square: {lvl.shape}")
        if i and lvl.shape[0] != 2 * levels[i - 1].shape[0]:
            raise ValueError(f"level {i + 1} does not double level {i} resolution")
    for i in range(1, depth):
        orphan = levels[i].astype(bool) & ~upsample_nn(levels[i - 1]).astype(bool)
        if orphan.any():
            r, c = next(zip(*np.nonzero(orphan)))
            raise ValueError(
                f"guidance restriction violated: level {i + 1} pixel ({r}, {c}) "
                "has no incoherent parent"
            )

    nodes: list[QuadNode] = []
    index: dict[tuple[int, int, int], int] = {}
    roots = np.argwhere(levels[0])
    for r, c in roots:
        index[(1, int(r), int(c))] = len(nodes)
        nodes.append(QuadNode(1, int(r), int(c), -1, True))

    frontier = list(range(len(nodes)))  # incoherent nodes of the current level
    for level in range(2, depth + 1):
        lvl_map = levels[level - 1]
        children: list[tuple[int, int, int]] = []  # (r, c, parent_id)
        for pid in frontier:
            p = nodes[pid]
            for dr in (0, 1):
                for dc in (0, 1):
                    children.append((2 * p.r + dr, 2 * p.c + dc, pid))
        children.sort()
        child_ids: dict[int, list[int]] = {}
        next_frontier = []
        for r, c, pid in children:
            nid = len(nodes)
            incoherent = bool(lvl_map[r, c])
            index[(level, r, c)] = nid
            nodes.append(QuadNode(level, r, c, pid, incoherent))
            child_ids.setdefault(pid, []).append(nid)
            if incoherent:
                next_frontier.append(nid)
        for pid, ids in child_ids.items():
            # children stored in quadrant order (0,0),(0,1),(1,0),(1,1)
            ordered = sorted(ids, key=lambda i: (nodes[i].r % 2, nodes[i].c % 2))
            p = nodes[pid]
            nodes[pid] = QuadNode(p.level, p.r, p.c, p.parent, p.incoherent, tuple(ordered))
        frontier = next_frontier
    return PointQuadtree(nodes=nodes, resolutions=resolutions, index=index)


def incoherent_sequence(tree: PointQuadtree, cap_per_level: int = 100,
                        seed: int = 0, training: bool = False) -> list[int]:
    """Node ids forming the refiner input sequence.

    Inference returns every incoherent node (downstream attention is
    permutation-invariant). Training subsamples each level to exactly
    ``cap_per_level`` entries, with replacement when a level has fewer.
    """
    if not training:
        return tree.incoherent_ids()
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for level in range(1, tree.depth + 1):
        ids = tree.incoherent_ids(level)
        if not ids:
            continue
        ids = np.asarray(ids)
        if len(ids) >= cap_per_level:
            pick = rng.choice(ids, size=cap_per_level, replace=False)
        else:
            pick = rng.choice(ids, size=cap_per_level, replace=True)
        out.extend(int(i) for i in pick)
    return out


def _refined_lookup(tree: PointQuadtree, refined) -> dict[int, float]:
    if isinstance(refined, dict):
        table = {int(k): float(v) for k, v in refined.items()}
    else:
        ids = tree.incoherent_ids()
        values = np.asarray(refined, dtype=np.float64).reshape(-1)
        if values.size != len(ids):
            raise ValueError(
                f"{values.size} refined values for {len(ids)} incoherent nodes"
            )
        table = {i: float(v) for i, v in zip(ids, values)}
    for i in tree.incoherent_ids():
        if i not in table:
            n = tree.nodes[i]
            raise ValueError(f"missing refined value for node (level {n.level}, {n.r}, {n.c})")
    return table


def propagate(tree: PointQuadtree, coarse: np.ndarray, refined,
              depth: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Coarse-to-fine label correction; returns (probability map, binary mask).

    Starts from the coarse probability map at the root resolution, overwrites
    refined values at incoherent positions, and nearest-neighbor upsamples
    level by level to the finest resolution (or ``depth`` levels when given).
    The binary mask thresholds at 0.5, ties to foreground.
    """
    use_depth = tree.depth if depth is None else depth
    if not 1 <= use_depth <= tree.depth:
        raise ValueError(f"depth must be in [1, {tree.depth}]")
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.shape != (tree.resolutions[0], tree.resolutions[0]):
        raise ValueError(f"coarse map shape {coarse.shape} != root resolution")
    table = _refined_lookup(tree, refined)
    values = coarse.copy()
    for level in range(1, use_depth + 1):
        if level > 1:
            values = np.repeat(np.repeat(values, 2, axis=0), 2, axis=1)
        for i in tree.incoherent_ids(level):
            n = tree.nodes[i]
            values[n.r, n.c] = table[i]
    return values, (values >= 0.5).astype(np.uint8)


def finest_only_propagate(tree: PointQuadtree, coarse: np.ndarray, refined
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Ablation: upsample the coarse map and correct only finest-level nodes."""
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.shape != (tree.resolutions[0], tree.resolutions[0]):
        raise ValueError(f"coarse map shape {coarse.shape} != root resolution")
    table = _refined_lookup(tree, refined)
    values = coarse.copy()
    for _ in range(tree.depth - 1):
        values = np.repeat(np.repeat(values, 2, axis=0), 2, axis=1)
    for i in tree.incoherent_ids(tree.depth):
        n = tree.nodes[i]
        values[n.r, n.c] = table[i]
    return values, (values >= 0.5).astype(np.uint8)


def oracle_refined_values(tree: PointQuadtree, gt: np.ndarray) -> np.ndarray:
    """Ground-truth value at each incoherent node's level and position."""
    masks = {level: mask_at_level(gt, level, tree.depth) for level in range(1, tree.depth + 1)}
    for level, m in masks.items():
        if m.shape[0] != tree.resolutions[level - 1]:
            raise ValueError(
                f"gt downsamples to {m.shape[0]} at level {level}, tree expects "
                f"{tree.resolutions[level - 1]}"
            )
    ids = tree.incoherent_ids()
    return np.array([float(masks[tree.nodes[i].level][tree.nodes[i].r, tree.nodes[i].c])
                     for i in ids])


def node_coordinates(tree: PointQuadtree, ids) -> np.ndarray:
    """Normalized (x, y) pixel-center coordinates for the given node ids."""
    coords = np.empty((len(ids), 2), dtype=np.float64)
    for row, i in enumerate(ids):
        n = tree.nodes[i]
        res = tree.resolutions[n.level - 1]
        coords[row] = ((n.c + 0.5) / res, (n.r + 0.5) / res)
    return coords
