"""Semantic + boundary probabilities -> instance label volume.

Seeds are high-confidence foreground voxels away from predicted boundaries;
connected-component labeling (two-pass union-find) splits them into
instances; a deterministic multi-source BFS grows the instances back over
the remaining foreground, with ties at equal BFS distance resolved in
favour of the smaller label id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PostConfig:
    semantic_threshold: float = 0.8
    boundary_threshold: float = 0.5
    connectivity: int = 26
    min_instance_size: int = 64

    def __post_init__(self):
        if not 0.0 < self.semantic_threshold < 1.0:
            raise ValueError(f"semantic_threshold must be in (0,1), got {self.semantic_threshold}")
        if not 0.0 < self.boundary_threshold < 1.0:
            raise ValueError(f"boundary_threshold must be in (0,1), got {self.boundary_threshold}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.min_instance_size < 0:
            raise ValueError(f"min_instance_size must be >= 0, got {self.min_instance_size}")


@dataclass
class LabelVolume:
    """Integer (T,H,W) volume; 0 is background, k >= 1 identifies instance k."""

    labels: np.ndarray
    instance_count: int

    @classmethod
    def from_array(cls, labels):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ValueError(f"label volume must be 3-d, got shape {labels.shape}")
        present = np.unique(labels)
        if present.size and present[0] < 0:
            raise ValueError("label volume has negative ids")
        count = int(present.max()) if present.size else 0
        nonzero = present[present > 0]
        if nonzero.size != count:
            raise ValueError(f"label ids must be contiguous 1..{count}, found {nonzero.tolist()}")
        return cls(labels.astype(np.int32), count)

    def sizes(self):
        """Voxel count per instance id 1..instance_count."""
        return np.bincount(self.labels.ravel(), minlength=self.instance_count + 1)[1:]


def neighbor_offsets(connectivity):
    if connectivity == 6:
        return [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    return [(dt, dh, dw) for dt in (-1, 0, 1) for dh in (-1, 0, 1) for dw in (-1, 0, 1) if (dt, dh, dw) != (0, 0, 0)]


def _shift_slices(off, dims):
    """(source, dest) slice tuples so dest voxels read their off-neighbour."""
    src, dst = [], []
    for d, n in zip(off, dims):
        src.append(slice(max(0, d), n + min(0, d)))
        dst.append(slice(max(0, -d), n + min(0, -d)))
    return tuple(src), tuple(dst)


def seed_mask(sem, bnd, cfg: PostConfig):
    """Confident-interior mask: sem above threshold and bnd below threshold."""
    sem = np.asarray(sem)
    bnd = np.asarray(bnd)
    return (sem > cfg.semantic_threshold) & (bnd < cfg.boundary_threshold)


def connected_components_3d(mask, connectivity=26):
    """Two-pass union-find labeling; components numbered 1..k in first-voxel
    scan order."""
    mask = np.asarray(mask, dtype=bool)
    dims = mask.shape
    n_fg = int(mask.sum())
    labels = np.zeros(dims, dtype=np.int32)
    if n_fg == 0:
        return LabelVolume(labels, 0)

    ids = np.full(dims, -1, dtype=np.int64)
    ids[mask] = np.arange(n_fg)

    # pass 1: gather equivalences between each voxel and its backward neighbours
    backward = [o for o in neighbor_offsets(connectivity) if o < (0, 0, 0)]
    pairs_a, pairs_b = [], []
    for off in backward:
        src, dst = _shift_slices(off, dims)
        both = mask[dst] & mask[src]
        pairs_a.append(ids[dst][both])
        pairs_b.append(ids[src][both])
    parent = list(range(n_fg))
    if pairs_a:
        ea = np.concatenate(pairs_a)
        eb = np.concatenate(pairs_b)
        for a, b in zip(ea.tolist(), eb.tolist()):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            while parent[b] != b:
                parent[b] = parent[parent[b]]
                b = parent[b]
            if a != b:
                if a < b:
                    parent[b] = a
                else:
                    parent[a] = b

    # pass 2: resolve every voxel to its root
    roots = np.fromiter((_resolve(parent, i) for i in range(n_fg)), dtype=np.int64, count=n_fg)

    # compact to 1..k in first-appearance (scan) order
    _, first_idx, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first_idx.size, dtype=np.int64)
    rank[np.argsort(first_idx)] = np.arange(first_idx.size)
    labels[mask] = rank[inverse] + 1
    return LabelVolume(labels, int(first_idx.size))


def _resolve(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def grow_instances(seeds: LabelVolume, sem, cfg: PostConfig):
    """Assign remaining above-threshold voxels to the nearest seed component
    by multi-source BFS; ties at equal distance go to the smaller label.
    Components below min_instance_size are dropped and labels recompacted.
    """
    labels = seeds.labels.astype(np.int64).copy()
    eligible = np.asarray(sem) > cfg.semantic_threshold
    offsets = neighbor_offsets(cfg.connectivity)
    dims = labels.shape
    big = np.iinfo(np.int64).max

    while True:
        unlabeled = eligible & (labels == 0)
        if not unlabeled.any():
            break
        best = np.full(dims, big, dtype=np.int64)
        for off in offsets:
            src, dst = _shift_slices(off, dims)
            nb = np.full(dims, big, dtype=np.int64)
            vals = labels[src]
            nb[dst] = np.where(vals > 0, vals, big)
            np.minimum(best, nb, out=best)
        newly = unlabeled & (best < big)
        if not newly.any():
            break  # foreground islands with no seed stay background
        labels[newly] = best[newly]

    if cfg.min_instance_size > 0 and labels.any():
        counts = np.bincount(labels.ravel())
        drop = counts < cfg.min_instance_size
        drop[0] = False
        if drop.any():
            labels[drop[labels]] = 0

    return _recompact(labels)


def _recompact(labels):
    """Renumber to contiguous 1..k preserving ascending id order, so labels
    only change when a smaller id was dropped by the size filter."""
    flat = labels.ravel()
    fg = flat > 0
    if not fg.any():
        return LabelVolume(np.zeros(labels.shape, dtype=np.int32), 0)
    uniq, inverse = np.unique(flat[fg], return_inverse=True)
    out = np.zeros(flat.size, dtype=np.int32)
    out[fg] = inverse + 1
    return LabelVolume(out.reshape(labels.shape), int(uniq.size))


def extract_instances(sem_prob, bnd_prob, cfg: PostConfig):
    """Full pipeline: seeds -> connected components -> growth."""
    seeds = connected_components_3d(seed_mask(sem_prob, bnd_prob, cfg), cfg.connectivity)
    return grow_instances(seeds, sem_prob, cfg)
