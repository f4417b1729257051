"""Pillar encoder: point cloud -> pillars -> per-point PFN -> dense pseudo-image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GridSpec
from .errors import ShapeError
from .frames import PointCloud

N_FEATURES = 9


@dataclass(frozen=True, eq=False)
class PillarBatch:
    """Fixed-capacity pillar tensor.

    ``features`` is [P, Npp, 9]; only the first ``n_occupied`` pillars and the
    first ``n_points[i]`` rows of pillar ``i`` are meaningful, the rest is zero.
    ``indices`` is [n_occupied, 2] of (ix, iy), sorted by (iy, ix).
    """

    features: np.ndarray
    indices: np.ndarray
    n_points: np.ndarray

    @property
    def n_occupied(self) -> int:
        return int(self.indices.shape[0])

    def valid_mask(self) -> np.ndarray:
        """[n_occupied, Npp] mask of real (non-padding) rows."""
        npp = self.features.shape[1]
        return np.arange(npp)[None, :] < self.n_points[:, None]


@dataclass(frozen=True, eq=False)
class PseudoImage:
    data: np.ndarray  # [C, H, W] float32

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def pillarize(cloud: PointCloud, grid: GridSpec) -> PillarBatch:
    """Bucket points into BEV pillars.

    Out-of-range points (half-open intervals) are dropped; each pillar keeps
    its first ``max_points_per_pillar`` points in arrival order. If more than
    ``max_pillars`` pillars are occupied, the most populated ones are kept,
    ties going to the lower (iy, ix).
    """
    W, H = grid.W, grid.H
    P, npp = grid.max_pillars, grid.max_points_per_pillar
    pts = cloud.points
    in_range = (
        (pts[:, 0] >= grid.x_min) & (pts[:, 0] < grid.x_max)
        & (pts[:, 1] >= grid.y_min) & (pts[:, 1] < grid.y_max)
        & (pts[:, 2] >= grid.z_min) & (pts[:, 2] < grid.z_max)
    )
    pts = pts[in_range]
    ix = np.floor((pts[:, 0] - grid.x_min) / grid.pillar_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_min) / grid.pillar_size).astype(np.int64)
    # float rounding can push a point sitting just below the max edge onto index W/H
    np.clip(ix, 0, W - 1, out=ix)
    np.clip(iy, 0, H - 1, out=iy)
    cell = iy * W + ix

    order = np.argsort(cell, kind="stable")
    sorted_cell = cell[order]
    uniq, first, counts = np.unique(sorted_cell, return_index=True, return_counts=True)
    rank_sorted = np.arange(sorted_cell.size) - np.repeat(first, counts)

    if uniq.size > P:
        keep = np.lexsort((uniq, -counts))[:P]  # most points first, then lower cell id
        keep.sort()
    else:
        keep = np.arange(uniq.size)
    slot_of_group = np.full(uniq.size, -1, dtype=np.int64)
    slot_of_group[keep] = np.arange(keep.size)

    group = np.repeat(np.arange(uniq.size), counts)
    slot = slot_of_group[group]
    use = (slot >= 0) & (rank_sorted < npp)
    src = order[use]

    features = np.zeros((P, npp, N_FEATURES), dtype=np.float32)
    features[slot[use], rank_sorted[use], :4] = pts[src]
    kept_cells = uniq[keep]
    indices = np.column_stack([kept_cells % W, kept_cells // W]).astype(np.int64)
    n_points = np.minimum(counts[keep], npp).astype(np.int64)
    return PillarBatch(features, indices, n_points)


def augment_features(batch: PillarBatch, grid: GridSpec) -> PillarBatch:
    """Fill slots 4..8 with offsets from the pillar point mean and pillar center."""
    feats = batch.features.copy()
    n = batch.n_occupied
    if n == 0:
        return PillarBatch(feats, batch.indices, batch.n_points)
    mask = batch.valid_mask()
    xyz = feats[:n, :, :3].astype(np.float64)
    mean = xyz.sum(axis=1) / batch.n_points[:, None]
    centers = np.column_stack([
        grid.x_min + (batch.indices[:, 0] + 0.5) * grid.pillar_size,
        grid.y_min + (batch.indices[:, 1] + 0.5) * grid.pillar_size,
    ])
    extra = np.concatenate([xyz - mean[:, None, :], xyz[:, :, :2] - centers[:, None, :]], axis=2)
    feats[:n, :, 4:9] = np.where(mask[:, :, None], extra, 0.0)
    return PillarBatch(feats, batch.indices, batch.n_points)


def pfn_forward(batch: PillarBatch, weights, eps: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-point linear + batch norm + ReLU, then max over each pillar's valid points.

    Returns ([C, n_occupied] features, [n_occupied, 2] indices).
    """
    w = np.asarray(weights["pfn.linear.weight"], dtype=np.float32)
    if w.ndim != 2 or w.shape[1] != batch.features.shape[2]:
        raise ShapeError(f"pfn.linear.weight shape {w.shape} does not match {batch.features.shape[2]} features")
    c = w.shape[0]
    n = batch.n_occupied
    if n == 0:
        return np.zeros((c, 0), dtype=np.float32), batch.indices
    if eps is None:
        eps = float(np.asarray(weights["pfn.bn.eps"]).reshape(-1)[0])
    gamma = np.asarray(weights["pfn.bn.gamma"], dtype=np.float32)
    beta = np.asarray(weights["pfn.bn.beta"], dtype=np.float32)
    mean = np.asarray(weights["pfn.bn.mean"], dtype=np.float32)
    var = np.asarray(weights["pfn.bn.var"], dtype=np.float32)
    if not gamma.shape == beta.shape == mean.shape == var.shape == (c,):
        raise ShapeError("pfn batch norm parameters must all have shape (C,)")
    # Only real rows enter the linear layer; they are pillar-major, so the
    # per-pillar max is a segmented reduction starting at each pillar's offset.
    rows = batch.features[:n][batch.valid_mask()]  # [sum(n_points), D]
    x = rows @ w.T
    x = np.maximum((x - mean) * (gamma / np.sqrt(var + eps)) + beta, 0.0)
    starts = np.concatenate([[0], np.cumsum(batch.n_points)[:-1]])
    pooled = np.maximum.reduceat(x, starts, axis=0)
    return np.ascontiguousarray(pooled.T.astype(np.float32)), batch.indices


def scatter(features: np.ndarray, indices: np.ndarray, grid: GridSpec) -> PseudoImage:
    c, n = features.shape
    if indices.shape != (n, 2):
        raise ShapeError(f"indices shape {indices.shape} does not match {n} pillars")
    W, H = grid.W, grid.H
    canvas = np.zeros((c, H * W), dtype=np.float32)
    if n:
        ix, iy = indices[:, 0], indices[:, 1]
        if ix.min() < 0 or ix.max() >= W or iy.min() < 0 or iy.max() >= H:
            raise ShapeError("pillar index outside the grid")
        flat = iy * W + ix
        if np.unique(flat).size != n:
            raise ShapeError("duplicate pillar index in scatter")
        canvas[:, flat] = features
    return PseudoImage(canvas.reshape(c, H, W))


def encode(cloud: PointCloud, weights, grid: GridSpec) -> PseudoImage:
    """Full CPU-side stage: pillarize, decorate, PFN, scatter."""
    batch = augment_features(pillarize(cloud, grid), grid)
    feats, idx = pfn_forward(batch, weights)
    return scatter(feats, idx, grid)
