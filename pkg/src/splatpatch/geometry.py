"""Point cloud container, exact k-NN queries, normalization and PCA normals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCloud,
    EmptyInput,
    InsufficientPoints,
    InvalidArgument,
)


@dataclass(frozen=True)
class PointCloud:
    """Colored point set; positions (N,3), colors (N,3) in [0,1], optional unit normals."""

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidArgument(f"positions must be (N,3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise EmptyInput("point cloud has no points")
        if col.shape != pos.shape:
            raise InvalidArgument(
                f"colors shape {col.shape} does not match positions {pos.shape}"
            )
        if np.any(col < 0.0) or np.any(col > 1.0):
            raise InvalidArgument("color channels must lie in [0,1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pos.shape:
                raise InvalidArgument("normals shape must match positions")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise InvalidArgument("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions, self.colors, normals)


@dataclass(frozen=True)
class NormalizationTransform:
    """Bounding-box center and per-axis max half-extent mapping a cloud into [-1,1]."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not self.scale > 0.0:
            raise InvalidArgument(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.center


@dataclass(frozen=True)
class NeighborIndex:
    """Exact spatial index over one cloud's positions (kd-tree backed)."""

    tree: cKDTree = field(repr=False)
    size: int


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build an exact k-NN index over cloud.positions."""
    if len(cloud) < 1:
        raise EmptyInput("cannot index an empty cloud")
    return NeighborIndex(tree=cKDTree(cloud.positions), size=len(cloud))


def k_nearest(index: NeighborIndex, query: np.ndarray, k: int):
    """Exact k nearest neighbors of `query`; distances ascending, indices distinct."""
    if k > index.size:
        raise InsufficientPoints(f"k={k} exceeds cloud size {index.size}")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    dists, ids = index.tree.query(query, k=k)
    if k == 1:
        dists = np.atleast_1d(dists)
        ids = np.atleast_1d(ids)
    return np.asarray(ids, dtype=np.int64), np.asarray(dists, dtype=np.float64)


def k_nearest_all(index: NeighborIndex, positions: np.ndarray, k: int):
    """Vectorized k-NN for a batch of query positions; rows follow query order."""
    if k > index.size:
        raise InsufficientPoints(f"k={k} exceeds cloud size {index.size}")
    dists, ids = index.tree.query(np.asarray(positions, dtype=np.float64), k=k)
    if k == 1:
        dists = dists[:, None]
        ids = ids[:, None]
    return ids.astype(np.int64), dists


def normalize_cloud(cloud: PointCloud):
    """Map positions into [-1,1] via bbox center and max per-axis half-extent.

    Returns the normalized cloud and the transform needed to undo it. Colors
    and normals pass through unchanged.
    """
    pos = cloud.positions
    maxp = pos.max(axis=0)
    minp = pos.min(axis=0)
    center = (maxp + minp) / 2.0
    scale = float(np.max(maxp - center))
    if scale <= 0.0:
        raise DegenerateCloud("bounding box degenerates to a point")
    t = NormalizationTransform(center=center, scale=scale)
    normalized = PointCloud(t.apply(pos), cloud.colors, cloud.normals)
    return normalized, t


def min_neighbor_distance(cloud: PointCloud, index: NeighborIndex) -> np.ndarray:
    """Distance from each point to its nearest distinct neighbor, never zero.

    Exact duplicates would give zero; those entries are replaced by the
    smallest nonzero entry so downstream scale initialization stays positive.
    """
    n = len(cloud)
    if n < 2:
        raise InsufficientPoints("need at least 2 points for neighbor distances")
    _, dists = k_nearest_all(index, cloud.positions, k=2)
    nearest = dists[:, 1].copy()
    zero = nearest <= 0.0
    if np.any(zero):
        nonzero = nearest[~zero]
        if nonzero.size == 0:
            raise DegenerateCloud("all points coincide; no positive neighbor distance")
        nearest[zero] = nonzero.min()
    return nearest


def estimate_normals(cloud: PointCloud, index: NeighborIndex, k: int = 16) -> np.ndarray:
    """Per-point unit normals from a PCA plane fit over each k-NN neighborhood.

    The normal is the eigenvector of the smallest covariance eigenvalue; its
    sign is unconstrained (splat rendering is symmetric under n -> -n).
    """
    if k < 3:
        raise InvalidArgument(f"normal estimation needs k >= 3, got {k}")
    n = len(cloud)
    if k > n:
        raise InsufficientPoints(f"k={k} exceeds cloud size {n}")
    ids, _ = k_nearest_all(index, cloud.positions, k=k)
    nbrs = cloud.positions[ids]                      # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    # eigh returns ascending eigenvalues; column 0 is the plane normal
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    # guard fully degenerate neighborhoods (all neighbors coincident)
    bad = norms[:, 0] < 1e-12
    if np.any(bad):
        normals[bad] = (0.0, 0.0, 1.0)
        norms[bad] = 1.0
    return normals / norms
