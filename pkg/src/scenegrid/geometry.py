"""Deterministic geometric kernels over point sets and axis-aligned boxes.

Everything here is a pure function of its inputs: no randomness, no shared
state, and ties are always broken by lowest index so results are reproducible
across platforms. Point clouds are plain ``(N, 3)`` float arrays; boxes are
``Box3`` (center + extent). All operations run as linear scans, which is
plenty at the scales this package targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Box3",
    "SpatialAdjacency",
    "fps",
    "ball_query",
    "knn_adjacency",
    "iou_aabb",
    "axis_center_gaps",
    "nearest_object_centroid",
    "pairwise_distances",
]


def _as_points(points, name: str = "points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite values")
    return pts


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class Box3:
    """Axis-aligned box given by its center and full extents (w, h, l).

    Extents are the side lengths along x, y, z and must be non-negative;
    degenerate (zero-volume) boxes are allowed so that broken annotations can
    still flow through evaluation.
    """

    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        self.center = _as_vec3(self.center, "center")
        self.extent = _as_vec3(self.extent, "extent")
        if np.any(self.extent < 0):
            raise ValueError(f"extent must be non-negative, got {self.extent}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def min_corner(self) -> np.ndarray:
        return self.center - self.extent / 2.0

    @property
    def max_corner(self) -> np.ndarray:
        return self.center + self.extent / 2.0

    def translated(self, offset) -> "Box3":
        return Box3(self.center + _as_vec3(offset, "offset"), self.extent.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box3):
            return NotImplemented
        return bool(
            np.array_equal(self.center, other.center)
            and np.array_equal(self.extent, other.extent)
        )


@dataclass
class SpatialAdjacency:
    """Symmetrically normalized adjacency of a k-NN proximity graph.

    ``matrix`` is D^{-1/2} (A + I) D^{-1/2} with binary union-symmetrized A,
    so it is symmetric, non-negative, and has a strictly positive diagonal.
    ``edges`` keeps the raw undirected edge set as (i, j) pairs with i < j.
    """

    matrix: np.ndarray
    edges: list[tuple[int, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def fps(points, m: int, first: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    Picks ``m`` distinct indices such that each new point maximizes its
    minimum distance to the points already selected. Ties break to the
    lowest index. The start point defaults to the point farthest from the
    cloud centroid, which is deterministic and robust to point order of the
    remaining cloud; pass ``first`` to pin an explicit start index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if first is None:
        centroid = pts.mean(axis=0)
        first = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    elif not 0 <= first < n:
        raise ValueError(f"first index out of range: {first}")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    # min distance from each point to the selected set; selected points are
    # masked with -1 so they can never be picked twice
    dmin = np.linalg.norm(pts - pts[first], axis=1)
    dmin[first] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dmin))
        selected[i] = nxt
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
        dmin[nxt] = -1.0
    return selected


def ball_query(centers, points, radius: float = 0.3, max_k: int = 16) -> list[np.ndarray]:
    """Group point indices around each query center.

    For every center, returns up to ``max_k`` indices of points within
    ``radius`` (inclusive), ordered nearest-first with ties broken by lowest
    index. A center with no point in range falls back to the single globally
    nearest point, so groups are never empty.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    ctr = _as_points(centers, "centers")
    pts = _as_points(points)
    dists = np.linalg.norm(ctr[:, None, :] - pts[None, :, :], axis=2)

    groups: list[np.ndarray] = []
    for d in dists:
        order = np.argsort(d, kind="stable")
        in_range = order[d[order] <= radius]
        if in_range.size == 0:
            groups.append(order[:1].astype(np.int64))
        else:
            groups.append(in_range[:max_k].astype(np.int64))
    return groups


def knn_adjacency(positions, k: int) -> SpatialAdjacency:
    """Build the normalized adjacency of the union-symmetrized k-NN graph.

    i--j is an edge when j is among the k nearest neighbors of i or vice
    versa. Self-loops are added before the symmetric D^{-1/2}(A+I)D^{-1/2}
    normalization so message passing stays scale-stable.
    """
    pos = _as_points(positions, "positions")
    m = pos.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 positions, got {m}")
    if not 1 <= k < m:
        raise ValueError(f"k must be in [1, {m - 1}], got {k}")

    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    adj = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        nbrs = np.argsort(d[i], kind="stable")[:k]
        adj[i, nbrs] = 1.0
    adj = np.maximum(adj, adj.T)

    edges = [(i, j) for i in range(m) for j in range(i + 1, m) if adj[i, j] > 0]
    with_self = adj + np.eye(m)
    inv_sqrt_deg = 1.0 / np.sqrt(with_self.sum(axis=1))
    matrix = with_self * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return SpatialAdjacency(matrix=matrix, edges=edges)


def iou_aabb(a: Box3, b: Box3) -> float:
    """Intersection over union of two axis-aligned boxes, in [0, 1].

    Zero-volume boxes are handled explicitly: two degenerate boxes with the
    same center count as a perfect match (IoU 1), any other degenerate pair
    scores 0.
    """
    va, vb = a.volume, b.volume
    if va == 0.0 and vb == 0.0:
        return 1.0 if np.array_equal(a.center, b.center) else 0.0
    if va == 0.0 or vb == 0.0:
        return 0.0
    side = np.minimum(a.max_corner, b.max_corner) - np.maximum(a.min_corner, b.min_corner)
    if np.any(side <= 0):
        return 0.0
    inter = float(np.prod(side))
    return inter / (va + vb - inter)


def axis_center_gaps(a: Box3, b: Box3) -> np.ndarray:
    """Absolute per-axis distance between two box centers."""
    return np.abs(a.center - b.center)


def nearest_object_centroid(p, objects: list[Box3]) -> tuple[int, np.ndarray]:
    """Index and center of the object whose center is closest to ``p``.

    Ties go to the lowest index.
    """
    if not objects:
        raise ValueError("objects must be non-empty")
    point = _as_vec3(p, "p")
    centers = np.stack([obj.center for obj in objects])
    idx = int(np.argmin(np.linalg.norm(centers - point, axis=1)))
    return idx, centers[idx].copy()


def pairwise_distances(points) -> np.ndarray:
    """Full symmetric Euclidean distance matrix of a point set."""
    pts = _as_points(points)
    return np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
