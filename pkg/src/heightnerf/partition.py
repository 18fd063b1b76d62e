"""Scene division into height-defined object groups plus a background group.

Columns whose object height exceeds a threshold are clustered with k-means on
their 2D cell centers. A 3D point belongs to its column's object group when it
lies at or below the column height, otherwise to the background (group 0).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .heightfield import HeightField, heights_at

BACKGROUND = 0


@dataclass(frozen=True)
class PartitionConfig:
    m_groups: int = 6
    threshold: float = 1.0
    kmeans_seed: int = 0
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if self.m_groups < 2:
            raise ValueError("m_groups must be >= 2 (one object group plus background)")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be >= 1")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass(frozen=True)
class ScenePartition:
    column_group: np.ndarray  # (nrows, ncols) ints, 0 = background
    centroids: np.ndarray  # (n_clusters, 2)
    config: PartitionConfig
    heightfield: HeightField = field(repr=False)

    @property
    def m_groups(self) -> int:
        return self.config.m_groups

    def to_json_dict(self) -> dict:
        return {
            "centroids": [[float(a), float(b)] for a, b in self.centroids],
            "column_group": [int(v) for v in self.column_group.ravel()],
            "ncols": self.heightfield.ncols,
            "nrows": self.heightfield.nrows,
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_json_dict(cls, d: dict, hf: HeightField) -> "ScenePartition":
        groups = np.asarray(d["column_group"], dtype=np.int64).reshape(hf.nrows, hf.ncols)
        cents = np.asarray(d["centroids"], dtype=np.float64).reshape(-1, 2)
        return cls(groups, cents, PartitionConfig(**d["config"]), hf)

    def label_image(self) -> np.ndarray:
        """RGB uint8 label map, north up; background black."""
        pal = group_palette(self.m_groups)
        return pal[self.column_group[::-1]]

    def save_png(self, path) -> None:
        Image.fromarray(self.label_image()).save(path, format="PNG")


def group_palette(m_groups: int) -> np.ndarray:
    """Distinct colors per object group; index 0 (background) is black."""
    pal = np.zeros((m_groups, 3), dtype=np.uint8)
    for m in range(1, m_groups):
        hue = (m - 1) / max(m_groups - 1, 1)
        # HSV -> RGB with s = v = 1
        h6 = hue * 6.0
        k = np.array([5.0, 3.0, 1.0])
        c = 1.0 - np.clip(np.minimum((k + h6) % 6.0, 4.0 - (k + h6) % 6.0), 0.0, 1.0)
        pal[m] = np.round(255 * c).astype(np.uint8)
    return pal


def classify_columns(hf: HeightField, threshold: float) -> np.ndarray:
    """Boolean object mask: a cell is an object column iff its height > threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return hf.clean_heights() > threshold


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = points[idx]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding until the assignment stops changing.

    ``objective_history[i]`` is the within-cluster squared distance after the
    i-th assignment step; it never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    n = points.shape[0]
    if n == 0:
        return KMeansResult(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    if n <= k:
        return KMeansResult(points.copy(), np.arange(n), [0.0], 0)

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(points, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                # respawn at the point farthest from its nearest centroid
                far = _sq_dists(points, centroids).min(axis=1).argmax()
                centroids[j] = points[far]
                labels[far] = j
    return KMeansResult(centroids, labels, history, it)


def cluster_object_columns(
    mask: np.ndarray, hf: HeightField, config: PartitionConfig
) -> ScenePartition:
    """Cluster object columns into ``m_groups - 1`` groups."""
    k = config.m_groups - 1
    mask = np.asarray(mask, dtype=bool).reshape(hf.nrows, hf.ncols)
    centers = hf.cell_centers()[mask]
    result = kmeans(centers, k, seed=config.kmeans_seed, max_iters=config.kmeans_max_iters)
    column_group = np.zeros((hf.nrows, hf.ncols), dtype=np.int64)
    column_group[mask] = result.labels + 1
    return ScenePartition(column_group, result.centroids, config, hf)


def build_partition(hf: HeightField, config: PartitionConfig) -> ScenePartition:
    return cluster_object_columns(classify_columns(hf, config.threshold), hf, config)


def group_of_point(p: ScenePartition, x: float, y: float, z: float) -> int:
    return int(groups_of_points(p, np.array([[x, y, z]], dtype=np.float64))[0])


def groups_of_points(p: ScenePartition, points: np.ndarray) -> np.ndarray:
    """Group id for each row of ``points`` (world coordinates)."""
    hf = p.heightfield
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    col = np.floor((pts[:, 0] - hf.origin_x) / hf.cell_size)
    row = np.floor((pts[:, 1] - hf.origin_y) / hf.cell_size)
    inside = (col >= 0) & (row >= 0) & (col < hf.ncols) & (row < hf.nrows)
    ci = np.where(inside, col, 0).astype(np.intp)
    ri = np.where(inside, row, 0).astype(np.intp)
    g = np.where(inside, p.column_group[ri, ci], BACKGROUND)
    h = heights_at(hf, pts[:, 0], pts[:, 1])
    return np.where((g != BACKGROUND) & (pts[:, 2] <= h), g, BACKGROUND)
