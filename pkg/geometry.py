"""
Point-Annotation Geometry
Nearest-neighbour distances, the dense degree D of a patch, geometry-adaptive
density maps and count-preserving downsampling.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from sklearn.neighbors import KDTree

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


@dataclass
class PointAnnotation:
    """Head coordinates (x, y) of one image together with its size."""
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    image: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"annotation has zero-size image {self.width}x{self.height}")
        if pts.size:
            bad = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
            if np.any(bad):
                first = pts[np.argmax(bad)]
                raise ValueError(
                    f"point ({first[0]}, {first[1]}) lies outside the {self.width}x{self.height} image"
                )

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def to_dict(self) -> Dict:
        return {
            "image": self.image,
            "width": int(self.width),
            "height": int(self.height),
            "points": [[float(x), float(y)] for x, y in self.points],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PointAnnotation":
        return cls(
            width=int(data["width"]),
            height=int(data["height"]),
            points=np.asarray(data.get("points", []), dtype=np.float64).reshape(-1, 2),
            image=str(data.get("image", "")),
        )


@dataclass
class DensityMap:
    """Non-negative grid whose integral is a people count."""
    values: np.ndarray

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class KernelPolicy:
    """
    How each head is blurred into the density map.

    adaptive: sigma_i = beta * mean distance to the K nearest heads
    fixed:    sigma_i = sigma_fixed for every head
    """
    mode: str = "adaptive"
    beta: float = 0.3
    K: int = 3
    sigma_fixed: float = 3.0
    sigma_default: float = 3.0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"kernel mode must be 'adaptive' or 'fixed', got {self.mode!r}")
        if self.beta <= 0 or self.K < 1 or self.sigma_fixed <= 0 or self.sigma_default <= 0:
            raise ValueError(
                f"invalid kernel policy: beta={self.beta}, K={self.K}, "
                f"sigma_fixed={self.sigma_fixed}, sigma_default={self.sigma_default}"
            )


def _as_points(ann) -> np.ndarray:
    if isinstance(ann, PointAnnotation):
        return ann.points
    return np.asarray(ann, dtype=np.float64).reshape(-1, 2)


def knn_distances(ann, Q: int) -> List[np.ndarray]:
    """
    Exact distances from every point to its min(Q, P - 1) nearest other points.

    Args:
        ann: PointAnnotation (or a P x 2 array of coordinates)
        Q: number of neighbours, >= 1

    Returns:
        list of P ascending distance arrays (empty when P <= 1)
    """
    if Q < 1:
        raise ValueError(f"Q must be >= 1, got {Q}")
    points = _as_points(ann)
    count = points.shape[0]
    if count <= 1:
        return [np.zeros(0) for _ in range(count)]
    k = min(Q, count - 1)
    tree = KDTree(points)
    dist, _ = tree.query(points, k=k + 1, return_distance=True, sort_results=True)
    # The query point itself sits at distance 0 in the first column.
    return [row[1:].copy() for row in dist]


def dense_degree(ann, Q: int) -> float:
    """
    Dense degree D: per-point sum of nearest-neighbour distances, averaged over points.

    Smaller is denser. Patches with fewer than two heads get +inf.
    """
    neighbours = knn_distances(ann, Q)
    if len(neighbours) <= 1:
        return math.inf
    return float(sum(d.sum() for d in neighbours) / len(neighbours))


def head_sigmas(ann: PointAnnotation, policy: KernelPolicy) -> np.ndarray:
    count = ann.count
    if policy.mode == "fixed":
        return np.full(count, policy.sigma_fixed)
    if count < 2:
        return np.full(count, policy.sigma_default)
    mean_dist = np.array([d.mean() for d in knn_distances(ann, policy.K)])
    return np.maximum(policy.beta * mean_dist, SIGMA_FLOOR)


def generate_density_map(ann: PointAnnotation, policy: Optional[KernelPolicy] = None) -> DensityMap:
    """
    Blur each head with a normalized Gaussian truncated at 4 sigma.

    The kernel is renormalized inside its image-clipped window, so every head
    contributes exactly one unit of mass, border heads included.
    """
    policy = policy or KernelPolicy()
    if ann.width <= 0 or ann.height <= 0:
        raise ValueError(f"cannot build a density map for a {ann.width}x{ann.height} image")
    grid = np.zeros((ann.height, ann.width), dtype=np.float64)
    if ann.count == 0:
        return DensityMap(grid)

    for (x, y), sigma in zip(ann.points, head_sigmas(ann, policy)):
        cx = min(int(math.floor(x)), ann.width - 1)
        cy = min(int(math.floor(y)), ann.height - 1)
        radius = int(math.ceil(4.0 * sigma))
        x0, x1 = max(cx - radius, 0), min(cx + radius, ann.width - 1)
        y0, y1 = max(cy - radius, 0), min(cy + radius, ann.height - 1)
        xs = np.arange(x0, x1 + 1) - cx
        ys = np.arange(y0, y1 + 1) - cy
        kernel = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma ** 2))
        grid[y0:y1 + 1, x0:x1 + 1] += kernel / kernel.sum()
    return DensityMap(grid)


def sum_pool_downsample(density, factor: int) -> DensityMap:
    """Sum factor x factor blocks; total mass is preserved."""
    values = density.values if isinstance(density, DensityMap) else np.asarray(density)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    height, width = values.shape
    if height % factor or width % factor:
        raise ValueError(f"map {height}x{width} is not divisible by factor {factor}; pad or crop first")
    if factor == 1:
        return DensityMap(values.copy())
    pooled = values.reshape(height // factor, factor, width // factor, factor).sum(axis=(1, 3))
    return DensityMap(pooled)
