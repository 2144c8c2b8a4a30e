"""
Synthetic Crowd Scenes
Seeded generator of grayscale crowd images with exact head annotations.
Heads render as bright blobs that shrink where the crowd is dense, which gives
the network a visual density cue.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from geometry import PointAnnotation, knn_distances

logger = logging.getLogger(__name__)

PROFILES = ("sparse", "dense", "mixed", "pan")
SPARSE_RANGE = (5, 20)
DENSE_RANGE = (100, 300)
PAN_DENSE_RANGE = (100, 200)
MIN_SEPARATION = 1.0
MAX_TRIES = 100


@dataclass
class Region:
    rect: Tuple[int, int, int, int]
    count: int
    placement: str = "uniform"
    center: Optional[Tuple[float, float]] = None
    spread: float = 10.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        x0, y0, w, h = self.rect
        return (points[:, 0] >= x0) & (points[:, 0] < x0 + w) & (points[:, 1] >= y0) & (points[:, 1] < y0 + h)


@dataclass
class SceneSpec:
    width: int
    height: int
    regions: List[Region] = field(default_factory=list)
    max_radius: float = 4.0
    min_radius: float = 1.0
    intensity: float = 180.0
    background: float = 40.0
    noise_std: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"scene must have a positive size, got {self.width}x{self.height}")
        for region in self.regions:
            x0, y0, w, h = region.rect
            if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > self.width or y0 + h > self.height:
                raise ValueError(f"region {region.rect} lies outside the {self.width}x{self.height} scene")
            if region.count < 0:
                raise ValueError(f"region count must be >= 0, got {region.count}")
            if region.placement not in ("uniform", "cluster"):
                raise ValueError(f"placement must be 'uniform' or 'cluster', got {region.placement!r}")

    @property
    def total_count(self) -> int:
        return sum(region.count for region in self.regions)


class SyntheticScene(NamedTuple):
    image: np.ndarray
    annotation: PointAnnotation
    label: str


def _sample_position(region: Region, rng: np.random.Generator) -> np.ndarray:
    x0, y0, w, h = region.rect
    if region.placement == "cluster":
        cx, cy = region.center if region.center is not None else (x0 + w / 2.0, y0 + h / 2.0)
        point = rng.normal((cx, cy), region.spread)
    else:
        point = np.array([x0 + rng.random() * w, y0 + rng.random() * h])
    # Both coordinates must stay strictly inside the half-open rect
    point[0] = np.clip(point[0], x0, np.nextafter(x0 + w, x0))
    point[1] = np.clip(point[1], y0, np.nextafter(y0 + h, y0))
    return point


def _place_heads(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    placed = np.zeros((0, 2))
    for index, region in enumerate(spec.regions):
        for _ in range(region.count):
            for _ in range(MAX_TRIES):
                candidate = _sample_position(region, rng)
                if placed.shape[0] == 0 or np.min(np.hypot(*(placed - candidate).T)) >= MIN_SEPARATION:
                    placed = np.vstack([placed, candidate])
                    break
            else:
                raise ValueError(
                    f"region {index} ({region.rect}) cannot fit {region.count} heads "
                    f"{MIN_SEPARATION:g}px apart after {MAX_TRIES} tries per head"
                )
    return placed


def _head_radii(points: np.ndarray, spec: SceneSpec) -> np.ndarray:
    if points.shape[0] < 2:
        return np.full(points.shape[0], spec.max_radius)
    nearest = np.array([d[0] for d in knn_distances(points, 1)])
    return np.clip(0.35 * nearest, spec.min_radius, spec.max_radius)


def generate_scene(spec: SceneSpec) -> Tuple[np.ndarray, PointAnnotation]:
    """
    Render one scene.

    Returns:
        (uint8 H x W image, annotation with the exact sampled head positions)
    """
    rng = np.random.default_rng(spec.seed)
    points = _place_heads(spec, rng)
    canvas = np.full((spec.height, spec.width), spec.background, dtype=np.float64)

    for (x, y), radius in zip(points, _head_radii(points, spec)):
        reach = int(np.ceil(3 * radius))
        cx, cy = int(x), int(y)
        x0, x1 = max(cx - reach, 0), min(cx + reach + 1, spec.width)
        y0, y1 = max(cy - reach, 0), min(cy + reach + 1, spec.height)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        blob = np.exp(-((xs + 0.5 - x) ** 2 + (ys + 0.5 - y) ** 2) / (2.0 * radius ** 2))
        canvas[y0:y1, x0:x1] += spec.intensity * blob

    canvas += rng.normal(0.0, spec.noise_std, canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return image, PointAnnotation(spec.width, spec.height, points)


def profile_scene_spec(profile: str, size: int, rng: np.random.Generator) -> Tuple[SceneSpec, str]:
    """Draw a SceneSpec for one image of the given profile; returns it with the image's label."""
    if profile == "mixed":
        profile = "sparse" if rng.random() < 0.5 else "dense"
    full = (0, 0, size, size)
    seed = int(rng.integers(2 ** 31))
    if profile == "sparse":
        regions = [Region(full, int(rng.integers(SPARSE_RANGE[0], SPARSE_RANGE[1] + 1)))]
    elif profile == "dense":
        count = int(rng.integers(DENSE_RANGE[0], DENSE_RANGE[1] + 1))
        regions = [Region(full, count)]
    elif profile == "pan":
        half = size // 2
        regions = [
            Region((0, 0, size, half), int(rng.integers(SPARSE_RANGE[0], SPARSE_RANGE[1] + 1))),
            Region((0, half, size, size - half), int(rng.integers(PAN_DENSE_RANGE[0], PAN_DENSE_RANGE[1] + 1))),
        ]
    else:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    return SceneSpec(size, size, regions, seed=seed), profile


def generate_dataset(profile: str, M: int, seed: int = 0, size: int = 128) -> List[SyntheticScene]:
    """
    M seeded scenes of one profile.

    sparse: 5-20 heads, dense: 100-300 heads, mixed: sparse or dense per
    image, pan: a sparse top half over a dense bottom half.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    rng = np.random.default_rng(seed)
    scenes = []
    for index in range(M):
        spec, label = profile_scene_spec(profile, size, rng)
        image, annotation = generate_scene(spec)
        annotation.image = f"{profile}_{index:04d}"
        scenes.append(SyntheticScene(image, annotation, label))
    logger.info(f"Generated {M} {profile} scenes ({size}x{size}, {sum(s.annotation.count for s in scenes)} heads)")
    return scenes
