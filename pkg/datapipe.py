"""
Density-Level Data Pipeline
Patch extraction with flips, dense-degree clustering of patches via K-means,
cluster balancing and manifest persistence.

Level index grows with density: level 0 holds the sparsest patches
(largest dense degree D), level N-1 the densest.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from geometry import PointAnnotation, dense_degree

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
EXACT_KMEANS_LIMIT = 4000
UNASSIGNED = -1


class ManifestError(ValueError):
    """Malformed manifest file."""


@dataclass
class PatchRecord:
    source_image: str
    crop: Tuple[int, int, int, int]
    flipped: bool
    points: np.ndarray
    D: float
    level: int = UNASSIGNED

    def __post_init__(self):
        self.crop = tuple(int(v) for v in self.crop)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def annotation(self) -> PointAnnotation:
        _, _, w, h = self.crop
        return PointAnnotation(width=w, height=h, points=self.points, image=self.source_image)

    def to_dict(self) -> Dict:
        return {
            "source_image": self.source_image,
            "crop": list(self.crop),
            "flipped": bool(self.flipped),
            "points": [[float(x), float(y)] for x, y in self.points],
            "D": None if math.isinf(self.D) else float(self.D),
            "level": int(self.level),
            "count": self.count,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (
            self.source_image == other.source_image
            and self.crop == other.crop
            and self.flipped == other.flipped
            and np.array_equal(self.points, other.points)
            and (self.D == other.D)
            and self.level == other.level
        )


@dataclass
class DensityClustering:
    """
    Result of 1-D K-means on dense degrees.

    centroids are stored in ascending D; level k uses centroids[N - 1 - k].
    """
    N: int
    centroids: List[float]
    assignments: List[int] = field(default_factory=list)

    def level_centroid(self, level: int) -> float:
        return self.centroids[self.N - 1 - level]

    def nearest_level(self, D: float) -> int:
        if math.isinf(D):
            return 0
        rank = int(np.argmin([abs(D - c) for c in self.centroids]))
        return self.N - 1 - rank


def _flip_points(points: np.ndarray, width: int) -> np.ndarray:
    if points.size == 0:
        return points.copy()
    flipped = points.copy()
    flipped[:, 0] = width - points[:, 0]
    # x == 0 would land exactly on the open right edge
    flipped[:, 0] = np.minimum(flipped[:, 0], np.nextafter(float(width), 0.0))
    return flipped


def points_in_crop(points: np.ndarray, crop: Tuple[int, int, int, int]) -> np.ndarray:
    """Points inside [x0, x0+w) x [y0, y0+h), translated into the patch frame."""
    x0, y0, w, h = crop
    if points.size == 0:
        return np.zeros((0, 2))
    inside = (points[:, 0] >= x0) & (points[:, 0] < x0 + w) & (points[:, 1] >= y0) & (points[:, 1] < y0 + h)
    return points[inside] - np.array([x0, y0], dtype=np.float64)


def resize_annotation(ann: PointAnnotation, size: int) -> PointAnnotation:
    """Scale an annotation to a size x size image."""
    scaled = ann.points * np.array([size / ann.width, size / ann.height])
    scaled = np.minimum(scaled, np.nextafter(float(size), 0.0))
    return PointAnnotation(width=size, height=size, points=scaled, image=ann.image)


def make_patch(ann: PointAnnotation, crop: Tuple[int, int, int, int], flipped: bool, Q: int) -> PatchRecord:
    points = points_in_crop(ann.points, crop)
    if flipped:
        points = _flip_points(points, crop[2])
    return PatchRecord(
        source_image=ann.image,
        crop=crop,
        flipped=flipped,
        points=points,
        D=dense_degree(points, Q),
    )


def extract_patches(image: Optional[np.ndarray], ann: PointAnnotation, resize_to: int = 720, Q: int = 5,
                    seed: int = 0, n_random: int = 5) -> List[PatchRecord]:
    """
    Nine patches per image (four quarters plus random crops), each also flipped.

    Args:
        image: raster whose first two dimensions must match the annotation (or None)
        ann: head annotation in source-image pixels
        resize_to: side of the square the image is resized to, must be even
        Q: neighbours used for the dense degree
        seed: seed for the random crop placement

    Returns:
        18 PatchRecords: 9 unflipped followed by their 9 flipped twins
    """
    if resize_to % 2:
        raise ValueError(f"resize_to must be even, got {resize_to}")
    if image is not None and (image.shape[0] != ann.height or image.shape[1] != ann.width):
        raise ValueError(
            f"image {image.shape[1]}x{image.shape[0]} does not match annotation {ann.width}x{ann.height}"
        )
    rng = np.random.default_rng(seed)
    resized = resize_annotation(ann, resize_to)
    patch = resize_to // 2
    crops = [(0, 0, patch, patch), (patch, 0, patch, patch), (0, patch, patch, patch), (patch, patch, patch, patch)]
    for _ in range(n_random):
        x0, y0 = rng.integers(0, resize_to - patch + 1, size=2)
        crops.append((int(x0), int(y0), patch, patch))

    plain = [make_patch(resized, crop, False, Q) for crop in crops]
    flipped = [make_patch(resized, crop, True, Q) for crop in crops]
    return plain + flipped


def crop_patch_pixels(resized_image: np.ndarray, record: PatchRecord) -> np.ndarray:
    """Cut the record's crop out of the resized source raster, mirrored when flipped."""
    x0, y0, w, h = record.crop
    pixels = resized_image[y0:y0 + h, x0:x0 + w]
    if record.flipped:
        pixels = pixels[:, ::-1]
    return np.ascontiguousarray(pixels)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def _sse(values: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for label in np.unique(labels):
        members = values[labels == label]
        total += float(((members - members.mean()) ** 2).sum())
    return total


def _optimal_1d_partition(sorted_values: np.ndarray, N: int) -> np.ndarray:
    """
    Exact minimum-SSE split of sorted 1-D data into N contiguous groups.

    Returns the group label of every sorted value.
    """
    n = sorted_values.shape[0]
    prefix = np.concatenate([[0.0], np.cumsum(sorted_values)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(sorted_values ** 2)])

    def segment_cost(starts: np.ndarray, end: int) -> np.ndarray:
        # cost of values[starts:end] for every start in starts
        length = end - starts
        s = prefix[end] - prefix[starts]
        sq = prefix_sq[end] - prefix_sq[starts]
        return np.maximum(sq - s * s / length, 0.0)

    cost = np.full((N + 1, n + 1), np.inf)
    split = np.zeros((N + 1, n + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for k in range(1, N + 1):
        for end in range(k, n + 1):
            starts = np.arange(k - 1, end)
            candidates = cost[k - 1, starts] + segment_cost(starts, end)
            best = int(np.argmin(candidates))
            cost[k, end] = candidates[best]
            split[k, end] = starts[best]

    labels = np.zeros(n, dtype=np.int64)
    end = n
    for k in range(N, 0, -1):
        start = split[k, end]
        labels[start:end] = k - 1
        end = start
    return labels


def quantile_midpoints(sorted_values: np.ndarray, N: int) -> np.ndarray:
    n = sorted_values.shape[0]
    idx = [min(int((k + 0.5) * n / N), n - 1) for k in range(N)]
    return sorted_values[idx]


def cluster_density_levels(Ds: Sequence[float], N: int, seed: int = 0) -> DensityClustering:
    """
    1-D K-means on dense degrees.

    Lloyd iterations start from the N quantile midpoints; for moderate sizes the
    exact dynamic-programming optimum is also computed and the lower-SSE
    fixpoint wins. Infinite D values (patches with < 2 heads) go to level 0.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    values = np.asarray(Ds, dtype=np.float64)
    finite = np.isfinite(values)
    finite_values = values[finite]
    distinct = np.unique(finite_values)
    if distinct.shape[0] < N:
        raise ValueError(
            f"need at least {N} distinct finite dense degrees to form {N} levels, got {distinct.shape[0]}"
        )

    if N == 1:
        centroids = np.array([finite_values.mean()])
        labels = np.zeros(finite_values.shape[0], dtype=np.int64)
    else:
        order = np.argsort(finite_values, kind="stable")
        sorted_values = finite_values[order]
        init = quantile_midpoints(distinct, N).reshape(-1, 1)
        km = KMeans(n_clusters=N, init=init, n_init=1, max_iter=300, tol=0.0,
                    algorithm="lloyd", random_state=seed)
        labels = km.fit_predict(finite_values.reshape(-1, 1))
        best_sse = _sse(finite_values, labels)

        if finite_values.shape[0] <= EXACT_KMEANS_LIMIT:
            exact_sorted = _optimal_1d_partition(sorted_values, N)
            exact = np.empty_like(exact_sorted)
            exact[order] = exact_sorted
            exact_sse = _sse(finite_values, exact)
            if exact_sse < best_sse - 1e-12 * max(best_sse, 1.0):
                logger.info(f"Lloyd fixpoint SSE {best_sse:.6g} improved to exact optimum {exact_sse:.6g}")
                labels, best_sse = exact, exact_sse
        centroids = np.array([finite_values[labels == k].mean() for k in range(N)])

    # Relabel: level 0 = largest centroid D (sparsest)
    rank = np.argsort(centroids)  # ascending D
    level_of_cluster = np.empty(N, dtype=np.int64)
    level_of_cluster[rank] = N - 1 - np.arange(N)
    assignments = np.zeros(values.shape[0], dtype=np.int64)
    assignments[finite] = level_of_cluster[labels]
    assignments[~finite] = 0

    clustering = DensityClustering(N=N, centroids=[float(c) for c in np.sort(centroids)],
                                   assignments=[int(a) for a in assignments])
    logger.info(f"✅ Clustered {values.shape[0]} patches into {N} density levels, centroids {clustering.centroids}")
    return clustering


def level_sizes(records: Sequence[PatchRecord], N: int) -> List[int]:
    sizes = [0] * N
    for record in records:
        sizes[record.level] += 1
    return sizes


def balance_clusters(records: List[PatchRecord], clustering: DensityClustering,
                     sources: Dict[str, PointAnnotation], seed: int = 0, Q: int = 5,
                     patch_size: Optional[int] = None, budget_factor: int = 50) -> List[PatchRecord]:
    """
    Bring every density level up to the size of the largest one.

    New random crops are drawn from the (already resized) source annotations and
    kept when their nearest centroid is an under-populated level. When the
    sampling budget runs out, members of the short level are duplicated with a
    fresh random flip.
    """
    N = clustering.N
    sizes = level_sizes(records, N)
    target = max(sizes)
    deficit = [target - s for s in sizes]
    if sum(deficit) == 0:
        return list(records)
    if not sources and any(s == 0 for s in sizes):
        raise ValueError("cannot fill an empty density level without source images")

    rng = np.random.default_rng(seed)
    balanced = list(records)
    if patch_size is None:
        patch_size = records[0].crop[2]
    names = sorted(sources)
    budget = budget_factor * sum(deficit)
    attempts = 0
    while sum(deficit) > 0 and attempts < budget and names:
        attempts += 1
        ann = sources[names[int(rng.integers(len(names)))]]
        x0 = int(rng.integers(0, ann.width - patch_size + 1))
        y0 = int(rng.integers(0, ann.height - patch_size + 1))
        flipped = bool(rng.random() < 0.5)
        record = make_patch(ann, (x0, y0, patch_size, patch_size), flipped, Q)
        level = clustering.nearest_level(record.D)
        if deficit[level] > 0:
            record.level = level
            balanced.append(record)
            deficit[level] -= 1

    if sum(deficit) > 0:
        logger.warning(f"⚠️ Sampling budget of {budget} crops exhausted, duplicating members for deficits {deficit}")
        for level in range(N):
            members = [r for r in balanced if r.level == level]
            if deficit[level] and not members:
                raise ValueError(f"density level {level} is empty and no crop could be sampled for it")
            for _ in range(deficit[level]):
                base = members[int(rng.integers(len(members)))]
                duplicate = copy.deepcopy(base)
                flip = bool(rng.random() < 0.5)
                if flip != base.flipped:
                    duplicate.points = _flip_points(base.points, base.crop[2])
                    duplicate.flipped = flip
                balanced.append(duplicate)
            deficit[level] = 0

    logger.info(f"Balanced levels to {level_sizes(balanced, N)} after {attempts} sampled crops")
    return balanced


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def save_manifest(records: Sequence[PatchRecord], clustering: DensityClustering, path: str,
                  resize_to: int, Q: int) -> None:
    payload = {
        "format_version": MANIFEST_VERSION,
        "resize_to": int(resize_to),
        "Q": int(Q),
        "N": int(clustering.N),
        "centroids": [float(c) for c in clustering.centroids],
        "patches": [r.to_dict() for r in records],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")


@dataclass
class Manifest:
    resize_to: int
    Q: int
    clustering: DensityClustering
    records: List[PatchRecord]


def _record_from_dict(index: int, data: Dict) -> PatchRecord:
    for key in ("source_image", "crop", "flipped", "points", "D", "level"):
        if key not in data:
            raise ManifestError(f"patch record {index} is missing field {key!r}")
    try:
        record = PatchRecord(
            source_image=str(data["source_image"]),
            crop=tuple(data["crop"]),
            flipped=bool(data["flipped"]),
            points=np.asarray(data["points"], dtype=np.float64).reshape(-1, 2),
            D=math.inf if data["D"] is None else float(data["D"]),
            level=int(data["level"]),
        )
    except (TypeError, ValueError) as e:
        raise ManifestError(f"patch record {index} is invalid: {e}") from e
    if len(record.crop) != 4:
        raise ManifestError(f"patch record {index} crop must have 4 entries, got {len(record.crop)}")
    if "count" in data and int(data["count"]) != record.count:
        raise ManifestError(f"patch record {index} count {data['count']} disagrees with {record.count} points")
    return record


def load_manifest(path: str) -> Manifest:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        line = text.splitlines()[e.lineno - 1] if 0 < e.lineno <= len(text.splitlines()) else ""
        raise ManifestError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}: {line.strip()!r}") from e
    if not isinstance(payload, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    for key in ("resize_to", "Q", "N", "centroids", "patches"):
        if key not in payload:
            raise ManifestError(f"{path}: missing top-level field {key!r}")
    records = [_record_from_dict(i, d) for i, d in enumerate(payload["patches"])]
    N = int(payload["N"])
    for i, r in enumerate(records):
        if not UNASSIGNED <= r.level < N:
            raise ManifestError(f"patch record {i} has level {r.level} outside [0, {N})")
    clustering = DensityClustering(N=N, centroids=[float(c) for c in payload["centroids"]],
                                   assignments=[r.level for r in records])
    return Manifest(resize_to=int(payload["resize_to"]), Q=int(payload["Q"]), clustering=clustering, records=records)
