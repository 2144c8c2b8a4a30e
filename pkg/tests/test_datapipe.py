import itertools
import json
import math

import numpy as np
import pytest

from datapipe import (
    DensityClustering,
    ManifestError,
    balance_clusters,
    cluster_density_levels,
    crop_patch_pixels,
    extract_patches,
    level_sizes,
    load_manifest,
    make_patch,
    resize_annotation,
    save_manifest,
)
from geometry import PointAnnotation


@pytest.fixture
def crowd(rng):
    return PointAnnotation(width=100, height=80, points=rng.random((60, 2)) * [100, 80], image="crowd")


def grid_points(x_range, y_range, step):
    xs, ys = np.meshgrid(np.arange(*x_range, step), np.arange(*y_range, step))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


@pytest.fixture
def split_scene():
    """64 x 64 source: sparse top half, dense bottom half."""
    points = np.vstack([grid_points((2, 64), (2, 32), 12), grid_points((1, 64), (33, 64), 2)])
    return PointAnnotation(width=64, height=64, points=points, image="split")


def min_sse(values, N):
    """Exhaustive minimum SSE over all contiguous splits of the sorted values."""
    values = np.sort(values)
    best = math.inf
    for cuts in itertools.combinations(range(1, len(values)), N - 1):
        groups = np.split(values, cuts)
        best = min(best, sum(((g - g.mean()) ** 2).sum() for g in groups))
    return best


def sse_of(values, assignments):
    values, assignments = np.asarray(values), np.asarray(assignments)
    return sum(((values[assignments == k] - values[assignments == k].mean()) ** 2).sum()
               for k in np.unique(assignments))


# ============================================================================
# Patch extraction
# ============================================================================

class TestExtractPatches:
    def test_eighteen_records(self, crowd):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        assert len(records) == 18
        assert [r.flipped for r in records] == [False] * 9 + [True] * 9
        assert all(r.crop[2:] == (32, 32) for r in records)

    def test_quarters_partition_the_image(self, crowd):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        assert sum(r.count for r in records[:4]) == crowd.count

    def test_flipped_twins_mirror_points(self, crowd):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        for plain, flipped in zip(records[:9], records[9:]):
            assert plain.crop == flipped.crop
            assert flipped.count == plain.count
            if plain.count:
                np.testing.assert_allclose(flipped.points[:, 0], 32 - plain.points[:, 0], atol=1e-9)
                np.testing.assert_array_equal(flipped.points[:, 1], plain.points[:, 1])
            assert flipped.D == pytest.approx(plain.D) or (math.isinf(plain.D) and math.isinf(flipped.D))

    def test_deterministic(self, crowd):
        first = extract_patches(None, crowd, resize_to=64, seed=5)
        second = extract_patches(None, crowd, resize_to=64, seed=5)
        assert first == second

    def test_odd_resize_rejected(self, crowd):
        with pytest.raises(ValueError, match="even"):
            extract_patches(None, crowd, resize_to=63)

    def test_image_must_match_annotation(self, crowd):
        with pytest.raises(ValueError, match="does not match"):
            extract_patches(np.zeros((80, 90), dtype=np.uint8), crowd, resize_to=64)

    def test_resize_keeps_points_inside(self):
        ann = PointAnnotation(width=10, height=10, points=[[9.999, 9.999], [0, 0]])
        resized = resize_annotation(ann, 4)
        assert np.all(resized.points < 4)

    def test_crop_pixels_mirror_when_flipped(self):
        image = np.arange(16, dtype=np.uint8).reshape(4, 4)
        ann = PointAnnotation(width=4, height=4, image="tiny")
        plain = crop_patch_pixels(image, make_patch(ann, (2, 0, 2, 2), False, 2))
        flipped = crop_patch_pixels(image, make_patch(ann, (2, 0, 2, 2), True, 2))
        np.testing.assert_array_equal(plain, [[2, 3], [6, 7]])
        np.testing.assert_array_equal(flipped, [[3, 2], [7, 6]])


# ============================================================================
# Density-level clustering
# ============================================================================

class TestClustering:
    def test_two_obvious_groups(self):
        clustering = cluster_density_levels([1.0, 2.0, 10.0, 11.0], 2)
        # small D is dense, so the first two land in the top level
        assert clustering.assignments == [1, 1, 0, 0]
        assert clustering.centroids == pytest.approx([1.5, 10.5])
        assert clustering.level_centroid(0) == pytest.approx(10.5)

    def test_single_level(self):
        clustering = cluster_density_levels([3.0, 5.0, 7.0], 1)
        assert clustering.assignments == [0, 0, 0]
        assert clustering.centroids == pytest.approx([5.0])

    def test_infinite_degree_goes_to_sparsest(self):
        clustering = cluster_density_levels([1.0, math.inf, 2.0, 20.0, 21.0], 2)
        assert clustering.assignments[1] == 0
        assert clustering.nearest_level(math.inf) == 0

    def test_too_few_distinct_values(self):
        with pytest.raises(ValueError, match="distinct"):
            cluster_density_levels([4.0, 4.0, math.inf], 2)

    @pytest.mark.parametrize("N", [2, 3])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_search(self, N, seed):
        rng = np.random.default_rng(seed)
        values = rng.random(int(rng.integers(6, 21))) * 100
        clustering = cluster_density_levels(values, N, seed=seed)
        assert sse_of(values, clustering.assignments) == pytest.approx(min_sse(values, N), rel=1e-9, abs=1e-9)

    def test_levels_follow_density(self, rng):
        values = np.concatenate([rng.normal(5, 0.5, 20), rng.normal(20, 1, 20), rng.normal(60, 3, 20)])
        clustering = cluster_density_levels(values, 3)
        means = [values[np.asarray(clustering.assignments) == k].mean() for k in range(3)]
        assert means[0] > means[1] > means[2]

    def test_deterministic(self, rng):
        values = rng.random(40) * 30
        assert cluster_density_levels(values, 3, seed=1) == cluster_density_levels(values, 3, seed=1)


# ============================================================================
# Balancing
# ============================================================================

class TestBalance:
    def _records(self, scene, n_sparse, n_dense):
        sparse = [make_patch(scene, (x0, 0, 32, 32), False, 3) for x0 in np.linspace(0, 32, n_sparse).astype(int)]
        dense = [make_patch(scene, (x0, 32, 32, 32), False, 3) for x0 in np.linspace(0, 32, n_dense).astype(int)]
        clustering = DensityClustering(N=2, centroids=sorted([np.mean([r.D for r in dense]),
                                                              np.mean([r.D for r in sparse])]))
        records = sparse + dense
        for record in records:
            record.level = clustering.nearest_level(record.D)
        return records, clustering

    def test_fills_short_level(self, split_scene):
        records, clustering = self._records(split_scene, 10, 4)
        assert level_sizes(records, 2) == [10, 4]
        balanced = balance_clusters(records, clustering, {"split": split_scene}, seed=0, Q=3, patch_size=32)
        assert level_sizes(balanced, 2) == [10, 10]
        for record in balanced[len(records):]:
            assert clustering.nearest_level(record.D) == record.level

    def test_balanced_input_unchanged(self, split_scene):
        records, clustering = self._records(split_scene, 4, 4)
        assert balance_clusters(records, clustering, {"split": split_scene}) == records

    def test_empty_level_without_sources(self, split_scene):
        records, clustering = self._records(split_scene, 3, 2)
        sparse_only = [r for r in records if r.level == 0]
        with pytest.raises(ValueError, match="source"):
            balance_clusters(sparse_only, clustering, {}, patch_size=32)

    def test_deterministic(self, split_scene):
        records, clustering = self._records(split_scene, 10, 4)
        first = balance_clusters(records, clustering, {"split": split_scene}, seed=3, Q=3, patch_size=32)
        second = balance_clusters(records, clustering, {"split": split_scene}, seed=3, Q=3, patch_size=32)
        assert first == second


# ============================================================================
# Manifest
# ============================================================================

class TestManifest:
    def test_round_trip(self, crowd, tmp_path):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        records[0].points = np.zeros((0, 2))
        records[0].D = math.inf
        clustering = cluster_density_levels([r.D for r in records], 2)
        for record, level in zip(records, clustering.assignments):
            record.level = level
        path = tmp_path / "manifest.json"
        save_manifest(records, clustering, str(path), resize_to=64, Q=3)

        manifest = load_manifest(str(path))
        assert manifest.records == records
        assert manifest.resize_to == 64 and manifest.Q == 3
        assert manifest.clustering.centroids == pytest.approx(clustering.centroids)
        assert json.loads(path.read_text())["patches"][0]["D"] is None

    def test_missing_level_names_record(self, crowd, tmp_path):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        path = tmp_path / "manifest.json"
        save_manifest(records, DensityClustering(N=1, centroids=[1.0]), str(path), resize_to=64, Q=3)
        payload = json.loads(path.read_text())
        del payload["patches"][3]["level"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ManifestError, match="patch record 3"):
            load_manifest(str(path))

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{\n  "resize_to": 64,\n  "Q": oops\n}\n')
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(str(path))

    def test_level_out_of_range(self, crowd, tmp_path):
        records = extract_patches(None, crowd, resize_to=64, Q=3, seed=0)
        records[2].level = 5
        path = tmp_path / "manifest.json"
        save_manifest(records, DensityClustering(N=2, centroids=[1.0, 2.0]), str(path), resize_to=64, Q=3)
        with pytest.raises(ManifestError, match="outside"):
            load_manifest(str(path))
