import numpy as np
import pytest

from geometry import dense_degree, generate_density_map
from synthgen import Region, SceneSpec, generate_dataset, generate_scene


@pytest.fixture
def two_region_spec():
    return SceneSpec(64, 64, [Region((0, 0, 64, 32), 10), Region((0, 32, 64, 32), 40)], seed=3)


class TestSceneSpec:
    def test_region_outside_scene(self):
        with pytest.raises(ValueError, match="outside"):
            SceneSpec(32, 32, [Region((20, 0, 16, 16), 3)])

    def test_unknown_placement(self):
        with pytest.raises(ValueError, match="placement"):
            SceneSpec(32, 32, [Region((0, 0, 32, 32), 3, placement="ring")])

    def test_total_count(self, two_region_spec):
        assert two_region_spec.total_count == 50


# ============================================================================
# Single scenes
# ============================================================================

class TestGenerateScene:
    def test_empty_scene(self):
        image, ann = generate_scene(SceneSpec(24, 16, [Region((0, 0, 24, 16), 0)]))
        assert image.shape == (16, 24)
        assert image.dtype == np.uint8
        assert ann.count == 0

    def test_each_region_gets_its_heads(self, two_region_spec):
        _, ann = generate_scene(two_region_spec)
        assert ann.count == 50
        top, bottom = two_region_spec.regions
        assert top.contains(ann.points).sum() == 10
        assert bottom.contains(ann.points).sum() == 40

    def test_heads_keep_apart(self, two_region_spec):
        _, ann = generate_scene(two_region_spec)
        gaps = np.hypot(*(ann.points[:, None] - ann.points[None]).transpose(2, 0, 1))
        np.fill_diagonal(gaps, np.inf)
        assert gaps.min() >= 1.0

    def test_clustered_heads_stay_in_region(self):
        region = Region((8, 8, 16, 16), 30, placement="cluster", center=(10.0, 10.0), spread=20.0)
        _, ann = generate_scene(SceneSpec(32, 32, [region], seed=1))
        assert region.contains(ann.points).all()

    def test_same_seed_same_scene(self, two_region_spec):
        first, second = generate_scene(two_region_spec), generate_scene(two_region_spec)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1].points, second[1].points)

    def test_heads_are_brighter_than_background(self):
        spec = SceneSpec(32, 32, [Region((0, 0, 32, 32), 4)], noise_std=0.0, seed=2)
        image, ann = generate_scene(spec)
        x, y = ann.points[0].astype(int)
        assert image[y, x] > spec.background + 50

    def test_overcrowded_region_rejected(self):
        with pytest.raises(ValueError, match="cannot fit"):
            generate_scene(SceneSpec(8, 8, [Region((0, 0, 2, 2), 100)]))

    def test_ground_truth_mass_is_count(self, two_region_spec):
        _, ann = generate_scene(two_region_spec)
        assert generate_density_map(ann).count == pytest.approx(50.0, rel=1e-5)


# ============================================================================
# Datasets
# ============================================================================

class TestGenerateDataset:
    def test_sparse_counts(self):
        scenes = generate_dataset("sparse", 10, seed=0, size=64)
        assert all(5 <= s.annotation.count <= 20 for s in scenes)
        assert {s.label for s in scenes} == {"sparse"}

    def test_dense_counts(self):
        scenes = generate_dataset("dense", 2, seed=0, size=96)
        assert all(100 <= s.annotation.count <= 300 for s in scenes)

    def test_mixed_labels_each_image(self):
        labels = {s.label for s in generate_dataset("mixed", 12, seed=0, size=64)}
        assert labels <= {"sparse", "dense"}
        assert len(labels) == 2

    def test_pan_scene_is_denser_at_the_bottom(self):
        (scene,) = generate_dataset("pan", 1, seed=4, size=96)
        points = scene.annotation.points
        top, bottom = points[points[:, 1] < 48], points[points[:, 1] >= 48]
        assert dense_degree(bottom, 3) < dense_degree(top, 3)

    def test_names_are_unique(self):
        names = [s.annotation.image for s in generate_dataset("sparse", 5, size=32)]
        assert names == [f"sparse_{i:04d}" for i in range(5)]

    def test_seeded(self):
        first = generate_dataset("sparse", 3, seed=9, size=32)
        second = generate_dataset("sparse", 3, seed=9, size=32)
        other = generate_dataset("sparse", 3, seed=10, size=32)
        assert all(np.array_equal(a.image, b.image) for a, b in zip(first, second))
        assert not all(np.array_equal(a.image, b.image) for a, b in zip(first, other))

    @pytest.mark.parametrize("profile,M", [("crowded", 1), ("sparse", 0)])
    def test_invalid_arguments(self, profile, M):
        with pytest.raises(ValueError):
            generate_dataset(profile, M)
