import numpy as np
import pytest

from spseg.errors import CloudFormatError, InfeasibleSceneError, SpsegError, SupervisionError
from spseg.pcio import (PointCloud, SceneSpec, floor_share, gen_synthetic, load_cloud, sample_supervision,
                        save_cloud, supervision_budget)


class TestPointCloud:
    """Construction-time validation of clouds."""

    def test_arrays_are_read_only(self, line_cloud):
        """Cloud arrays cannot be modified in place."""
        with pytest.raises(ValueError):
            line_cloud.positions[0, 0] = 1.0

    def test_length_mismatch(self):
        """Positions and labels must have equal length."""
        with pytest.raises(CloudFormatError):
            PointCloud(np.zeros((3, 3)), np.zeros((3, 3)), [0, 1])

    def test_color_out_of_range(self):
        """Colors outside [0, 1] are rejected."""
        with pytest.raises(CloudFormatError, match="colors"):
            PointCloud(np.zeros((1, 3)), [[1.5, 0, 0]], [0])

    def test_label_out_of_declared_range(self):
        """Labels must be below the declared class count."""
        with pytest.raises(CloudFormatError, match="out of range"):
            PointCloud(np.zeros((2, 3)), np.zeros((2, 3)), [0, 3], num_classes=3)

    def test_num_classes_inferred(self, line_cloud):
        assert line_cloud.num_classes == 2
        assert line_cloud.class_counts().tolist() == [6, 6]


class TestCloudFiles:
    """Text format reading and writing."""

    def test_save_then_load_preserves_cloud(self, small_cloud, tmp_path):
        """Saved clouds load back bit-exactly."""
        path = tmp_path / "scene.txt"
        save_cloud(small_cloud, path)
        loaded = load_cloud(path)
        assert loaded.num_classes == small_cloud.num_classes
        np.testing.assert_array_equal(loaded.positions, small_cloud.positions)
        np.testing.assert_array_equal(loaded.colors, small_cloud.colors)
        np.testing.assert_array_equal(loaded.gt_labels, small_cloud.gt_labels)

    def test_comments_and_blank_lines_are_skipped(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# a comment\n\n0 0 0 0.1 0.2 0.3 0\n#classes ignored here\n1 1 1 0.5 0.5 0.5 1\n")
        cloud = load_cloud(path)
        assert cloud.n == 2
        assert cloud.num_classes == 2

    def test_header_sets_class_count(self, tmp_path):
        """A #classes header counts classes absent from the points."""
        path = tmp_path / "c.txt"
        path.write_text("#classes 5\n0 0 0 0.1 0.2 0.3 1\n")
        assert load_cloud(path).num_classes == 5

    def test_wrong_field_count_names_the_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 0.1 0.2 0.3 0\n0 0 0 0.1 0.2 0\n")
        with pytest.raises(CloudFormatError, match=r"bad.txt:2"):
            load_cloud(path)

    def test_non_numeric_field(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 x 0.1 0.2 0.3 0\n")
        with pytest.raises(CloudFormatError, match="non-numeric"):
            load_cloud(path)

    def test_label_beyond_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("#classes 2\n0 0 0 0.1 0.2 0.3 2\n")
        with pytest.raises(CloudFormatError, match="out of range"):
            load_cloud(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("#classes 3\n")
        with pytest.raises(CloudFormatError, match="no points"):
            load_cloud(path)

    def test_format_error_is_a_value_error(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(ValueError):
            load_cloud(path)

    def test_random_clouds_survive_save_and_load(self, rng, tmp_path):
        """Arbitrary doubles, sizes and class counts come back unchanged."""
        path = tmp_path / "random.txt"
        for _ in range(100):
            n = int(rng.integers(1, 40))
            c = int(rng.integers(1, 6))
            positions = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=(n, 3))
            cloud = PointCloud(positions, rng.random((n, 3)), rng.integers(0, c, size=n), num_classes=c)
            save_cloud(cloud, path)
            loaded = load_cloud(path)
            assert loaded.num_classes == c
            np.testing.assert_array_equal(loaded.positions, cloud.positions)
            np.testing.assert_array_equal(loaded.colors, cloud.colors)
            np.testing.assert_array_equal(loaded.gt_labels, cloud.gt_labels)


class TestSyntheticScenes:
    """Deterministic scene generation."""

    def test_same_seed_same_scene(self, small_spec):
        a = gen_synthetic(small_spec, seed=11)
        b = gen_synthetic(small_spec, seed=11)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_different_seed_differs(self, small_spec):
        a = gen_synthetic(small_spec, seed=1)
        b = gen_synthetic(small_spec, seed=2)
        assert not np.array_equal(a.positions, b.positions)

    def test_every_class_present(self):
        """Each class receives at least one primitive's worth of points."""
        spec = SceneSpec(num_objects=4, num_classes=5, points_per_object=30)
        cloud = gen_synthetic(spec, seed=0)
        assert cloud.num_classes == 5
        assert np.all(cloud.class_counts() >= 30)

    def test_every_class_has_ten_points_across_seeds(self):
        spec = SceneSpec(num_objects=2, num_classes=4, points_per_object=20)
        for seed in range(50):
            cloud = gen_synthetic(spec, seed=seed)
            counts = np.bincount(cloud.gt_labels, minlength=4)
            assert counts.min() >= 10, seed

    def test_too_many_classes_for_objects(self):
        spec = SceneSpec(num_objects=1, num_classes=5)
        with pytest.raises(InfeasibleSceneError):
            gen_synthetic(spec, seed=0)

    def test_colors_stay_in_range(self, small_cloud):
        assert small_cloud.colors.min() >= 0.0
        assert small_cloud.colors.max() <= 1.0


class TestSupervision:
    """Sparse annotation sampling."""

    def test_budget_rule(self):
        assert supervision_budget(500, 2000, 4, 0.0001) == 1
        assert supervision_budget(500, 2000, 4, 0.1) == 50
        assert supervision_budget(10, 2000, 4, 0.1) == 10

    def test_budget_floor_is_exact(self):
        assert supervision_budget(100, 100, 1, 0.29) == 29
        assert supervision_budget(1000, 300, 3, 0.07) == 7
        assert supervision_budget(1000, 1000, 4, 0.0001) == 1

    def test_floor_share(self):
        assert floor_share(0.29, 100) == 29
        assert floor_share(0.57, 100) == 57
        assert floor_share(0.05, 39) == 1
        assert floor_share(0.5, 7, 2) == 1
        assert floor_share(0.0, 50) == 0

    def test_one_point_per_class_at_tiny_rate(self, small_cloud):
        mask = sample_supervision(small_cloud, 0.0001, seed=0)
        labels = small_cloud.gt_labels[mask.indices()]
        assert sorted(labels.tolist()) == list(range(small_cloud.num_classes))

    def test_counts_per_class(self, small_cloud):
        rate = 0.05
        mask = sample_supervision(small_cloud, rate, seed=4)
        counts = np.bincount(small_cloud.gt_labels[mask.indices()], minlength=small_cloud.num_classes)
        for label, size in enumerate(small_cloud.class_counts()):
            assert counts[label] == supervision_budget(size, small_cloud.n, small_cloud.num_classes, rate)

    def test_rate_one_supervises_everything(self, line_cloud):
        mask = sample_supervision(line_cloud, 1.0, seed=0)
        assert mask.count == line_cloud.n

    def test_deterministic(self, small_cloud):
        a = sample_supervision(small_cloud, 0.01, seed=9)
        b = sample_supervision(small_cloud, 0.01, seed=9)
        np.testing.assert_array_equal(a.supervised, b.supervised)

    @pytest.mark.parametrize("rate", [0.0, -0.1, 1.5])
    def test_invalid_rate(self, small_cloud, rate):
        with pytest.raises(SupervisionError, match="rate"):
            sample_supervision(small_cloud, rate, seed=0)
        with pytest.raises(SpsegError):
            sample_supervision(small_cloud, rate, seed=0)
