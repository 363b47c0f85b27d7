import numpy as np
import pytest

from ckmkit.cloud import (
    DEFAULT_CLASS_TABLE,
    DegenerateNeighborhood,
    PointCloud,
    SpatialIndex,
    compute_normals,
    estimate_normal,
    fps,
    fps_indices,
    load_cloud,
    point_segment_distance,
    save_xyzrgbl,
)


def random_cloud(n, seed, extent=100.0):
    rng = np.random.default_rng(seed)
    return PointCloud(
        rng.random((n, 3)) * extent,
        rng.random((n, 3)),
        rng.integers(0, len(DEFAULT_CLASS_TABLE), n),
    )


class TestLoaders:
    def test_three_rows_order_preserved(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text(
            "# a comment\n"
            "1 2 3 0.1 0.2 0.3 0\n"
            "4 5 6 0.4 0.5 0.6 2\n"
            "7 8 9 0.7 0.8 0.9 5\n"
        )
        cloud = load_cloud(path)
        assert len(cloud) == 3
        assert np.array_equal(cloud.positions[1], [4, 5, 6])
        assert list(cloud.labels) == [0, 2, 5]

    def test_direct_field_mapping(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text("0 0 0 0.5 0.5 0.5 1\n")
        cloud = load_cloud(path)
        point = cloud[0]
        assert np.array_equal(point.pos, [0, 0, 0])
        assert np.array_equal(point.color, [0.5, 0.5, 0.5])
        assert point.label == 1

    def test_unknown_label_maps_to_other(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text("0 0 0 0.5 0.5 0.5 99\n")
        cloud = load_cloud(path)
        assert cloud.class_table[cloud.labels[0]] == "other"
        assert cloud.n_unknown_labels == 1

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text("0 0 0 0.5 0.5 0.5 1\n0 0 0 bad 0.5 0.5 1\n")
        with pytest.raises(ValueError, match=":2"):
            load_cloud(path)

    def test_empty_file_is_valid_empty_cloud(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text("")
        assert len(load_cloud(path)) == 0

    def test_classes_header(self, tmp_path):
        path = tmp_path / "c.xyzrgbl"
        path.write_text("#classes: wall,floor,other\n0 0 0 0 0 0 1\n")
        cloud = load_cloud(path)
        assert cloud.class_table == ("wall", "floor", "other")
        assert cloud.labels[0] == 1

    def test_xyzrgbl_round_trip(self, tmp_path):
        cloud = random_cloud(50, seed=1)
        path = tmp_path / "c.xyzrgbl"
        save_xyzrgbl(cloud, path)
        back = load_cloud(path)
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.colors, cloud.colors)
        assert np.array_equal(back.labels, cloud.labels)

    def test_ply_reader(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_text(
            "ply\n"
            "format ascii 1.0\n"
            "element vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "property int label\n"
            "end_header\n"
            "1 2 3 255 0 51 0\n"
            "4 5 6 0 255 0 3\n"
        )
        cloud = load_cloud(path)
        assert len(cloud) == 2
        assert cloud.colors[0] == pytest.approx([1.0, 0.0, 0.2])
        assert list(cloud.labels) == [0, 3]

    def test_ply_missing_property(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n1 2 3\n"
        )
        with pytest.raises(ValueError, match="lacks property"):
            load_cloud(path)


class TestIndex:
    def test_empty_cloud(self):
        index = SpatialIndex(PointCloud(np.zeros((0, 3))), 2.0)
        assert index.n_occupied_cells == 0
        idx, _ = index.knn([0, 0, 0], 3)
        assert idx.size == 0

    def test_coincident_points_share_cell(self):
        cloud = PointCloud([[1, 1, 1], [1, 1, 1]])
        index = SpatialIndex(cloud, 2.0)
        assert index.n_occupied_cells == 1
        assert sum(len(v) for v in index.cells.values()) == 2

    def test_conservation(self):
        cloud = random_cloud(10_000, seed=2)
        index = SpatialIndex(cloud, 5.0)
        assert sum(len(v) for v in index.cells.values()) == len(cloud)

    def test_rejects_bad_cell_size(self):
        with pytest.raises(ValueError):
            SpatialIndex(random_cloud(5, 0), 0.0)

    def test_knn_at_cloud_point(self):
        cloud = random_cloud(100, seed=3)
        index = SpatialIndex(cloud, 5.0)
        idx, d = index.knn(cloud.positions[17], 1)
        assert idx[0] == 17
        assert d[0] == 0.0

    def test_knn_k_exceeds_size(self):
        cloud = random_cloud(10, seed=4)
        index = SpatialIndex(cloud, 5.0)
        idx, d = index.knn([0, 0, 0], 50)
        assert idx.size == 10
        assert np.all(np.diff(d) >= 0)

    def test_knn_matches_brute_force(self):
        cloud = random_cloud(1000, seed=5)
        index = SpatialIndex(cloud, 7.0)
        rng = np.random.default_rng(6)
        for _ in range(50):
            q = rng.random(3) * 100.0
            idx, d = index.knn(q, 8)
            bd = np.sqrt(((cloud.positions - q) ** 2).sum(axis=1))
            order = np.lexsort((np.arange(len(cloud)), bd))[:8]
            assert np.array_equal(idx, order)
            assert np.array_equal(d, bd[order])

    def test_segment_inclusion_and_exclusion(self):
        cloud = PointCloud([[5, 0.05, 0], [5, 0.9, 0]])
        index = SpatialIndex(cloud, 2.0)
        got = index.segment_neighbors([0, 0, 0], [10, 0, 0], 0.1)
        assert list(got) == [0]

    def test_segment_matches_brute_force(self):
        cloud = random_cloud(2000, seed=7)
        index = SpatialIndex(cloud, 4.0)
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = rng.random(3) * 100.0, rng.random(3) * 100.0
            r = rng.random() * 10.0
            got = index.segment_neighbors(a, b, r)
            d = point_segment_distance(cloud.positions, a, b)
            expect = np.nonzero(d <= r)[0]
            assert np.array_equal(got, expect)

    def test_radius_matches_brute_force(self):
        cloud = random_cloud(1500, seed=9)
        index = SpatialIndex(cloud, 3.0)
        rng = np.random.default_rng(10)
        for _ in range(20):
            q = rng.random(3) * 100.0
            r = rng.random() * 15.0
            got = index.radius_neighbors(q, r)
            d = np.sqrt(((cloud.positions - q) ** 2).sum(axis=1))
            assert np.array_equal(got, np.nonzero(d <= r)[0])

    def test_cell_size_does_not_change_results(self):
        cloud = random_cloud(800, seed=11)
        queries = np.random.default_rng(12).random((10, 3)) * 100.0
        results = []
        for cell in (1.0, 3.0, 10.0):
            index = SpatialIndex(cloud, cell)
            results.append([tuple(index.knn(q, 5)[0]) for q in queries])
        assert results[0] == results[1] == results[2]


class TestNormals:
    def test_flat_plane(self):
        xx, yy = np.meshgrid(np.arange(10.0), np.arange(10.0))
        cloud = PointCloud(np.stack([xx.ravel(), yy.ravel(), np.zeros(100)], axis=1))
        index = SpatialIndex(cloud, 2.0)
        n = estimate_normal(index, [5.2, 5.1, 0.0], 9)
        assert n == pytest.approx([0, 0, 1], abs=1e-12)

    def test_vertical_plane_sign_convention(self):
        yy, zz = np.meshgrid(np.arange(10.0), np.arange(10.0))
        pts = np.stack([np.full(100, 5.0), yy.ravel(), zz.ravel()], axis=1)
        index = SpatialIndex(PointCloud(pts), 2.0)
        n = estimate_normal(index, [5.0, 4.5, 4.5], 9)
        assert n == pytest.approx([1, 0, 0], abs=1e-12)

    def test_noisy_plane_within_five_degrees(self):
        rng = np.random.default_rng(13)
        pts = np.concatenate(
            [rng.random((500, 2)) * 10.0, rng.normal(0, 0.01, (500, 1))], axis=1
        )
        index = SpatialIndex(PointCloud(pts), 1.0)
        n = estimate_normal(index, [5.0, 5.0, 0.0], 16)
        angle = np.degrees(np.arccos(np.clip(n @ np.array([0, 0, 1.0]), -1, 1)))
        assert angle < 5.0

    def test_unit_norm(self):
        cloud = random_cloud(200, seed=14)
        index = SpatialIndex(cloud, 10.0)
        n = estimate_normal(index, cloud.positions[0], 16)
        assert abs(np.linalg.norm(n) - 1.0) < 1e-12

    def test_collinear_neighborhood_raises(self):
        pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        index = SpatialIndex(PointCloud(pts), 2.0)
        with pytest.raises(DegenerateNeighborhood):
            estimate_normal(index, [5.0, 0.0, 0.0], 5)

    def test_k_below_three_rejected(self):
        index = SpatialIndex(random_cloud(10, 15), 2.0)
        with pytest.raises(ValueError):
            estimate_normal(index, [0, 0, 0], 2)

    def test_batch_matches_scalar(self):
        cloud = random_cloud(300, seed=16, extent=20.0)
        index = SpatialIndex(cloud, 2.0)
        batch = compute_normals(index, 12)
        for i in range(0, 300, 37):
            single = estimate_normal(index, cloud.positions[i], 12)
            assert batch[i] == pytest.approx(single, abs=1e-9)


class TestFps:
    def test_identity_subset(self):
        cloud = random_cloud(20, seed=17)
        idx = fps(cloud, 20)
        assert sorted(idx) == list(range(20))

    def test_cube_corners_give_space_diagonal(self):
        corners = np.array(
            [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
        )
        cloud = PointCloud(corners)
        idx = fps(cloud, 2)
        a, b = corners[idx[0]], corners[idx[1]]
        assert np.linalg.norm(a - b) == pytest.approx(np.sqrt(3.0), abs=1e-12)

    def test_beats_random_subsets(self):
        rng = np.random.default_rng(18)
        xyz = rng.random((500, 3)) * 10.0
        chosen = xyz[fps_indices(xyz, 32)]

        def min_pairwise(pts):
            d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
            return d[np.triu_indices(len(pts), k=1)].min()

        ours = min_pairwise(chosen)
        best_random = max(
            min_pairwise(xyz[rng.choice(500, 32, replace=False)]) for _ in range(1000)
        )
        assert ours >= best_random

    def test_out_of_range_n(self):
        cloud = random_cloud(5, seed=19)
        with pytest.raises(ValueError):
            fps(cloud, 6)
        with pytest.raises(ValueError):
            fps(cloud, 0)

    def test_order_invariance_with_distinct_distances(self):
        rng = np.random.default_rng(20)
        xyz = rng.random((100, 3)) * 50.0
        perm = rng.permutation(100)
        idx_a = fps_indices(xyz, 10)
        idx_b = fps_indices(xyz[perm], 10)
        assert np.array_equal(perm[idx_b], idx_a)


class TestCloudContainer:
    def test_take_preserves_fields(self):
        cloud = random_cloud(30, seed=21)
        sub = cloud.take([3, 1, 4])
        assert np.array_equal(sub.positions[0], cloud.positions[3])
        assert np.array_equal(sub.labels, cloud.labels[[3, 1, 4]])

    def test_immutable_arrays(self):
        cloud = random_cloud(5, seed=22)
        with pytest.raises(ValueError):
            cloud.positions[0, 0] = 99.0

    def test_color_range_validated(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], colors=[[2.0, 0, 0]])
