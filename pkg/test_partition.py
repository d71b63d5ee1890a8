import numpy as np
import pytest

from spseg.errors import PartitionError
from spseg.partition import (PartitionParams, SuperpointGraph, SuperpointLabels, build_graph, dump_graph,
                             estimate_normals, make_superpoint, partition_cloud, superpoint_labels,
                             write_graph)
from spseg.pcio import PointCloud, SupervisionMask


def grid_cloud(split_colors=True):
    """10 x 10 grid on z=0 with 0.05 spacing; left and right halves differ in color and class."""
    ix, iy = np.meshgrid(np.arange(10), np.arange(10), indexing='ij')
    positions = np.column_stack([ix.ravel() * 0.05, iy.ravel() * 0.05, np.zeros(100)])
    right = ix.ravel() >= 5
    labels = right.astype(np.int64)
    shade = np.where(right, 0.8, 0.2) if split_colors else np.full(100, 0.5)
    return PointCloud(positions, shade[:, None] * np.ones((100, 3)), labels, num_classes=2)


GRID_PARAMS = PartitionParams(voxel_size=0.06, min_sp_size=1)


def brute_force_knn(positions, k):
    """Symmetrized k nearest neighbors by sorting every distance; ties go to the smaller id."""
    edges = set()
    for i in range(len(positions)):
        ranked = sorted((float(np.linalg.norm(positions[j] - positions[i])), j)
                        for j in range(len(positions)) if j != i)
        for _, j in ranked[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


class TestNormals:
    """Local plane fitting."""

    def test_horizontal_plane_points_up(self):
        normals = estimate_normals(grid_cloud().positions)
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (100, 1)), atol=1e-9)

    def test_vertical_plane_prefers_positive_x(self):
        positions = grid_cloud().positions[:, [2, 0, 1]]  # plane x = 0
        normals = estimate_normals(positions)
        np.testing.assert_allclose(normals, np.tile([1.0, 0.0, 0.0], (100, 1)), atol=1e-9)

    def test_unit_length(self, small_cloud):
        normals = estimate_normals(small_cloud.positions)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)


class TestPartition:
    """Region growing into superpoints."""

    def test_color_boundary_splits_grid(self):
        superpoints = partition_cloud(grid_cloud(), GRID_PARAMS)
        assert len(superpoints) == 2
        assert [sp.size for sp in superpoints] == [50, 50]
        assert superpoints[0].point_indices[0] == 0

    def test_covers_every_point_once(self, small_cloud):
        superpoints = partition_cloud(small_cloud)
        members = np.concatenate([sp.point_indices for sp in superpoints])
        assert len(members) == small_cloud.n
        assert len(np.unique(members)) == small_cloud.n

    def test_ids_follow_first_member(self, small_cloud):
        superpoints = partition_cloud(small_cloud)
        assert [sp.id for sp in superpoints] == list(range(len(superpoints)))
        firsts = [int(sp.point_indices[0]) for sp in superpoints]
        assert firsts == sorted(firsts)

    def test_deterministic(self, small_cloud):
        a = partition_cloud(small_cloud)
        b = partition_cloud(small_cloud)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.point_indices, y.point_indices)

    def test_small_regions_merge(self):
        superpoints = partition_cloud(grid_cloud(), PartitionParams(voxel_size=0.06, min_sp_size=60))
        assert len(superpoints) == 1
        assert superpoints[0].size == 100

    def test_merge_prefers_a_neighbor_of_the_same_color(self):
        cloud = grid_cloud()
        # a dark point 2 cm from the light half, 7 cm from the dark half
        positions = np.vstack([cloud.positions, [0.27, 0.0, 0.0]])
        colors = np.vstack([cloud.colors, [0.2, 0.2, 0.2]])
        labels = np.append(cloud.gt_labels, 0)
        stray = PointCloud(positions, colors, labels, num_classes=2)
        superpoints = partition_cloud(stray, PartitionParams(voxel_size=0.06, min_sp_size=2))
        assert [sp.size for sp in superpoints] == [51, 50]
        assert 100 in superpoints[0].point_indices

    def test_parallel_planes_are_two_superpoints(self):
        grid = grid_cloud(split_colors=False)
        positions = np.vstack([grid.positions, grid.positions + [0.0, 0.0, 0.5]])
        colors = np.full((200, 3), 0.5)
        cloud = PointCloud(positions, colors, np.repeat([0, 1], 100), num_classes=2)
        superpoints = partition_cloud(cloud, GRID_PARAMS)
        assert [sp.point_indices.tolist() for sp in superpoints] == [list(range(100)), list(range(100, 200))]

    def test_max_extent_limits_region_size(self):
        params = PartitionParams(voxel_size=0.06, min_sp_size=1, max_extent=0.1)
        superpoints = partition_cloud(grid_cloud(split_colors=False), params)
        assert len(superpoints) > 1
        assert all(sp.diameter <= 0.2 + 1e-9 for sp in superpoints)

    def test_without_cap_uniform_grid_is_one_region(self):
        superpoints = partition_cloud(grid_cloud(split_colors=False), GRID_PARAMS)
        assert len(superpoints) == 1

    @pytest.mark.parametrize("voxel_size", [0.0, -0.5])
    def test_nonpositive_voxel_size(self, voxel_size):
        with pytest.raises(PartitionError):
            partition_cloud(grid_cloud(), PartitionParams(voxel_size=voxel_size))

    def test_superpoint_summary(self):
        cloud = grid_cloud()
        sp = make_superpoint(7, cloud, [11, 0, 1, 10])
        assert sp.point_indices.tolist() == [0, 1, 10, 11]
        np.testing.assert_allclose(sp.centroid, [0.025, 0.025, 0.0])
        assert sp.diameter == pytest.approx(0.05)

    def test_empty_superpoint_rejected(self, line_cloud):
        with pytest.raises(PartitionError):
            make_superpoint(0, line_cloud, [])


class TestGraph:
    """Superpoint adjacency."""

    @pytest.fixture
    def superpoints(self, small_cloud):
        return partition_cloud(small_cloud)

    def test_edges_are_unique_and_ordered(self, superpoints):
        graph = build_graph(superpoints, k=5)
        assert np.all(graph.edges[:, 0] < graph.edges[:, 1])
        assert len(graph.edge_set()) == len(graph.edges)

    def test_every_node_has_a_neighbor(self, superpoints):
        graph = build_graph(superpoints, k=3)
        assert all(len(graph.neighbors(i)) >= 1 for i in range(graph.num_nodes))

    def test_neighbors_are_symmetric(self, superpoints):
        graph = build_graph(superpoints, k=4)
        for i in range(graph.num_nodes):
            for j in graph.neighbors(i):
                assert i in graph.neighbors(j)

    def test_large_k_gives_complete_graph(self):
        superpoints = partition_cloud(grid_cloud(), GRID_PARAMS)
        graph = build_graph(superpoints, k=10)
        assert graph.edge_set() == {(0, 1)}

    def test_matches_brute_force_knn(self, rng, point_superpoints):
        for _ in range(10):
            positions = rng.normal(size=(20, 3))
            graph = build_graph(point_superpoints(positions), k=3)
            assert graph.edge_set() == brute_force_knn(positions, 3)

    def test_two_superpoints_one_neighbor(self, point_superpoints):
        graph = build_graph(point_superpoints([[0.0, 0.0, 0.0], [1.0, 2.0, 0.0]]), k=1)
        assert graph.edge_set() == {(0, 1)}

    def test_coincident_centroids_keep_k_neighbors(self, point_superpoints):
        graph = build_graph(point_superpoints(np.zeros((3, 3))), k=1)
        assert graph.edge_set() == {(0, 1), (0, 2)}

    def test_distance_ties_go_to_smaller_id(self, point_superpoints):
        positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.5, 0.0, 0.0]]
        graph = build_graph(point_superpoints(positions), k=1)
        assert graph.edge_set() == {(0, 1), (2, 3)}
        assert graph.edge_set() == brute_force_knn(np.array(positions), 1)

    def test_edge_attributes(self):
        cloud = grid_cloud()
        nodes = [make_superpoint(0, cloud, [0]), make_superpoint(1, cloud, [1, 2, 11, 12])]
        graph = build_graph(nodes, k=1)
        expected_offset = nodes[1].centroid - nodes[0].centroid
        np.testing.assert_allclose(graph.edge_attrs[0, :3], expected_offset)
        assert graph.edge_attrs[0, 3] == pytest.approx(np.log(4.0))

    def test_directed_edges_are_antisymmetric(self, superpoints):
        graph = build_graph(superpoints)
        src, dst, attrs = graph.directed_edges()
        m = len(graph.edges)
        assert len(src) == 2 * m
        np.testing.assert_array_equal(src[:m], dst[m:])
        np.testing.assert_array_equal(attrs[:m], -attrs[m:])

    def test_single_superpoint(self, line_cloud):
        graph = build_graph([make_superpoint(0, line_cloud, range(12))])
        assert len(graph.edges) == 0
        assert graph.is_connected()

    def test_disconnected_graph_is_detected(self, line_cloud):
        nodes = [make_superpoint(i, line_cloud, [i]) for i in range(4)]
        graph = SuperpointGraph(nodes, [[0, 1], [2, 3]], np.zeros((2, 4)))
        assert not graph.is_connected()

    def test_bad_k(self, superpoints):
        with pytest.raises(PartitionError):
            build_graph(superpoints, k=0)


class TestSuperpointLabels:
    """Supervision lifted to superpoints."""

    def test_modal_label_with_tie_to_smallest(self):
        cloud = grid_cloud()
        sp = [make_superpoint(0, cloud, [4, 5, 6, 50, 55, 56]), make_superpoint(1, cloud, [0])]
        # supervised: 4 (class 0), 55 (class 1); point 0 unsupervised
        supervised = np.zeros(100, dtype=bool)
        supervised[[4, 55]] = True
        labels = superpoint_labels(sp, cloud, SupervisionMask(supervised))
        assert labels.label.tolist() == [0, -1]
        assert labels.supervised.tolist() == [True, False]
        assert labels.num_supervised == 1

    def test_majority_wins(self):
        cloud = grid_cloud()
        sp = [make_superpoint(0, cloud, [4, 50, 55])]
        supervised = np.zeros(100, dtype=bool)
        supervised[[4, 50, 55]] = True
        labels = superpoint_labels(sp, cloud, SupervisionMask(supervised))
        assert labels.label.tolist() == [1]

    def test_mask_length_mismatch(self, line_cloud):
        sp = [make_superpoint(0, line_cloud, range(12))]
        with pytest.raises(PartitionError):
            superpoint_labels(sp, line_cloud, SupervisionMask(np.zeros(5, dtype=bool)))

    def test_label_flag_mismatch(self):
        with pytest.raises(PartitionError):
            SuperpointLabels([0, -1], [False, False])


class TestGraphDump:

    def test_dump_format(self, tmp_path):
        cloud = grid_cloud()
        superpoints = partition_cloud(cloud, GRID_PARAMS)
        graph = build_graph(superpoints)
        labels = SuperpointLabels([1, -1], [True, False])
        assert dump_graph(graph, labels) == "node 0 50 1\nnode 1 50 -1\nedge 0 1\n"
        path = tmp_path / "g.graph"
        write_graph(graph, path)
        assert path.read_text().splitlines()[0] == "node 0 50 -1"
