import os

os.environ.setdefault('SPSEG_ENV', 'testing')

import numpy as np
import pytest

from spseg.partition import SuperpointGraph, make_superpoint
from spseg.pcio import PointCloud, SceneSpec, gen_synthetic


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long acceptance runs, skipped with SPSEG_SKIP_SLOW=1')


def pytest_collection_modifyitems(config, items):
    if os.environ.get('SPSEG_SKIP_SLOW') != '1':
        return
    skip_slow = pytest.mark.skip(reason='SPSEG_SKIP_SLOW=1 is set')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """A light synthetic scene recipe."""
    return SceneSpec(num_objects=2, num_classes=4, points_per_object=60)


@pytest.fixture
def small_cloud(small_spec):
    """Synthetic 4-class scene of a few hundred points."""
    return gen_synthetic(small_spec, seed=3)


@pytest.fixture
def line_cloud():
    """Twelve points on a line, two classes, two colors."""
    positions = np.column_stack([np.arange(12) * 0.05, np.zeros(12), np.zeros(12)])
    labels = np.array([0] * 6 + [1] * 6)
    colors = np.where(labels[:, None] == 0, 0.2, 0.8) * np.ones((12, 3))
    return PointCloud(positions, colors, labels, num_classes=2)


def make_random_graph(rng, n, p=0.3):
    """Graph over ``n`` one-point superpoints with random undirected edges."""
    positions = rng.normal(size=(n, 3))
    cloud = PointCloud(positions, np.full((n, 3), 0.5), np.zeros(n, dtype=np.int64), num_classes=1)
    nodes = [make_superpoint(i, cloud, [i]) for i in range(n)]
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    attrs = np.zeros((len(edges), 4))
    return SuperpointGraph(nodes, np.array(edges, dtype=np.int64).reshape(-1, 2), attrs)


@pytest.fixture
def random_graph_factory():
    """Builds random superpoint graphs for propagation tests."""
    return make_random_graph


@pytest.fixture
def point_superpoints():
    """Builds one single-point superpoint per row of a position array."""
    def build(positions):
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        cloud = PointCloud(positions, np.full((n, 3), 0.5), np.zeros(n, dtype=np.int64), num_classes=1)
        return [make_superpoint(i, cloud, [i]) for i in range(n)]
    return build
