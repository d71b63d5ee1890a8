"""
Superpoint partition and superpoint graph construction.

Points are grouped by deterministic region growing over a radius
neighborhood: a neighbor joins the region when its estimated normal and
color are close to those of the point it was reached from. Seeds are
visited voxel by voxel in lexicographic voxel order.
"""

import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import PartitionError
from .pcio import PointCloud, SupervisionMask

logger = logging.getLogger(__name__)


class PartitionParams(BaseModel):
    """Region-growing parameters."""
    voxel_size: float = Field(default=0.15, description="Neighborhood radius and seeding voxel size in meters")
    normal_angle_tol: float = Field(default=30.0, gt=0.0, le=180.0, description="Max normal angle between neighbors, degrees")
    color_tol: float = Field(default=0.15, gt=0.0, description="Max Euclidean RGB distance between neighbors")
    min_sp_size: int = Field(default=5, ge=1, description="Regions smaller than this merge into the nearest region")
    max_extent: Optional[float] = Field(default=None, gt=0.0, description="Max distance of a region member from its seed")
    normal_k: int = Field(default=10, ge=3, description="Neighbors used for normal estimation")

    class Config:
        extra = "forbid"


@dataclass(frozen=True)
class Superpoint:
    id: int
    point_indices: np.ndarray
    centroid: np.ndarray
    mean_color: np.ndarray
    diameter: float

    @property
    def size(self) -> int:
        return len(self.point_indices)


def make_superpoint(sp_id: int, cloud: PointCloud, indices) -> Superpoint:
    """Build a superpoint and its geometric summary from member indices."""
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    if len(indices) == 0:
        raise PartitionError(f"superpoint {sp_id} has no points")
    pos = cloud.positions[indices]
    extent = pos.max(axis=0) - pos.min(axis=0)
    indices.flags.writeable = False
    return Superpoint(
        id=sp_id,
        point_indices=indices,
        centroid=pos.mean(axis=0),
        mean_color=cloud.colors[indices].mean(axis=0),
        diameter=float(extent.max()),
    )


class SuperpointGraph:
    """
    Superpoints as nodes joined by undirected adjacency edges.

    ``edges`` holds each pair once as (i, j) with i < j, sorted;
    ``edge_attrs`` rows are [offset_x, offset_y, offset_z, log size ratio]
    measured from i to j.
    """

    def __init__(self, nodes: List[Superpoint], edges, edge_attrs):
        self.nodes = list(nodes)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.edge_attrs = np.asarray(edge_attrs, dtype=np.float64).reshape(-1, 4)
        if np.any(self.edges[:, 0] >= self.edges[:, 1]):
            raise PartitionError("edges must be stored as (i, j) with i < j")
        n = len(self.nodes)
        self._adjacency = [[] for _ in range(n)]
        for i, j in self.edges.tolist():
            self._adjacency[i].append(j)
            self._adjacency[j].append(i)
        self._adjacency = [sorted(a) for a in self._adjacency]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> List[int]:
        """Adjacent node ids in ascending order."""
        return self._adjacency[i]

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}

    def directed_edges(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Both directions of every edge as (src, dst, attrs).

        Attributes are taken from dst towards src, so the reversed direction
        carries the negated offset and log ratio.
        """
        i, j = self.edges[:, 0], self.edges[:, 1]
        src = np.concatenate([j, i])
        dst = np.concatenate([i, j])
        attrs = np.concatenate([self.edge_attrs, -self.edge_attrs], axis=0)
        return src, dst, attrs

    def is_connected(self) -> bool:
        n = self.num_nodes
        if n <= 1:
            return True
        adj = coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))
        count, _ = connected_components(adj, directed=False)
        return count == 1

    def __repr__(self) -> str:
        return f"SuperpointGraph(nodes={self.num_nodes}, edges={len(self.edges)})"


class SuperpointLabels:
    """Per-superpoint label (-1 when unsupervised) and supervision flag a_i."""

    def __init__(self, label, supervised):
        label = np.array(label, dtype=np.int64).reshape(-1)
        supervised = np.array(supervised, dtype=bool).reshape(-1)
        if len(label) != len(supervised):
            raise PartitionError("label and supervised flags differ in length")
        if np.any(supervised != (label >= 0)):
            raise PartitionError("a label must be present exactly where a_i is set")
        label.flags.writeable = False
        supervised.flags.writeable = False
        self.label = label
        self.supervised = supervised

    def __len__(self) -> int:
        return len(self.label)

    @property
    def num_supervised(self) -> int:
        return int(self.supervised.sum())


def estimate_normals(positions: np.ndarray, k: int = 10) -> np.ndarray:
    """
    Unit normals from a local plane fit over each point's k nearest neighbors.

    The sign is chosen so that z >= 0; for horizontal normals x, then y,
    breaks the tie.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    normals = np.zeros((n, 3))
    normals[:, 2] = 1.0
    if n < 3:
        return normals

    k = min(k, n)
    _, idx = cKDTree(positions).query(positions, k=k)
    neigh = positions[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum('nki,nkj->nij', centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    tol = 1e-12
    flip = np.where(np.abs(normals[:, 2]) > tol, normals[:, 2] < 0,
                    np.where(np.abs(normals[:, 0]) > tol, normals[:, 0] < 0, normals[:, 1] < 0))
    normals[flip] *= -1.0
    return normals


def _seed_order(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Point indices sorted by voxel key, then by index."""
    keys = np.floor(positions / voxel_size).astype(np.int64)
    return np.lexsort((np.arange(len(positions)), keys[:, 2], keys[:, 1], keys[:, 0]))


def _grow_regions(cloud: PointCloud, normals: np.ndarray, params: PartitionParams) -> np.ndarray:
    tree = cKDTree(cloud.positions)
    neighborhoods = tree.query_ball_point(cloud.positions, r=params.voxel_size)
    cos_tol = np.cos(np.deg2rad(params.normal_angle_tol))

    region = np.full(cloud.n, -1, dtype=np.int64)
    next_region = 0
    for seed in _seed_order(cloud.positions, params.voxel_size):
        if region[seed] >= 0:
            continue
        region[seed] = next_region
        seed_pos = cloud.positions[seed]
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            cand = np.asarray(sorted(neighborhoods[p]), dtype=np.int64)
            cand = cand[region[cand] < 0]
            if len(cand) == 0:
                continue
            ok = np.abs(normals[cand] @ normals[p]) >= cos_tol
            ok &= np.linalg.norm(cloud.colors[cand] - cloud.colors[p], axis=1) < params.color_tol
            if params.max_extent is not None:
                ok &= np.linalg.norm(cloud.positions[cand] - seed_pos, axis=1) <= params.max_extent
            for q in cand[ok]:
                region[q] = next_region
                queue.append(q)
        next_region += 1
    return region


def _merge_small_regions(cloud: PointCloud, region: np.ndarray, min_size: int,
                         color_tol: float = np.inf) -> np.ndarray:
    """
    Fold regions below ``min_size`` into the region of their nearest outside point.

    Outside points within ``color_tol`` of the member they are close to win
    over nearer points of another color.
    """
    region = region.copy()
    sizes = np.bincount(region)
    if len(sizes) <= 1:
        return region
    tree = cKDTree(cloud.positions)
    for r in range(len(sizes)):
        if sizes[r] == 0 or sizes[r] >= min_size or np.count_nonzero(sizes) <= 1:
            continue
        members = np.flatnonzero(region == r)
        k = min(cloud.n, len(members) + 16)
        best = None
        while best is None:
            dist, idx = tree.query(cloud.positions[members], k=k)
            dist = dist.reshape(len(members), -1)
            idx = idx.reshape(len(members), -1)
            outside = region[idx] != r
            if outside.any():
                similar = np.linalg.norm(cloud.colors[idx] - cloud.colors[members][:, None, :], axis=2) < color_tol
                pick = outside & similar if (outside & similar).any() else outside
                d = np.where(pick, dist, np.inf)
                flat = np.argmin(d)
                best = int(region[idx.reshape(-1)[flat]])
            elif k >= cloud.n:
                break
            else:
                k = min(cloud.n, 2 * k)
        if best is None:
            continue
        region[members] = best
        sizes[best] += sizes[r]
        sizes[r] = 0
    return region


def partition_cloud(cloud: PointCloud, params: Optional[PartitionParams] = None) -> List[Superpoint]:
    """
    Partition a cloud into disjoint superpoints covering every point.

    Superpoint ids are consecutive and ordered by each region's smallest
    point index.
    """
    params = params or PartitionParams()
    if params.voxel_size <= 0:
        raise PartitionError(f"voxel_size must be positive, got {params.voxel_size}")

    normals = estimate_normals(cloud.positions, params.normal_k)
    region = _grow_regions(cloud, normals, params)
    region = _merge_small_regions(cloud, region, params.min_sp_size, params.color_tol)

    # relabel by first member so ids are stable
    _, first = np.unique(region, return_index=True)
    order = np.argsort(first)
    old_ids = region[first[order]]
    superpoints = [make_superpoint(new_id, cloud, np.flatnonzero(region == old))
                   for new_id, old in enumerate(old_ids.tolist())]

    covered = sum(sp.size for sp in superpoints)
    if covered != cloud.n:
        raise PartitionError(f"partition covers {covered} of {cloud.n} points")
    logger.info(f"Partitioned {cloud.n} points into {len(superpoints)} superpoints")
    return superpoints


def build_graph(superpoints: List[Superpoint], k: int = 5) -> SuperpointGraph:
    """Symmetrized k-nearest-neighbor graph over superpoint centroids."""
    if len(superpoints) < 1:
        raise PartitionError("cannot build a graph without superpoints")
    if k < 1:
        raise PartitionError(f"k must be at least 1, got {k}")

    n = len(superpoints)
    centroids = np.array([sp.centroid for sp in superpoints])
    sizes = np.array([sp.size for sp in superpoints], dtype=np.float64)
    if n == 1:
        return SuperpointGraph(superpoints, np.zeros((0, 2)), np.zeros((0, 4)))

    k_eff = min(k, n - 1)
    tree = cKDTree(centroids)
    dist, idx = tree.query(centroids, k=k_eff + 1)
    pairs = set()
    for i in range(n):
        others = [d for d, j in zip(dist[i].tolist(), idx[i].tolist()) if j != i]
        # every centroid tied with the k-th distance competes, ties go to the smaller id
        ball = tree.query_ball_point(centroids[i], r=others[k_eff - 1] * (1.0 + 1e-9) + 1e-12)
        ranked = sorted((float(np.linalg.norm(centroids[j] - centroids[i])), j) for j in ball if j != i)
        for _, j in ranked[:k_eff]:
            pairs.add((min(i, j), max(i, j)))
    edges = np.array(sorted(pairs), dtype=np.int64)
    offsets = centroids[edges[:, 1]] - centroids[edges[:, 0]]
    log_ratio = np.log(sizes[edges[:, 1]] / sizes[edges[:, 0]])
    graph = SuperpointGraph(superpoints, edges, np.column_stack([offsets, log_ratio]))
    if not graph.is_connected():
        logger.warning(f"Superpoint graph with {n} nodes is not connected")
    return graph


def superpoint_labels(superpoints: List[Superpoint], cloud: PointCloud,
                      mask: SupervisionMask) -> SuperpointLabels:
    """Modal supervised class per superpoint; ties go to the smallest class id."""
    if len(mask) != cloud.n:
        raise PartitionError(f"mask length {len(mask)} does not match cloud size {cloud.n}")
    label = np.full(len(superpoints), -1, dtype=np.int64)
    for sp in superpoints:
        sup = sp.point_indices[mask.supervised[sp.point_indices]]
        if len(sup):
            label[sp.id] = int(np.argmax(np.bincount(cloud.gt_labels[sup], minlength=cloud.num_classes)))
    return SuperpointLabels(label, label >= 0)


def dump_graph(graph: SuperpointGraph, labels: Optional[SuperpointLabels] = None) -> str:
    """Text dump: ``node id size label_or_-1`` lines followed by ``edge i j`` lines."""
    lines = []
    for sp in graph.nodes:
        lbl = int(labels.label[sp.id]) if labels is not None else -1
        lines.append(f"node {sp.id} {sp.size} {lbl}")
    lines.extend(f"edge {i} {j}" for i, j in graph.edges.tolist())
    return "\n".join(lines) + "\n"


def write_graph(graph: SuperpointGraph, path: Union[str, os.PathLike],
                labels: Optional[SuperpointLabels] = None) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(dump_graph(graph, labels))
