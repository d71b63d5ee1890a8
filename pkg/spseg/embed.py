"""
Superpoint graph embedding: per-point encoder with max pooling, gated GNN
refinement over the superpoint graph, segmentation head and the masked
segmentation loss.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np

from .errors import NoSupervisionError, PartitionError, ShapeError
from .nnkit import (GRU_KEYS, Mlp, Parameter, Tensor, concat, cross_entropy, gru_cell,
                    init_uniform, relu, segment_max, segment_sum, take_rows)
from .partition import Superpoint, SuperpointGraph, SuperpointLabels
from .pcio import PointCloud

logger = logging.getLogger(__name__)

POINT_FEATURES = 7   # centered xyz, rgb, diameter
EDGE_FEATURES = 4    # centroid offset, log size ratio
SCALE_EPS = 1e-6


class EncoderParams:
    """Per-point MLP (7 -> hidden -> D) shared by all superpoints."""

    def __init__(self, hidden_dim: int, embed_dim: int, rng: np.random.Generator):
        if embed_dim < 2:
            raise ShapeError(f"embedding width must be at least 2, got {embed_dim}")
        self.embed_dim = embed_dim
        self.mlp = Mlp('enc', [POINT_FEATURES, hidden_dim, embed_dim], rng)

    def parameters(self) -> List[Parameter]:
        return self.mlp.parameters()


class GnnParams:
    """Edge-conditioned message layer plus the GRU update, applied ``t_steps`` times."""

    def __init__(self, embed_dim: int, t_steps: int, rng: np.random.Generator):
        if t_steps < 1:
            raise ShapeError(f"t_steps must be at least 1, got {t_steps}")
        self.t_steps = t_steps
        self.message = Mlp('gnn.msg', [embed_dim + EDGE_FEATURES, embed_dim], rng)
        self.gru: Dict[str, Parameter] = {}
        for key in GRU_KEYS:
            shape = (embed_dim,) if key.startswith('b_') else (embed_dim, embed_dim)
            self.gru[key] = Parameter(f"gnn.gru.{key}", init_uniform(rng, shape, embed_dim))

    def parameters(self) -> List[Parameter]:
        return self.message.parameters() + list(self.gru.values())


class SegHead:
    """Single linear layer D -> c."""

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator, prefix: str = 'head'):
        self.linear = Mlp(prefix, [embed_dim, num_classes], rng)

    @property
    def weight(self) -> Parameter:
        return self.linear.layers[0][0]

    @property
    def bias(self) -> Parameter:
        return self.linear.layers[0][1]

    def __call__(self, h: Tensor) -> Tensor:
        return self.linear(h)

    def parameters(self) -> List[Parameter]:
        return self.linear.parameters()


def point_features(cloud: PointCloud, superpoints: List[Superpoint]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Encoder inputs for every member point and the owning superpoint id.

    Each row is ((xyz - centroid) / max(diameter, eps), rgb, diameter).
    """
    feats, seg = [], []
    for sp in superpoints:
        if sp.size == 0:
            raise PartitionError(f"superpoint {sp.id} is empty")
        pos = cloud.positions[sp.point_indices]
        scaled = (pos - sp.centroid) / max(sp.diameter, SCALE_EPS)
        diam = np.full((sp.size, 1), sp.diameter)
        feats.append(np.hstack([scaled, cloud.colors[sp.point_indices], diam]))
        seg.append(np.full(sp.size, sp.id, dtype=np.int64))
    return np.vstack(feats), np.concatenate(seg)


def encode_point_features(feats: np.ndarray, seg: np.ndarray, num_superpoints: int,
                          params: EncoderParams) -> Tensor:
    """Per-point MLP followed by a channel-wise max inside each superpoint."""
    per_point = params.mlp(Tensor(feats))
    return segment_max(per_point, seg, num_superpoints)


def encode_superpoints(cloud: PointCloud, superpoints: List[Superpoint], params: EncoderParams) -> Tensor:
    feats, seg = point_features(cloud, superpoints)
    return encode_point_features(feats, seg, len(superpoints), params)


def gnn_forward(graph: SuperpointGraph, features: Tensor, params: GnnParams) -> Tensor:
    """
    Refine node features by gated message passing.

    Node i receives sum_j relu(W [h_j, e_ij] + b) over its neighbors j and is
    updated with the GRU cell; isolated nodes receive a zero message.
    """
    n = graph.num_nodes
    if features.ndim != 2 or features.shape[0] != n:
        raise ShapeError(f"gnn_forward: features {features.shape} for {n} nodes")

    src, dst, attrs = graph.directed_edges()
    edge_input = Tensor(attrs)
    h = features
    for _ in range(params.t_steps):
        if len(src):
            msg = relu(params.message(concat([take_rows(h, src), edge_input], axis=1)))
            agg = segment_sum(msg, dst, n)
        else:
            agg = Tensor(np.zeros(h.shape))
        h = gru_cell(h, agg, params.gru)
    return h


def seg_logits(h: Tensor, head: SegHead) -> Tensor:
    return head(h)


def predicted_classes(logits: Tensor) -> np.ndarray:
    """Argmax per row; ties resolve to the smallest class id."""
    return np.argmax(logits.values, axis=1)


def loss_s(logits: Tensor, labels: SuperpointLabels) -> Tensor:
    """Cross-entropy averaged over supervised superpoints only."""
    if logits.shape[0] != len(labels):
        raise ShapeError(f"loss_s: {logits.shape[0]} logit rows for {len(labels)} superpoints")
    supervised = np.flatnonzero(labels.supervised)
    if len(supervised) == 0:
        raise NoSupervisionError("loss_s needs at least one supervised superpoint")
    return cross_entropy(take_rows(logits, supervised), labels.label[supervised])
