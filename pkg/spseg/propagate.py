"""
Supervision state machine over superpoints.

Superpoints are split into supervised (S), unsupervised (U) and extended
(E) sets. Label propagation moves confident neighbors from U to E with a
pseudo label; superpoint dropout returns the extended superpoints that sit
farthest from their class center in feature space back to U.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import NoSupervisionError, ShapeError, SupervisionError
from .nnkit import Tensor
from .partition import SuperpointGraph, SuperpointLabels
from .pcio import floor_share

logger = logging.getLogger(__name__)


class PropagationParams(BaseModel):
    """Label propagation and dropout settings."""
    tau: float = Field(default=0.9, gt=0.0, lt=1.0, description="Confidence threshold for extension")
    drop_fraction: float = Field(default=0.05, ge=0.0, lt=1.0, description="Share of each class's extended set dropped")
    interval_m: int = Field(default=40, ge=1, description="Epochs between propagation invocations")

    class Config:
        extra = "forbid"


@dataclass(frozen=True)
class PropagationEvent:
    """One extension or drop; drops have source -1 and the center distance as score."""
    epoch: int
    event: str
    source: int
    target: int
    cls: int
    score: float

    def to_row(self) -> List[str]:
        return [str(self.epoch), self.event, str(self.source), str(self.target), str(self.cls), repr(float(self.score))]


EVENT_HEADER = ['epoch', 'event', 'source', 'target', 'class', 'score']


class SupervisionState:
    """
    Disjoint S/U/E sets with labels z on S and pseudo labels z_p on E.

    Instances are treated as values: operations return new states.
    """

    def __init__(self, num_superpoints: int, z: Dict[int, int], z_p: Optional[Dict[int, int]] = None):
        self.num_superpoints = int(num_superpoints)
        self.z = {int(k): int(v) for k, v in z.items()}
        self.z_p = {int(k): int(v) for k, v in (z_p or {}).items()}
        overlap = set(self.z) & set(self.z_p)
        if overlap:
            raise SupervisionError(f"superpoints {sorted(overlap)[:5]} are both supervised and extended")
        ids = set(self.z) | set(self.z_p)
        if ids and (min(ids) < 0 or max(ids) >= self.num_superpoints):
            raise SupervisionError("superpoint id out of range")

    @property
    def S(self) -> frozenset:
        return frozenset(self.z)

    @property
    def E(self) -> frozenset:
        return frozenset(self.z_p)

    @property
    def U(self) -> frozenset:
        return frozenset(range(self.num_superpoints)) - self.S - self.E

    def label_of(self, i: int) -> Optional[int]:
        """z_i on S, z_p_i on E, None on U."""
        if i in self.z:
            return self.z[i]
        return self.z_p.get(i)

    def labeled_ids(self) -> List[int]:
        """T = S union E, ascending."""
        return sorted(set(self.z) | set(self.z_p))

    def counts(self) -> Tuple[int, int, int]:
        s, e = len(self.z), len(self.z_p)
        return s, self.num_superpoints - s - e, e

    def copy(self) -> 'SupervisionState':
        return SupervisionState(self.num_superpoints, self.z, self.z_p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SupervisionState):
            return NotImplemented
        return (self.num_superpoints == other.num_superpoints and self.z == other.z
                and self.z_p == other.z_p)

    def __repr__(self) -> str:
        s, u, e = self.counts()
        return f"SupervisionState(S={s}, U={u}, E={e})"


def init_state(labels: SuperpointLabels) -> SupervisionState:
    """S from the supervised superpoints, E empty, U the rest."""
    supervised = np.flatnonzero(labels.supervised)
    if len(supervised) == 0:
        raise NoSupervisionError("no supervised superpoint to start propagation from")
    return SupervisionState(len(labels), {int(i): int(labels.label[i]) for i in supervised})


def _probs_array(probs) -> np.ndarray:
    probs = probs.values if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"class probabilities must be 2-D, got shape {probs.shape}")
    return probs


def candidate_set(i: int, state: SupervisionState, graph: SuperpointGraph, probs) -> List[int]:
    """Neighbors of i that are in U and predicted as i's label, ascending."""
    probs = _probs_array(probs)
    label = state.label_of(i)
    if label is None:
        raise SupervisionError(f"superpoint {i} is neither supervised nor extended")
    unsupervised = set(range(state.num_superpoints)) - set(state.z) - set(state.z_p)
    return [j for j in graph.neighbors(i)
            if j in unsupervised and int(np.argmax(probs[j])) == label]


def propagate_once(state: SupervisionState, graph: SuperpointGraph, probs,
                   params: Optional[PropagationParams] = None,
                   epoch: int = 0) -> Tuple[SupervisionState, List[PropagationEvent]]:
    """
    One extension sweep over a snapshot of T = S union E.

    Each source extends at most its most confident candidate, when that
    confidence reaches tau. A superpoint claimed earlier in the sweep is no
    longer a candidate, but it only acts as a source from the next sweep on.
    """
    params = params or PropagationParams()
    probs = _probs_array(probs)
    if probs.shape[0] != state.num_superpoints:
        raise ShapeError(f"{probs.shape[0]} probability rows for {state.num_superpoints} superpoints")

    unsupervised = set(range(state.num_superpoints)) - set(state.z) - set(state.z_p)
    z_p = dict(state.z_p)
    predicted = np.argmax(probs, axis=1)
    events: List[PropagationEvent] = []

    for i in state.labeled_ids():
        label = state.label_of(i)
        candidates = [j for j in graph.neighbors(i) if j in unsupervised and predicted[j] == label]
        if not candidates:
            continue
        scores = probs[candidates, label]
        best = int(np.argmax(scores))
        if scores[best] >= params.tau:
            target = candidates[best]
            z_p[target] = label
            unsupervised.discard(target)
            events.append(PropagationEvent(epoch, 'extend', i, target, label, float(scores[best])))

    new_state = SupervisionState(state.num_superpoints, state.z, z_p)
    logger.debug(f"Propagation extended {len(events)} superpoints: {new_state}")
    return new_state, events


def _features_array(features) -> np.ndarray:
    return features.values if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)


def cluster_centers(state: SupervisionState, features, num_classes: int) -> List[Optional[np.ndarray]]:
    """Mean feature of each class over S union E; None for empty classes."""
    features = _features_array(features)
    if features.shape[0] != state.num_superpoints:
        raise ShapeError(f"{features.shape[0]} feature rows for {state.num_superpoints} superpoints")
    members: List[List[int]] = [[] for _ in range(num_classes)]
    for j in state.labeled_ids():
        members[state.label_of(j)].append(j)
    return [features[m].mean(axis=0) if m else None for m in members]


def dropout_superpoints(state: SupervisionState, features, num_classes: int,
                        drop_fraction: float = 0.05,
                        epoch: int = 0) -> Tuple[SupervisionState, List[PropagationEvent]]:
    """
    Return floor(drop_fraction * |E in class|) farthest extended superpoints
    of every class to U.

    Distances are measured to the class center over S union E. Equal
    distances drop the larger id first.
    """
    features = _features_array(features)
    centers = cluster_centers(state, features, num_classes)
    z_p = dict(state.z_p)
    events: List[PropagationEvent] = []

    for cls in range(num_classes):
        extended = sorted(j for j, lbl in state.z_p.items() if lbl == cls)
        k = floor_share(drop_fraction, len(extended))
        if k == 0:
            continue
        dist = np.linalg.norm(features[extended] - centers[cls], axis=1)
        ranked = sorted(zip(dist.tolist(), extended), key=lambda pair: (-pair[0], -pair[1]))
        for d, j in ranked[:k]:
            del z_p[j]
            events.append(PropagationEvent(epoch, 'drop', -1, j, cls, d))

    new_state = SupervisionState(state.num_superpoints, state.z, z_p)
    logger.debug(f"Dropout removed {len(events)} superpoints: {new_state}")
    return new_state, events


def write_events_csv(events: Iterable[PropagationEvent], path: Union[str, os.PathLike]) -> int:
    """Write ``epoch,event,source,target,class,score`` rows; returns the row count."""
    count = 0
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(EVENT_HEADER)
        for event in events:
            writer.writerow(event.to_row())
            count += 1
    return count
