"""
Training loop, prediction, metrics and run instrumentation.

An epoch encodes every scene, applies the segmentation loss on supervised
superpoints and, once extended superpoints exist, the coupled attention
losses over each batch. Every ``interval_m`` epochs the supervision state
of each scene is grown by label propagation and pruned by dropout.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .attention import AttnParams, CoupledAttention, gather_batch_sets
from .embed import (EncoderParams, GnnParams, SegHead, encode_point_features, gnn_forward,
                    loss_s, point_features, predicted_classes, seg_logits)
from .errors import CheckpointError, ConfigError, NoSupervisionError, ShapeError
from .nnkit import Adam, ParamSet, Tensor, add, load_checkpoint, read_checkpoint, save_checkpoint, scale, softmax
from .partition import (PartitionParams, Superpoint, SuperpointGraph, SuperpointLabels, build_graph,
                        partition_cloud, superpoint_labels)
from .pcio import PointCloud, SupervisionMask
from .propagate import (PropagationEvent, PropagationParams, SupervisionState, dropout_superpoints,
                        init_state, propagate_once)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

RUN_LOG_HEADER = ['epoch', 'L_s', 'L_es', 'L_ese', 'L_final', '|S|', '|E|', '|U|',
                  'OA', 'mIoU', 'mAcc', 'OA_es']
SET_SIZE_HEADER = ['epoch', 'S', 'E', 'U', 'pct_S', 'pct_E', 'pct_U']
ABLATION_VARIANTS = ('baseline', 'propagation', 'full', 'no_dropout')


class TrainConfig(BaseModel):
    """Training hyper-parameters and component switches."""
    epochs: int = Field(default=400, ge=1, description="Number of training epochs")
    lr: float = Field(default=0.01, gt=0.0, description="Adam learning rate")
    batch_size: int = Field(default=4, ge=1, description="Scenes per optimizer step")
    lambda1: float = Field(default=1.0, ge=0.0, description="Weight of the supervised attention loss")
    lambda2: float = Field(default=1.0, ge=0.0, description="Weight of the extended attention loss")
    tau: float = Field(default=0.9, gt=0.0, lt=1.0, description="Propagation confidence threshold")
    drop_fraction: float = Field(default=0.05, ge=0.0, lt=1.0, description="Per-class share of extended superpoints dropped")
    interval_m: int = Field(default=40, ge=1, description="Epochs between propagation invocations")
    embed_dim: int = Field(default=32, ge=2, description="Superpoint embedding width D")
    hidden_dim: int = Field(default=32, ge=1, description="Hidden width of the point encoder")
    t_steps: int = Field(default=3, ge=1, description="Message passing steps")
    seed: int = Field(default=0, ge=0, description="Seed for initialization and batch order")
    use_propagation: bool = Field(default=True, description="Run label propagation every interval_m epochs")
    use_dropout: bool = Field(default=True, description="Run superpoint dropout after each propagation")
    use_attention: bool = Field(default=True, description="Add the coupled attention losses")
    log_every: int = Field(default=20, ge=0, description="Epochs between INFO progress lines, 0 for none")

    class Config:
        extra = "forbid"

    def propagation_params(self) -> PropagationParams:
        return PropagationParams(tau=self.tau, drop_fraction=self.drop_fraction, interval_m=self.interval_m)


class ModelParams:
    """Encoder, GNN, segmentation head and attention parameters built from one seed."""

    def __init__(self, num_classes: int, embed_dim: int = 32, hidden_dim: int = 32,
                 t_steps: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.t_steps = t_steps
        self.encoder = EncoderParams(hidden_dim, embed_dim, rng)
        self.gnn = GnnParams(embed_dim, t_steps, rng)
        self.head = SegHead(embed_dim, num_classes, rng)
        self.attn = AttnParams(embed_dim, num_classes, rng)
        self.params = ParamSet(self.encoder.parameters() + self.gnn.parameters()
                               + self.head.parameters() + self.attn.parameters())

    @classmethod
    def from_config(cls, num_classes: int, config: TrainConfig) -> 'ModelParams':
        return cls(num_classes, config.embed_dim, config.hidden_dim, config.t_steps, config.seed)

    def meta(self) -> Dict[str, int]:
        return {'num_classes': self.num_classes, 'embed_dim': self.embed_dim,
                'hidden_dim': self.hidden_dim, 't_steps': self.t_steps}


@dataclass
class Scene:
    """A cloud with its partition, graph, superpoint labels and cached encoder inputs."""
    cloud: PointCloud
    mask: SupervisionMask
    superpoints: List[Superpoint]
    graph: SuperpointGraph
    labels: SuperpointLabels
    feats: np.ndarray
    seg: np.ndarray
    name: str = ''

    @property
    def num_superpoints(self) -> int:
        return len(self.superpoints)


def build_scene(cloud: PointCloud, mask: SupervisionMask, params: Optional[PartitionParams] = None,
                k_neighbors: int = 5, name: str = '') -> Scene:
    superpoints = partition_cloud(cloud, params)
    graph = build_graph(superpoints, k_neighbors)
    labels = superpoint_labels(superpoints, cloud, mask)
    feats, seg = point_features(cloud, superpoints)
    logger.info(f"Scene {name or '?'}: {len(superpoints)} superpoints, {len(graph.edges)} edges, "
                f"{labels.num_supervised} supervised")
    return Scene(cloud, mask, superpoints, graph, labels, feats, seg, name)


def embed_scene(scene: Scene, model: ModelParams) -> Tuple[Tensor, Tensor]:
    """GNN embeddings h and segmentation logits of every superpoint."""
    features = encode_point_features(scene.feats, scene.seg, scene.num_superpoints, model.encoder)
    h = gnn_forward(scene.graph, features, model.gnn)
    return h, seg_logits(h, model.head)


def broadcast_to_points(sp_classes: np.ndarray, superpoints: Sequence[Superpoint], num_points: int) -> np.ndarray:
    out = np.full(num_points, -1, dtype=np.int64)
    for sp in superpoints:
        out[sp.point_indices] = sp_classes[sp.id]
    return out


def predict(cloud: PointCloud, superpoints: List[Superpoint], graph: SuperpointGraph,
            model: ModelParams) -> np.ndarray:
    """Per-point classes from the segmentation head only."""
    feats, seg = point_features(cloud, superpoints)
    features = encode_point_features(feats, seg, len(superpoints), model.encoder)
    logits = seg_logits(gnn_forward(graph, features, model.gnn), model.head)
    return broadcast_to_points(predicted_classes(logits), superpoints, cloud.n)


@dataclass
class Metrics:
    oa: float
    miou: float
    macc: float
    per_class_iou: np.ndarray
    oa_es: Optional[float] = None

    def as_rows(self) -> List[Tuple[str, float]]:
        rows = [('OA', self.oa), ('mIoU', self.miou), ('mAcc', self.macc)]
        rows.extend((f"IoU_{k}", float(v)) for k, v in enumerate(self.per_class_iou))
        if self.oa_es is not None:
            rows.append(('OA_es', self.oa_es))
        return rows


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    for name, arr in (('prediction', pred), ('ground truth', gt)):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
            raise ShapeError(f"{name} class out of range [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def evaluate(pred, gt, num_classes: int) -> Metrics:
    """
    Point-level OA, mIoU and mAcc.

    Class means run over classes present in the ground truth; the IoU of an
    absent class is NaN.
    """
    cm = confusion_matrix(pred, gt, num_classes).astype(np.float64)
    total = cm.sum()
    if total == 0:
        raise ShapeError("cannot evaluate an empty prediction")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0

    iou = np.full(num_classes, np.nan)
    iou[present] = tp[present] / (support[present] + predicted[present] - tp[present])
    recall = tp[present] / support[present]
    return Metrics(
        oa=float(tp.sum() / total),
        miou=float(np.mean(iou[present])),
        macc=float(np.mean(recall)),
        per_class_iou=iou,
    )


def _extended_counts(state: SupervisionState, superpoints: Sequence[Superpoint], gt) -> Tuple[int, int]:
    gt = np.asarray(gt)
    hits = total = 0
    for j, pseudo in state.z_p.items():
        members = superpoints[j].point_indices
        hits += int(np.sum(gt[members] == pseudo))
        total += len(members)
    return hits, total


def oa_extended(state: SupervisionState, superpoints: Sequence[Superpoint], gt) -> Optional[float]:
    """Share of points inside extended superpoints whose ground truth matches the pseudo label."""
    hits, total = _extended_counts(state, superpoints, gt)
    return hits / total if total else None


@dataclass
class EpochRecord:
    epoch: int
    L_s: float
    L_es: float
    L_ese: float
    L_final: float
    num_S: int
    num_E: int
    num_U: int
    oa: float
    miou: float
    macc: float
    oa_es: Optional[float]

    def to_row(self) -> List[str]:
        values = [self.L_s, self.L_es, self.L_ese, self.L_final]
        row = [str(self.epoch)] + [repr(float(v)) for v in values]
        row += [str(self.num_S), str(self.num_E), str(self.num_U)]
        row += [repr(float(v)) for v in (self.oa, self.miou, self.macc)]
        row.append('' if self.oa_es is None else repr(float(self.oa_es)))
        return row


@dataclass
class RunLog:
    config: TrainConfig
    records: List[EpochRecord] = field(default_factory=list)
    events: List[PropagationEvent] = field(default_factory=list)
    states: List[SupervisionState] = field(default_factory=list)

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


def _usable_scenes(scenes: Sequence[Scene]) -> List[Scene]:
    usable = []
    for k, scene in enumerate(scenes):
        if scene.labels.num_supervised == 0:
            logger.warning(f"Skipping scene {scene.name or k}: no supervised superpoint")
            continue
        usable.append(scene)
    if not usable:
        raise NoSupervisionError("no scene has a supervised superpoint")
    return usable


def _propagation_round(scenes: Sequence[Scene], states: List[SupervisionState], model: ModelParams,
                       config: TrainConfig, epoch: int) -> List[PropagationEvent]:
    params = config.propagation_params()
    events: List[PropagationEvent] = []
    for k, scene in enumerate(scenes):
        h, logits = embed_scene(scene, model)
        probs = softmax(logits.detach(), axis=1)
        states[k], extended = propagate_once(states[k], scene.graph, probs, params, epoch)
        events.extend(extended)
        if config.use_dropout:
            states[k], dropped = dropout_superpoints(states[k], h.values, model.num_classes,
                                                     params.drop_fraction, epoch)
            events.extend(dropped)
    return events


def train(scenes: Sequence[Scene], config: Optional[TrainConfig] = None,
          model: Optional[ModelParams] = None) -> Tuple[ModelParams, RunLog]:
    """
    Train on ``scenes`` and return the parameters with the per-epoch log.

    Epochs are numbered from 0. Propagation and dropout run at the start
    of every epoch e > 0 with e % interval_m == 0. Epoch metrics come from
    the forward pass of that epoch, before the optimizer step.
    """
    config = config or TrainConfig()
    scenes = _usable_scenes(scenes)
    num_classes = max(scene.cloud.num_classes for scene in scenes)
    model = model or ModelParams.from_config(num_classes, config)
    optimizer = Adam(model.params, lr=config.lr)
    attention = CoupledAttention(model.attn)
    states = [init_state(scene.labels) for scene in scenes]
    shuffle_rng = np.random.default_rng(config.seed)
    gt = np.concatenate([scene.cloud.gt_labels for scene in scenes])
    total_sp = sum(scene.num_superpoints for scene in scenes)
    log = RunLog(config)

    logger.info(f"Training on {len(scenes)} scenes, {total_sp} superpoints, {len(model.params)} parameters")
    for epoch in range(config.epochs):
        if config.use_propagation and epoch > 0 and epoch % config.interval_m == 0:
            events = _propagation_round(scenes, states, model, config, epoch)
            log.events.extend(events)
            logger.debug(f"Epoch {epoch}: {len(events)} propagation events")

        order = shuffle_rng.permutation(len(scenes))
        sp_preds: List[Optional[np.ndarray]] = [None] * len(scenes)
        batch_losses = []
        for start in range(0, len(scenes), config.batch_size):
            batch = sorted(order[start:start + config.batch_size].tolist())
            optimizer.zero_grad()
            items, terms = [], []
            for k in batch:
                h, logits = embed_scene(scenes[k], model)
                sp_preds[k] = predicted_classes(logits)
                terms.append(loss_s(logits, scenes[k].labels))
                items.append((states[k], h))
            L_s = terms[0]
            for term in terms[1:]:
                L_s = add(L_s, term)
            L_s = scale(L_s, 1.0 / len(terms))

            total, l_es, l_ese = L_s, 0.0, 0.0
            if config.use_attention:
                sets = gather_batch_sets(items)
                if sets.active:
                    result = attention(sets)
                    total = add(add(L_s, scale(result.L_es, config.lambda1)), scale(result.L_ese, config.lambda2))
                    l_es, l_ese = result.L_es.item(), result.L_ese.item()
            total.backward()
            optimizer.step()
            batch_losses.append((L_s.item(), l_es, l_ese, total.item()))

        point_pred = np.concatenate([broadcast_to_points(sp_preds[k], scene.superpoints, scene.cloud.n)
                                     for k, scene in enumerate(scenes)])
        metrics = evaluate(point_pred, gt, num_classes)
        hits = ext_total = 0
        for scene, state in zip(scenes, states):
            h_k, t_k = _extended_counts(state, scene.superpoints, scene.cloud.gt_labels)
            hits, ext_total = hits + h_k, ext_total + t_k
        s_count = sum(len(st.z) for st in states)
        e_count = sum(len(st.z_p) for st in states)
        means = np.mean(np.array(batch_losses), axis=0)
        record = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), float(means[3]),
                             s_count, e_count, total_sp - s_count - e_count,
                             metrics.oa, metrics.miou, metrics.macc,
                             hits / ext_total if ext_total else None)
        log.records.append(record)
        if config.log_every and (epoch % config.log_every == 0 or epoch == config.epochs - 1):
            logger.info(f"Epoch {epoch}: L_final={record.L_final:.4f} L_s={record.L_s:.4f} "
                        f"|S|={s_count} |E|={e_count} OA={metrics.oa:.3f} mIoU={metrics.miou:.3f}")

    log.states = states
    return model, log


def evaluate_scenes(scenes: Sequence[Scene], model: ModelParams,
                    states: Optional[Sequence[SupervisionState]] = None) -> Metrics:
    """Pooled point-level metrics of ``predict`` over several scenes."""
    preds = [predict(s.cloud, s.superpoints, s.graph, model) for s in scenes]
    gt = np.concatenate([s.cloud.gt_labels for s in scenes])
    metrics = evaluate(np.concatenate(preds), gt, model.num_classes)
    if states is not None:
        hits = total = 0
        for scene, state in zip(scenes, states):
            h_k, t_k = _extended_counts(state, scene.superpoints, scene.cloud.gt_labels)
            hits, total = hits + h_k, total + t_k
        metrics.oa_es = hits / total if total else None
    return metrics


@dataclass
class AblationRow:
    seed: int
    variant: str
    miou: float
    macc: float
    oa: float


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    """Component switches for one ablation variant."""
    switches = {
        'baseline': dict(use_propagation=False, use_dropout=False, use_attention=False),
        'propagation': dict(use_propagation=True, use_dropout=True, use_attention=False),
        'full': dict(use_propagation=True, use_dropout=True, use_attention=True),
        'no_dropout': dict(use_propagation=True, use_dropout=False, use_attention=True),
    }
    if variant not in switches:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return config.model_copy(update=switches[variant])


def run_ablation(train_scenes: Sequence[Scene], test_scenes: Sequence[Scene], config: TrainConfig,
                 seeds: Sequence[int], variants: Sequence[str] = ABLATION_VARIANTS) -> List[AblationRow]:
    """Train every variant once per seed and score it on the held-out scenes."""
    rows = []
    for seed in seeds:
        for variant in variants:
            cfg = variant_config(config, variant).model_copy(update={'seed': int(seed)})
            model, _ = train(train_scenes, cfg)
            m = evaluate_scenes(test_scenes, model)
            logger.info(f"Ablation seed={seed} {variant}: mIoU={m.miou:.3f} mAcc={m.macc:.3f} OA={m.oa:.3f}")
            rows.append(AblationRow(int(seed), variant, m.miou, m.macc, m.oa))
    return rows


def _header_lines(header: Optional[Mapping[str, object]]) -> List[str]:
    return [f"#{key}={value}\n" for key, value in (header or {}).items()]


def write_run_log(log: RunLog, path: PathLike, header: Optional[Mapping[str, object]] = None) -> None:
    """Per-epoch CSV; ``header`` entries are written first as ``#key=value`` lines."""
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        handle.writelines(_header_lines(header))
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(RUN_LOG_HEADER)
        for record in log.records:
            writer.writerow(record.to_row())


def set_size_rows(log: RunLog) -> List[List[str]]:
    rows = []
    for r in log.records:
        total = r.num_S + r.num_E + r.num_U
        pct = [100.0 * v / total for v in (r.num_S, r.num_E, r.num_U)]
        rows.append([str(r.epoch), str(r.num_S), str(r.num_E), str(r.num_U)] + [f"{p:.4f}" for p in pct])
    return rows


def write_set_sizes_csv(log: RunLog, path: PathLike) -> None:
    """Growth curves: set sizes and their share of all superpoints per epoch."""
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(SET_SIZE_HEADER)
        writer.writerows(set_size_rows(log))


def write_metrics_csv(metrics: Metrics, path: PathLike) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['metric', 'value'])
        for name, value in metrics.as_rows():
            writer.writerow([name, '' if math.isnan(value) else repr(float(value))])


def write_ablation_csv(rows: Sequence[AblationRow], path: PathLike) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['seed', 'variant', 'mIoU', 'mAcc', 'OA'])
        for row in rows:
            writer.writerow([row.seed, row.variant, repr(row.miou), repr(row.macc), repr(row.oa)])


def save_model(model: ModelParams, path: PathLike, extra: Optional[Mapping[str, object]] = None) -> None:
    meta = dict(model.meta())
    meta.update(extra or {})
    save_checkpoint(model.params, path, meta)
    logger.info(f"Saved {len(model.params)} parameters to {path}")


def load_model(path: PathLike) -> ModelParams:
    """Rebuild a model from the dimensions in a checkpoint header and load its values."""
    meta, _ = read_checkpoint(path)
    try:
        model = ModelParams(int(meta['num_classes']), int(meta['embed_dim']),
                            int(meta['hidden_dim']), int(meta['t_steps']))
    except (KeyError, ValueError):
        raise CheckpointError(f"{path}: checkpoint header lacks model dimensions")
    load_checkpoint(model.params, path)
    return model
