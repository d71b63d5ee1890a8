"""
Coupled attention between supervised and extended superpoints.

Supervised superpoints first attend over the extended ones (forward
attention), then every extended superpoint attends over the resulting
supervised features (reverse attention). Weights are normalized per
channel. Both directions feed an auxiliary classification loss; nothing
here runs at prediction time.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .embed import SegHead
from .errors import AttentionInactiveError, ShapeError
from .nnkit import (Mlp, Parameter, Tensor, concat, cross_entropy, mul, reduce_sum, reshape,
                    softmax, sub, take_rows)
from .propagate import SupervisionState

logger = logging.getLogger(__name__)


class AttnParams:
    """phi/alpha/psi/beta MLPs (D -> D -> D) and the two auxiliary heads."""

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator):
        dims = [embed_dim, embed_dim, embed_dim]
        self.embed_dim = embed_dim
        self.phi = Mlp('attn.phi', dims, rng)
        self.alpha = Mlp('attn.alpha', dims, rng)
        self.psi = Mlp('attn.psi', dims, rng)
        self.beta = Mlp('attn.beta', dims, rng)
        self.head_es = SegHead(embed_dim, num_classes, rng, prefix='attn.head_es')
        self.head_ese = SegHead(embed_dim, num_classes, rng, prefix='attn.head_ese')

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for module in (self.phi, self.alpha, self.psi, self.beta, self.head_es, self.head_ese):
            params.extend(module.parameters())
        return params


@dataclass
class AttnOutputs:
    X_s: Tensor      # [|S|, D]
    Y_e: Tensor      # [|E|, D]
    W_es: Tensor     # [|S|, |E|, D], sums to 1 over axis 1
    W_ese: Tensor    # [|S|, |E|, D], sums to 1 over axis 0


def _check_sets(h_S: Tensor, h_E: Tensor, who: str) -> Tuple[int, int, int]:
    if h_S.ndim != 2 or h_E.ndim != 2 or h_S.shape[1] != h_E.shape[1]:
        raise ShapeError(f"{who}: set features {h_S.shape} and {h_E.shape} do not conform")
    if h_S.shape[0] == 0:
        raise AttentionInactiveError(f"{who}: supervised set is empty")
    if h_E.shape[0] == 0:
        raise AttentionInactiveError(f"{who}: extended set is empty")
    return h_S.shape[0], h_E.shape[0], h_S.shape[1]


def _pairwise_mlp(mlp: Mlp, diff: Tensor) -> Tensor:
    """Apply ``mlp`` to every [P, Q, D] difference vector."""
    p, q, d = diff.shape
    out = mlp(reshape(diff, (p * q, d)))
    return reshape(out, (p, q, out.shape[1]))


def forward_attention(h_S: Tensor, h_E: Tensor, params: AttnParams) -> Tuple[Tensor, Tensor]:
    """
    X_s[i] = sum_j W_es[i, j] * alpha(h_j), with W_es[i, :, l] the softmax
    over j of phi(h_i - h_j)[l].
    """
    s, e, d = _check_sets(h_S, h_E, 'forward_attention')
    diff = sub(reshape(h_S, (s, 1, d)), reshape(h_E, (1, e, d)))
    W_es = softmax(_pairwise_mlp(params.phi, diff), axis=1)
    values = reshape(params.alpha(h_E), (1, e, d))
    X_s = reduce_sum(mul(W_es, values), axis=1)
    return X_s, W_es


def reverse_attention(h_E: Tensor, X_s: Tensor, params: AttnParams) -> Tuple[Tensor, Tensor]:
    """
    Y_e[j] = sum_i W_ese[i, j] * beta(X_s[i]), with W_ese[:, j, l] the
    softmax over i of psi(h_j - X_s[i])[l].
    """
    s, e, d = _check_sets(X_s, h_E, 'reverse_attention')
    diff = sub(reshape(h_E, (1, e, d)), reshape(X_s, (s, 1, d)))
    W_ese = softmax(_pairwise_mlp(params.psi, diff), axis=0)
    values = reshape(params.beta(X_s), (s, 1, d))
    Y_e = reduce_sum(mul(W_ese, values), axis=0)
    return Y_e, W_ese


def loss_es(X_s: Tensor, z, head_es: SegHead) -> Tensor:
    """Mean cross-entropy of the supervised labels against head_es(X_s)."""
    z = np.asarray(z, dtype=np.int64).reshape(-1)
    if X_s.shape[0] != len(z) or len(z) == 0:
        raise ShapeError(f"loss_es: {X_s.shape[0]} rows for {len(z)} labels")
    return cross_entropy(head_es(X_s), z)


def loss_ese(Y_e: Tensor, z_p, head_ese: SegHead) -> Tensor:
    """Mean cross-entropy of the pseudo labels against head_ese(Y_e)."""
    z_p = np.asarray(z_p, dtype=np.int64).reshape(-1)
    if Y_e.shape[0] != len(z_p) or len(z_p) == 0:
        raise ShapeError(f"loss_ese: {Y_e.shape[0]} rows for {len(z_p)} pseudo labels")
    return cross_entropy(head_ese(Y_e), z_p)


@dataclass
class GatheredSets:
    """
    Supervised and extended rows of a whole batch.

    ``prov_S`` and ``prov_E`` are [rows, 2] arrays of (batch position,
    superpoint id), in batch order then ascending id.
    """
    h_S: Tensor
    h_E: Optional[Tensor]
    z: np.ndarray
    z_p: np.ndarray
    prov_S: np.ndarray
    prov_E: np.ndarray
    sizes: Tuple[int, ...]

    @property
    def active(self) -> bool:
        return self.h_E is not None and len(self.z_p) > 0


def _gather(items, pick) -> Tuple[Optional[Tensor], np.ndarray, np.ndarray]:
    rows, labels, prov = [], [], []
    for b, (state, h) in enumerate(items):
        chosen = pick(state)
        if not chosen:
            continue
        ids = sorted(chosen)
        rows.append(take_rows(h, ids))
        labels.extend(state.label_of(i) for i in ids)
        prov.extend((b, i) for i in ids)
    tensor = None
    if rows:
        tensor = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return (tensor, np.array(labels, dtype=np.int64),
            np.array(prov, dtype=np.int64).reshape(-1, 2))


def gather_batch_sets(items: Sequence[Tuple[SupervisionState, Tensor]]) -> GatheredSets:
    """Concatenate S and E rows of every (state, embeddings) batch item."""
    items = list(items)
    if not items:
        raise ShapeError("gather_batch_sets needs at least one batch item")
    for state, h in items:
        if h.shape[0] != state.num_superpoints:
            raise ShapeError(f"{h.shape[0]} embedding rows for {state.num_superpoints} superpoints")
    h_S, z, prov_S = _gather(items, lambda st: st.z)
    h_E, z_p, prov_E = _gather(items, lambda st: st.z_p)
    if h_S is None:
        raise AttentionInactiveError("no supervised superpoint in the batch")
    sizes = tuple(state.num_superpoints for state, _ in items)
    return GatheredSets(h_S, h_E, z, z_p, prov_S, prov_E, sizes)


def scatter_sets(rows: np.ndarray, provenance: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """
    Inverse of gathering: place each row back at its (batch position,
    superpoint id). Rows not covered by ``provenance`` are NaN.
    """
    rows = np.asarray(rows, dtype=np.float64)
    provenance = np.asarray(provenance, dtype=np.int64).reshape(-1, 2)
    if len(rows) != len(provenance):
        raise ShapeError(f"scatter_sets: {len(rows)} rows for {len(provenance)} provenance entries")
    tail = rows.shape[1:]
    out = [np.full((n,) + tail, np.nan) for n in sizes]
    for row, (b, i) in zip(rows, provenance.tolist()):
        out[b][i] = row
    return out


@dataclass
class AttentionResult:
    outputs: AttnOutputs
    L_es: Tensor
    L_ese: Tensor


class CoupledAttention:
    """Forward and reverse attention plus both losses over a gathered batch."""

    def __init__(self, params: AttnParams):
        self.params = params

    def __call__(self, sets: GatheredSets) -> AttentionResult:
        if not sets.active:
            raise AttentionInactiveError("extended set is empty")
        X_s, W_es = forward_attention(sets.h_S, sets.h_E, self.params)
        Y_e, W_ese = reverse_attention(sets.h_E, X_s, self.params)
        result = AttentionResult(
            outputs=AttnOutputs(X_s, Y_e, W_es, W_ese),
            L_es=loss_es(X_s, sets.z, self.params.head_es),
            L_ese=loss_ese(Y_e, sets.z_p, self.params.head_ese),
        )
        logger.debug(f"Coupled attention over |S|={len(sets.z)} |E|={len(sets.z_p)}: "
                     f"L_es={result.L_es.item():.4f} L_ese={result.L_ese.item():.4f}")
        return result

    def parameters(self) -> List[Parameter]:
        return self.params.parameters()
