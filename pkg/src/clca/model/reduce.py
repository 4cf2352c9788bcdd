"""Attention-guided token reducers.

A reducer takes the sequence leaving the attention sub-layer together with the
head-averaged CLS attention row ``a0`` and returns a shorter sequence. Only
LOCAL, FUSED and RECOVERED tokens compete for a place; CLS and CLR always
survive. Ranking is a hard index selection, so gradients reach ``a0`` only
through the fusion weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, topk_stable
from .config import keep_count
from .sequence import Role, TokenSequence


@dataclass
class Reduction:
    seq: TokenSequence
    kept: np.ndarray  # [B, k] indices into the reducible span, ascending per row
    uniform_fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def select_tokens(seq: TokenSequence, a0: Tensor, keep_rate: float) -> np.ndarray:
    """Per-sample top-k of the CLS attention over the reducible span."""
    span = seq.reducible
    k = keep_count(seq.num_reducible, keep_rate)
    scores = a0.data[:, span]
    return np.stack([topk_stable(row, k) for row in scores])


def _complement(kept: np.ndarray, n: int) -> np.ndarray:
    mask = np.ones((kept.shape[0], n), dtype=bool)
    np.put_along_axis(mask, kept, False, axis=1)
    return np.stack([np.flatnonzero(row) for row in mask])


def _gather_meta(seq: TokenSequence, kept_pos: np.ndarray):
    rows = np.arange(seq.batch)[:, None]
    return seq.roles[rows, kept_pos], seq.origin[rows, kept_pos]


def _assemble(seq, kept_pos, middle, middle_roles, middle_origin):
    """Stack ``[CLS, kept..., middle..., CLR?]`` for data and metadata."""
    b, t, _ = seq.data.shape
    index = np.concatenate([np.zeros((b, 1), dtype=np.int64), kept_pos], axis=1)
    parts = [ad.gather_rows(seq.data, index)] + middle
    roles_k, origin_k = _gather_meta(seq, kept_pos)
    roles = [seq.roles[:, :1], roles_k] + middle_roles
    origin = [seq.origin[:, :1], origin_k] + middle_origin
    if seq.has_clr:
        parts.append(ad.slice_axis(seq.data, 1, t - 1, t))
        roles.append(seq.roles[:, -1:])
        origin.append(seq.origin[:, -1:])
    return TokenSequence(
        ad.concat(parts, axis=1),
        np.concatenate(roles, axis=1),
        np.concatenate(origin, axis=1),
        seq.has_clr,
    )


def evit_reduce(
    seq: TokenSequence,
    a0: Tensor,
    keep_rate: float,
    block: int = 0,
    kept: np.ndarray | None = None,
) -> Reduction:
    """Keep the top-k attended tokens and fuse the rest into one token.

    The fused token is the attention-weighted mean of the pruned tokens,
    ``sum_i a0_i x_i / sum_j a0_j`` over the pruned set. If every pruned
    weight of a sample is zero (softmax underflow) that sample falls back to
    a plain mean and is flagged.
    """
    n = seq.num_reducible
    if kept is None:
        kept = select_tokens(seq, a0, keep_rate)
    k = kept.shape[1]
    if k == n:
        return Reduction(seq, kept, np.zeros(seq.batch, dtype=bool))
    b, _, d = seq.data.shape
    pruned = _complement(kept, n)
    m = n - k
    offset = seq.reducible.start
    pruned_pos = pruned + offset

    w = ad.gather_rows(a0, pruned_pos)  # [B, m]
    fallback = w.data.sum(axis=1) <= 0.0
    if fallback.any():
        w = ad.add(w, Tensor(np.repeat(fallback[:, None], m, axis=1).astype(w.dtype)))
    total = ad.sum(w, axis=1, keepdims=True)
    weights = ad.div(w, ad.broadcast_to(total, (b, m)))
    fused = ad.matmul(ad.reshape(weights, (b, 1, m)), ad.gather_rows(seq.data, pruned_pos))

    out = _assemble(
        seq,
        kept + offset,
        [fused],
        [np.full((b, 1), Role.FUSED, dtype=seq.roles.dtype)],
        [np.full((b, 1), block, dtype=seq.origin.dtype)],
    )
    return Reduction(out, kept, fallback)


def static_topk_reduce(
    seq: TokenSequence,
    a0: Tensor,
    keep_rate: float,
    block: int = 0,
    kept: np.ndarray | None = None,
) -> Reduction:
    """Keep the top-k attended tokens and drop the rest."""
    n = seq.num_reducible
    if kept is None:
        kept = select_tokens(seq, a0, keep_rate)
    if kept.shape[1] == n:
        return Reduction(seq, kept, np.zeros(seq.batch, dtype=bool))
    out = _assemble(seq, kept + seq.reducible.start, [], [], [])
    return Reduction(out, kept, np.zeros(seq.batch, dtype=bool))


Reducer = Callable[..., Reduction]

REDUCERS: dict[str, Reducer] = {
    "evit": evit_reduce,
    "static_topk": static_topk_reduce,
}
