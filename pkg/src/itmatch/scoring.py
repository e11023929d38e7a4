"""Stream fusion, scalar scoring, and the bidirectional ranking loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError
from .reasoning import SimilarityNodeSet
from .tensor import Tensor

FUSE_MODES = ("both", "i2t_only", "t2i_only")


@dataclass(frozen=True)
class PairScore:
    score: Tensor   # ()
    fused: Tensor   # (m,) fused similarity vector behind the score


@dataclass(frozen=True)
class LossBatch:
    """(b, b) score grid whose diagonal holds the matched pairs."""

    scores: Tensor
    margin: float

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise ContractError(f"score grid must be square, got {self.scores.shape}")
        if self.scores.shape[0] < 2:
            raise ContractError("score grid needs at least two pairs for negatives")
        if self.margin < 0.0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")


def pool_t2i(nodes: SimilarityNodeSet) -> Tensor:
    """Mean over all text-to-image nodes, the global one included."""
    if nodes.stream != "t2i":
        raise ContractError(f"pool_t2i got a {nodes.stream!r} node set")
    return tt.mean(nodes.nodes, axis=0)


def fuse(s_i2t: Tensor | None, s_t2i: Tensor | None, mode: str = "both") -> Tensor:
    if mode not in FUSE_MODES:
        raise ConfigError(f"fuse mode must be one of {FUSE_MODES}, got {mode!r}")
    if mode == "i2t_only":
        if s_i2t is None:
            raise ContractError("fuse mode 'i2t_only' needs the i2t vector")
        return s_i2t
    if mode == "t2i_only":
        if s_t2i is None:
            raise ContractError("fuse mode 't2i_only' needs the t2i vector")
        return s_t2i
    if s_i2t is None or s_t2i is None:
        raise ContractError("fuse mode 'both' needs both stream vectors")
    if s_i2t.shape != s_t2i.shape:
        raise DimensionError(f"stream shapes differ: {s_i2t.shape} vs {s_t2i.shape}")
    return tt.add(s_i2t, s_t2i)


def score(fused: Tensor, w_head: Tensor, b_head: Tensor) -> Tensor:
    """Scalar matching score: w . fused + b."""
    if fused.ndim != 1 or w_head.shape != fused.shape:
        raise DimensionError(f"score needs matching vectors, got {fused.shape} and {w_head.shape}")
    return tt.add(tt.matmul(w_head, fused), b_head)


def bidirectional_ranking_loss(batch: LossBatch) -> Tensor:
    """Sum of hinge terms against the hardest in-batch negatives.

    For each matched pair k the hardest negative caption is the largest
    off-diagonal entry of row k and the hardest negative image the
    largest off-diagonal entry of column k; ties take the lowest index.
    Term order is fixed (caption term then image term, pairs in order)
    so the result is bitwise reproducible.
    """
    values = batch.scores.data
    b = values.shape[0]
    off_diag = values.copy()
    np.fill_diagonal(off_diag, -np.inf)
    total: Tensor | None = None
    for k in range(b):
        row = tt.take(batch.scores, k)
        matched = tt.take(row, k)
        hardest_caption = int(np.argmax(off_diag[k, :]))
        hardest_image = int(np.argmax(off_diag[:, k]))
        caption_term = tt.relu(
            tt.add(tt.sub(tt.take(row, hardest_caption), matched), batch.margin)
        )
        image_term = tt.relu(
            tt.add(tt.sub(tt.take(tt.take(batch.scores, hardest_image), k), matched), batch.margin)
        )
        pair_total = tt.add(caption_term, image_term)
        total = pair_total if total is None else tt.add(total, pair_total)
    return total
