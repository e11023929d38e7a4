"""Gated graph reasoning over similarity vectors.

The node set stacks the per-word (or per-region) similarity vectors with
the global one as the last row.  Each reasoning layer builds a dense
pairwise relation matrix from two learned projections, optionally gates
it by a sigmoid of a 3x3 convolution over the matrix itself (the
"hierarchical" path, which makes the update sensitive to neighbourhoods
of relations rather than single entries), and applies a residual
per-node linear update.  The image-to-text stream reads out the global
node after the last layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class SimilarityNodeSet:
    """(n, m) node matrix tagged with its stream; global node is last."""

    nodes: Tensor
    stream: str  # "i2t" | "t2i"


@dataclass(frozen=True)
class RelationMatrix:
    matrix: Tensor  # (n, n)
    gated: bool


@dataclass(frozen=True)
class ReasonLayerParams:
    """Independent parameters of one reasoning layer."""

    w_query: Tensor   # (m, m) projection of the receiving node
    w_key: Tensor     # (m, m) projection of the contributing node
    w_out: Tensor     # (m, m) per-node output map
    w_mix: Tensor     # (m, m) feature mix inside the aggregation
    kernel: Tensor    # (3, 3) gate convolution kernel
    bias: Tensor      # ()     gate convolution bias


def build_node_set(local: Tensor, glob: Tensor, stream: str) -> SimilarityNodeSet:
    if stream not in ("i2t", "t2i"):
        raise ContractError(f"stream must be 'i2t' or 't2i', got {stream!r}")
    if glob.ndim != 1:
        raise DimensionError(f"global similarity vector must be 1-D, got {glob.shape}")
    if local.ndim != 2 or local.shape[1] != glob.shape[0]:
        raise DimensionError(
            f"local rows {local.shape} do not match the global vector {glob.shape}"
        )
    return SimilarityNodeSet(nodes=tt.vstack([local, glob]), stream=stream)


def relation_matrix(nodes: SimilarityNodeSet, w_query: Tensor, w_key: Tensor) -> RelationMatrix:
    """Dense pairwise relations: R[p, q] = (Wq' s_p) . (Wk' s_q)."""
    s = nodes.nodes
    queries = tt.matmul(s, tt.transpose(w_query))
    keys = tt.matmul(s, tt.transpose(w_key))
    return RelationMatrix(matrix=tt.matmul(queries, tt.transpose(keys)), gated=False)


def gate_relations(rel: RelationMatrix, kernel: Tensor, bias: Tensor) -> RelationMatrix:
    """Modulate relations by a sigmoid conv gate over the matrix itself."""
    if rel.gated:
        raise ContractError("relation matrix is already gated")
    gate = tt.sigmoid(tt.conv2d_3x3(rel.matrix, kernel, bias))
    return RelationMatrix(matrix=tt.mul(rel.matrix, gate), gated=True)


def reason_step(
    nodes: SimilarityNodeSet,
    layer: ReasonLayerParams,
    hierarchical: bool = True,
    row_softmax: bool = False,
) -> SimilarityNodeSet:
    """One residual update of every node from its relation-weighted context."""
    rel = relation_matrix(nodes, layer.w_query, layer.w_key)
    if hierarchical:
        rel = gate_relations(rel, layer.kernel, layer.bias)
    mixing = rel.matrix
    if row_softmax:
        mixing = tt.softmax_rows(mixing)
    context = tt.matmul(tt.matmul(mixing, nodes.nodes), layer.w_mix)
    update = tt.matmul(context, tt.transpose(layer.w_out))
    return SimilarityNodeSet(nodes=tt.add(update, nodes.nodes), stream=nodes.stream)


def reason(
    nodes: SimilarityNodeSet,
    layers: Sequence[ReasonLayerParams],
    hierarchical: bool = True,
    row_softmax: bool = False,
) -> Tensor:
    """Run every layer and read out the global node (last row)."""
    if len(layers) < 1:
        raise ConfigError("reasoning needs at least one layer")
    current = nodes
    for layer in layers:
        current = reason_step(current, layer, hierarchical=hierarchical, row_softmax=row_softmax)
    return tt.take(current.nodes, current.nodes.shape[0] - 1)
