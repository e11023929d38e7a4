"""Cross-modal attention and local similarity vectors.

Clamped cosine scores between regions and words are l2-normalised along
one modality and softmaxed (with a temperature) along the other, giving
region weights per word (image-to-text) or word weights per region
(text-to-image).  Attended features are compared to their query vectors
through a shared bilinear-free similarity map: the elementwise squared
difference projected to an m-vector and scaled by the inverse euclidean
distance.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tt
from .encoders import global_feature
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

# below this, two vectors count as coincident and the similarity vector is 0
DISTANCE_GUARD = 1e-12

I2T = "i2t"
T2I = "t2i"


@dataclass(frozen=True)
class AttentionWeights:
    """(k, l) weight matrix tagged with its normalisation direction.

    direction == "i2t": softmax over regions, each column sums to 1.
    direction == "t2i": softmax over words, each row sums to 1.
    """

    weights: Tensor
    direction: str


@dataclass(frozen=True)
class LocalSimilarities:
    """Similarity vectors feeding the reasoning stage.

    s_glob: (m,) global-to-global similarity, shared by both streams.
    s_i2t:  (l, m) per-word rows, None when the stream is disabled.
    s_t2i:  (k, m) per-region rows, None when the stream is disabled.
    """

    s_glob: Tensor
    s_i2t: Tensor | None
    s_t2i: Tensor | None


def sim_vec_rows(x: Tensor, y: Tensor, weight: Tensor) -> Tensor:
    """Row-wise similarity vectors: weight @ (x-y)^2 / ||x-y|| per row."""
    if x.ndim != 2 or y.ndim != 2 or x.shape != y.shape:
        raise DimensionError(f"sim_vec_rows needs equal (n, d) inputs, got {x.shape} and {y.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"similarity weight must be (m, {x.shape[1]}), got {weight.shape}"
        )
    diff = tt.sub(x, y)
    projected = tt.matmul(tt.square(diff), tt.transpose(weight))
    dist = tt.l2norm(diff, axis=1)
    return tt.scale_rows(projected, tt.safe_inv(dist, DISTANCE_GUARD))


def sim_vec(x: Tensor, y: Tensor, weight: Tensor) -> Tensor:
    """Similarity vector (m,) of two d-vectors; zero when they coincide."""
    if x.ndim != 1 or y.ndim != 1:
        raise DimensionError(f"sim_vec needs vectors, got {x.shape} and {y.shape}")
    return tt.take(sim_vec_rows(tt.stack([x]), tt.stack([y]), weight), 0)


def _unit_rows(x: Tensor) -> Tensor:
    return tt.scale_rows(x, tt.safe_inv(tt.l2norm(x, axis=1), DISTANCE_GUARD))


def cross_attention(v: Tensor, t: Tensor, temperature: float, direction: str) -> AttentionWeights:
    """Attention weights (k, l) from clamped region-word cosines."""
    if direction not in (I2T, T2I):
        raise ContractError(f"direction must be 'i2t' or 't2i', got {direction!r}")
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[1]:
        raise DimensionError(
            f"region and word features must share the joint dimension, got {v.shape} and {t.shape}"
        )
    cosines = tt.relu(tt.matmul(_unit_rows(v), tt.transpose(_unit_rows(t))))
    if direction == I2T:
        # normalise each region row over words, softmax over regions per word
        normed = tt.scale_rows(cosines, tt.safe_inv(tt.l2norm(cosines, axis=1), DISTANCE_GUARD))
        logits = tt.mul(normed, float(temperature))
        weights = tt.transpose(tt.softmax_rows(tt.transpose(logits)))
    else:
        # normalise each word column over regions, softmax over words per region
        normed = tt.transpose(
            tt.scale_rows(tt.transpose(cosines), tt.safe_inv(tt.l2norm(cosines, axis=0), DISTANCE_GUARD))
        )
        logits = tt.mul(normed, float(temperature))
        weights = tt.softmax_rows(logits)
    return AttentionWeights(weights=weights, direction=direction)


def attended_features(att: AttentionWeights, v: Tensor, t: Tensor) -> Tensor:
    """Weighted features: (l, d) of regions for i2t, (k, d) of words for t2i."""
    k, l = att.weights.shape
    if v.shape[0] != k or t.shape[0] != l:
        raise DimensionError(
            f"attention weights {att.weights.shape} do not match {v.shape[0]} regions"
            f" and {t.shape[0]} words"
        )
    if att.direction == I2T:
        return tt.matmul(tt.transpose(att.weights), v)
    return tt.matmul(att.weights, t)


def local_similarities(
    v: Tensor,
    t: Tensor,
    temperature: float,
    w_glob: Tensor,
    w_i2t: Tensor | None = None,
    w_t2i: Tensor | None = None,
    v_glob: Tensor | None = None,
    t_glob: Tensor | None = None,
) -> LocalSimilarities:
    """All similarity vectors for one image-caption pair.

    Pass precomputed global features to share them across many pairings
    of the same image or caption; they are derived from v and t otherwise.
    """
    if v_glob is None:
        v_glob = global_feature(v)
    if t_glob is None:
        t_glob = global_feature(t)
    s_glob = sim_vec(v_glob, t_glob, w_glob)
    s_i2t = None
    if w_i2t is not None:
        att = cross_attention(v, t, temperature, I2T)
        s_i2t = sim_vec_rows(attended_features(att, v, t), t, w_i2t)
    s_t2i = None
    if w_t2i is not None:
        att = cross_attention(v, t, temperature, T2I)
        s_t2i = sim_vec_rows(v, attended_features(att, v, t), w_t2i)
    return LocalSimilarities(s_glob=s_glob, s_i2t=s_i2t, s_t2i=s_t2i)
