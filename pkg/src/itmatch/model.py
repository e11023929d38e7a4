"""Model configuration, parameter initialisation, and the pair forward pass.

One scalar score per image-caption pair: encode both modalities, build
local similarity vectors through cross attention, run the image-to-text
node set through gated graph reasoning, mean-pool the text-to-image node
set, fuse the two stream vectors, and apply a linear head.  Batch score
grids share the per-item encodings across all pairings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .attention import local_similarities
from .encoders import GruWeights, encode_text, global_feature, project_image
from .errors import ConfigError, DimensionError
from .reasoning import ReasonLayerParams, build_node_set, reason
from .scoring import PairScore, fuse, pool_t2i, score
from .tensor import ParamStore, Tensor

STREAMS = ("both", "i2t_only", "t2i_only")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_raw: int = 2048
    embed_dim: int = 300
    hidden_dim: int = 1024
    sim_dim: int = 256
    n_layers: int = 3
    temperature: float = 9.0
    stream: str = "both"
    hierarchical: bool = True
    row_softmax: bool = False
    share_sim_w: bool = False
    max_caption_len: int = 128

    def __post_init__(self):
        for field in ("vocab_size", "d_raw", "embed_dim", "hidden_dim", "sim_dim", "max_caption_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.stream not in STREAMS:
            raise ConfigError(f"stream must be one of {STREAMS}, got {self.stream!r}")

    @property
    def uses_i2t(self) -> bool:
        return self.stream in ("both", "i2t_only")

    @property
    def uses_t2i(self) -> bool:
        return self.stream in ("both", "t2i_only")


@dataclass(frozen=True)
class EncodedImage:
    local: Tensor  # (k, d)
    glob: Tensor   # (d,)


@dataclass(frozen=True)
class EncodedCaption:
    local: Tensor  # (l, d)
    glob: Tensor   # (d,)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Seeded LeCun-uniform matrices (variance 1/fan_in), zero biases.

    Two deliberate exceptions: the embedding table starts at unit scale, and
    each reasoning layer's output projection starts at zero (see below).
    Creation order is fixed, so one seed always yields the same store.
    Streams that are switched off do not create their parameters.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def matrix(name: str, rows: int, cols: int, fan_in: int) -> None:
        bound = math.sqrt(3.0 / fan_in)
        store.add(name, tt.parameter(rng.uniform(-bound, bound, size=(rows, cols))))

    def vector(name: str, n: int, fan_in: int | None = None) -> None:
        if fan_in is None:
            store.add(name, tt.parameter(np.zeros(n)))
        else:
            bound = math.sqrt(3.0 / fan_in)
            store.add(name, tt.parameter(rng.uniform(-bound, bound, size=n)))

    # word vectors start at unit scale; fan-in scaling would starve the GRU,
    # whose inputs these are, of signal at the start of training
    store.add(
        "embed.table",
        tt.parameter(rng.uniform(-1.0, 1.0, size=(cfg.vocab_size, cfg.embed_dim))),
    )
    for direction in ("fwd", "bwd"):
        for gate in ("reset", "update", "cand"):
            matrix(f"gru.{direction}.w_{gate}", cfg.hidden_dim, cfg.embed_dim, fan_in=cfg.embed_dim)
            matrix(f"gru.{direction}.u_{gate}", cfg.hidden_dim, cfg.hidden_dim, fan_in=cfg.hidden_dim)
            vector(f"gru.{direction}.b_{gate}", cfg.hidden_dim)
    matrix("img_proj.w", cfg.d_raw, cfg.hidden_dim, fan_in=cfg.d_raw)
    vector("img_proj.b", cfg.hidden_dim)
    if cfg.share_sim_w:
        matrix("sim.w_shared", cfg.sim_dim, cfg.hidden_dim, fan_in=cfg.hidden_dim)
    else:
        matrix("sim.w_glob", cfg.sim_dim, cfg.hidden_dim, fan_in=cfg.hidden_dim)
        if cfg.uses_i2t:
            matrix("sim.w_i2t", cfg.sim_dim, cfg.hidden_dim, fan_in=cfg.hidden_dim)
        if cfg.uses_t2i:
            matrix("sim.w_t2i", cfg.sim_dim, cfg.hidden_dim, fan_in=cfg.hidden_dim)
    if cfg.uses_i2t:
        for i in range(cfg.n_layers):
            matrix(f"reason.{i}.w_query", cfg.sim_dim, cfg.sim_dim, fan_in=cfg.sim_dim)
            matrix(f"reason.{i}.w_key", cfg.sim_dim, cfg.sim_dim, fan_in=cfg.sim_dim)
            # the residual output projection starts at zero, so every layer is
            # a no-op at first and a deep model scores exactly like its
            # depth-0 counterpart; with a random start the residual updates
            # drown the global node and training stalls for thousands of steps
            store.add(
                f"reason.{i}.w_out",
                tt.parameter(np.zeros((cfg.sim_dim, cfg.sim_dim))),
            )
            matrix(f"reason.{i}.w_mix", cfg.sim_dim, cfg.sim_dim, fan_in=cfg.sim_dim)
            matrix(f"reason.{i}.kernel", 3, 3, fan_in=9)
            store.add(f"reason.{i}.bias", tt.parameter(np.zeros(())))
    vector("head.w", cfg.sim_dim, fan_in=cfg.sim_dim)
    store.add("head.b", tt.parameter(np.zeros(())))
    return store


def _gru_weights(params: ParamStore, direction: str) -> GruWeights:
    return GruWeights(
        w_reset=params[f"gru.{direction}.w_reset"],
        w_update=params[f"gru.{direction}.w_update"],
        w_cand=params[f"gru.{direction}.w_cand"],
        u_reset=params[f"gru.{direction}.u_reset"],
        u_update=params[f"gru.{direction}.u_update"],
        u_cand=params[f"gru.{direction}.u_cand"],
        b_reset=params[f"gru.{direction}.b_reset"],
        b_update=params[f"gru.{direction}.b_update"],
        b_cand=params[f"gru.{direction}.b_cand"],
    )


def layer_params(params: ParamStore, index: int) -> ReasonLayerParams:
    return ReasonLayerParams(
        w_query=params[f"reason.{index}.w_query"],
        w_key=params[f"reason.{index}.w_key"],
        w_out=params[f"reason.{index}.w_out"],
        w_mix=params[f"reason.{index}.w_mix"],
        kernel=params[f"reason.{index}.kernel"],
        bias=params[f"reason.{index}.bias"],
    )


def _sim_weights(params: ParamStore, cfg: ModelConfig) -> tuple[Tensor, Tensor | None, Tensor | None]:
    if cfg.share_sim_w:
        shared = params["sim.w_shared"]
        return (
            shared,
            shared if cfg.uses_i2t else None,
            shared if cfg.uses_t2i else None,
        )
    return (
        params["sim.w_glob"],
        params["sim.w_i2t"] if cfg.uses_i2t else None,
        params["sim.w_t2i"] if cfg.uses_t2i else None,
    )


def encode_image(params: ParamStore, cfg: ModelConfig, regions) -> EncodedImage:
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[1] != cfg.d_raw:
        raise DimensionError(
            f"region features must be (k, {cfg.d_raw}), got {regions.shape}"
        )
    local = project_image(regions, params["img_proj.w"], params["img_proj.b"])
    return EncodedImage(local=local, glob=global_feature(local))


def encode_caption(params: ParamStore, cfg: ModelConfig, tokens) -> EncodedCaption:
    local = encode_text(
        tokens,
        params["embed.table"],
        _gru_weights(params, "fwd"),
        _gru_weights(params, "bwd"),
        max_len=cfg.max_caption_len,
    )
    return EncodedCaption(local=local, glob=global_feature(local))


def pair_similarity(
    params: ParamStore,
    cfg: ModelConfig,
    image: EncodedImage,
    caption: EncodedCaption,
) -> PairScore:
    w_glob, w_i2t, w_t2i = _sim_weights(params, cfg)
    local = local_similarities(
        image.local,
        caption.local,
        cfg.temperature,
        w_glob,
        w_i2t=w_i2t,
        w_t2i=w_t2i,
        v_glob=image.glob,
        t_glob=caption.glob,
    )
    s_i2t = None
    if cfg.uses_i2t:
        if cfg.n_layers == 0:
            # reasoning bypassed: the stream reduces to its initial global node
            s_i2t = local.s_glob
        else:
            nodes = build_node_set(local.s_i2t, local.s_glob, "i2t")
            layers = [layer_params(params, i) for i in range(cfg.n_layers)]
            s_i2t = reason(
                nodes, layers, hierarchical=cfg.hierarchical, row_softmax=cfg.row_softmax
            )
    s_t2i = None
    if cfg.uses_t2i:
        s_t2i = pool_t2i(build_node_set(local.s_t2i, local.s_glob, "t2i"))
    fused = fuse(s_i2t, s_t2i, cfg.stream)
    return PairScore(score=score(fused, params["head.w"], params["head.b"]), fused=fused)


def pair_score(params: ParamStore, cfg: ModelConfig, regions, tokens) -> PairScore:
    return pair_similarity(
        params, cfg, encode_image(params, cfg, regions), encode_caption(params, cfg, tokens)
    )


def score_grid(params: ParamStore, cfg: ModelConfig, region_list, token_lists) -> Tensor:
    """(b, b) score grid; row = image index, column = caption index.

    Encodings are computed once per item and shared across all pairings.
    """
    if len(region_list) != len(token_lists):
        raise DimensionError(
            f"grid needs matched lists, got {len(region_list)} images"
            f" and {len(token_lists)} captions"
        )
    images = [encode_image(params, cfg, r) for r in region_list]
    captions = [encode_caption(params, cfg, t) for t in token_lists]
    rows = []
    for img in images:
        rows.append(tt.stack([pair_similarity(params, cfg, img, cap).score for cap in captions]))
    return tt.stack(rows)


def score_matrix(params: ParamStore, cfg: ModelConfig, region_list, token_lists) -> np.ndarray:
    """Dense evaluation scores (n_images, n_captions), gradient-free."""
    with tt.no_grad():
        images = [encode_image(params, cfg, r) for r in region_list]
        captions = [encode_caption(params, cfg, t) for t in token_lists]
        out = np.empty((len(images), len(captions)))
        for i, img in enumerate(images):
            for j, cap in enumerate(captions):
                out[i, j] = pair_similarity(params, cfg, img, cap).score.item()
    return out


def config_with(cfg: ModelConfig, **overrides) -> ModelConfig:
    return replace(cfg, **overrides)
