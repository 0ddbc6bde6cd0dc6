"""Referring tracker: per-frame denoising of matched segmenter queries.

For frame ``t > 0`` each denoising block computes::

    x <- x + MHA(LN(reference), LN(candidates), LN(candidates))   # referring cross-attn
    x <- x + MHA(LN(x), LN(x), LN(x))                             # self-attention
    x <- x + FFN(LN(x))

with ``x_0`` the initial queries (Hungarian-matched segmenter queries by
default), ``reference`` the previous frame's tracked queries (held fixed
across blocks) and ``candidates`` the current frame's segmenter queries.
The identity path carries ``x``, never the reference; ``attention="standard"``
swaps in the reference as residual for ablation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assignment import METRICS, match_adjacent
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import AttentionParams, multi_head_attention
from .modules import (
    FFN, MLP, Linear, Norm, init_attention, init_ffn, init_linear, init_mlp, init_norm,
)


class InitStrategy(str, enum.Enum):
    ZERO = "zero"
    PREV_QTR = "prev_qtr"
    RAW_QSEG = "raw_qseg"
    MATCHED_QSEG = "matched_qseg"


ATTENTION_TYPES = ("referring", "standard")


@dataclass
class TrackerConfig:
    D: int = 64
    C: int = 4
    num_layers: int = 6
    num_heads: int = 8
    ffn_mult: int = 8
    init_strategy: str = "matched_qseg"
    attention: str = "referring"
    match_metric: str = "cosine"

    def validate(self) -> None:
        if self.D % self.num_heads:
            raise ConfigError(f"D={self.D} not divisible by num_heads={self.num_heads}")
        InitStrategy(self.init_strategy)
        if self.attention not in ATTENTION_TYPES:
            raise ConfigError(f"attention must be one of {ATTENTION_TYPES}")
        if self.match_metric not in METRICS:
            raise ConfigError(f"match_metric must be one of {METRICS}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")


@dataclass
class TrackerBlock:
    norm_ref: Norm
    norm_kv: Norm
    rca: AttentionParams
    norm_self: Norm
    self_attn: AttentionParams
    norm_ffn: Norm
    ffn: FFN


@dataclass
class TrackerParams:
    blocks: list
    class_head: Linear
    mask_head: MLP


def init_tracker(cfg: TrackerConfig, rng: np.random.Generator) -> TrackerParams:
    cfg.validate()
    D, h = cfg.D, cfg.num_heads
    blocks = [
        TrackerBlock(
            norm_ref=init_norm(D),
            norm_kv=init_norm(D),
            rca=init_attention(rng, D, h),
            norm_self=init_norm(D),
            self_attn=init_attention(rng, D, h),
            norm_ffn=init_norm(D),
            ffn=init_ffn(rng, D, cfg.ffn_mult * D),
        )
        for _ in range(cfg.num_layers)
    ]
    return TrackerParams(
        blocks=blocks,
        class_head=init_linear(rng, D, cfg.C + 1),
        mask_head=init_mlp(rng, [D, D, D, D]),
    )


def referring_cross_attention(id_, q, k, v, p: AttentionParams) -> Tensor:
    """``id + MHA(q, k, v)``: the residual path is ``id``, not the query."""
    id_ = ad.as_tensor(id_)
    if id_.shape[-1] != p.dim or id_.shape[:-1] != ad.as_tensor(q).shape[:-1]:
        raise DimensionError(f"RCA: id {id_.shape} incompatible with query {ad.as_tensor(q).shape}")
    return ad.add(id_, multi_head_attention(q, k, v, p))


def denoising_block(x, reference, keys_values, block: TrackerBlock, attention: str = "referring"):
    ref_n = block.norm_ref(reference)
    kv_n = block.norm_kv(keys_values)
    identity = x if attention == "referring" else reference
    x = referring_cross_attention(identity, ref_n, kv_n, kv_n, block.rca)
    h = block.norm_self(x)
    x = ad.add(x, multi_head_attention(h, h, h, block.self_attn))
    return ad.add(x, block.ffn(block.norm_ffn(x)))


def denoise_frame(init, reference, keys_values, params: TrackerParams, attention: str = "referring"):
    """Run every denoising block on one frame; ``reference`` is fixed across blocks."""
    return denoise_frame_layers(init, reference, keys_values, params, attention)[-1]


def denoise_frame_layers(init, reference, keys_values, params: TrackerParams, attention: str = "referring") -> list:
    """Output of every block (the init itself when there are no blocks)."""
    init, reference, keys_values = (ad.as_tensor(a) for a in (init, reference, keys_values))
    if not init.shape == reference.shape == keys_values.shape:
        raise DimensionError(
            f"denoise_frame: init {init.shape}, reference {reference.shape}, "
            f"keys_values {keys_values.shape} must match"
        )
    x = init
    layers = []
    for block in params.blocks:
        x = denoising_block(x, reference, keys_values, block, attention)
        layers.append(x)
    return layers or [x]


def init_queries(
    strategy,
    frame_index: int,
    q_seg_cur,
    prev_matched=None,
    prev_q_tr=None,
    metric: str = "cosine",
):
    """Initial (noisy) queries for one frame under an :class:`InitStrategy`."""
    strategy = InitStrategy(strategy)
    cur = ad.as_tensor(q_seg_cur)
    if frame_index == 0:
        return cur
    if strategy is InitStrategy.ZERO:
        return ad.zeros(cur.shape)
    if strategy is InitStrategy.RAW_QSEG:
        return cur
    if strategy is InitStrategy.PREV_QTR:
        if prev_q_tr is None:
            raise ValueError("prev_qtr init needs the previous frame's tracked queries")
        return ad.as_tensor(prev_q_tr)
    if prev_matched is None:
        raise ValueError("matched_qseg init needs the previous frame's matched queries")
    matched, _ = match_adjacent(prev_matched, cur.data, metric)
    return Tensor(matched)


@dataclass
class TrackedSequence:
    q_tr: Tensor  # [T, N, D]
    perms: np.ndarray  # [T, N] slot permutation applied to the raw segmenter order
    class_logits: Tensor | None = None  # [T, N, C+1]
    mask_logits: Tensor | None = None  # [T, N, P]
    intermediate: list = field(default_factory=list)  # [T, N, D] per non-final block


def matching_chain(queries: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Per-frame permutations of the Hungarian chain over adjacent frames."""
    T, N = queries.shape[:2]
    perms = np.zeros((T, N), dtype=np.intp)
    perms[0] = np.arange(N)
    prev = queries[0]
    for t in range(1, T):
        prev, perms[t] = match_adjacent(prev, queries[t], metric)
    return perms


def track_video(
    queries,
    params: TrackerParams,
    cfg: TrackerConfig,
    pixels: np.ndarray | None = None,
    perms: np.ndarray | None = None,
    keep_intermediate: bool = False,
) -> TrackedSequence:
    """Stream left to right over ``queries`` ``[T, N, D]``.

    ``perms`` may carry a precomputed matching chain; ``pixels`` ``[T, P, D]``
    enables the class/mask heads. ``keep_intermediate`` also returns the
    outputs of the non-final blocks, for deep supervision. A leading batch
    axis (``[B, T, N, D]`` queries, ``[B, T, N]`` perms, ``[B, T, P, D]``
    pixels) tracks B independent clips in one pass.
    """
    q = np.asarray(getattr(queries, "data", queries), dtype=np.float64)
    if q.ndim not in (3, 4):
        raise DimensionError(f"track_video expects [T, N, D] or [B, T, N, D], got {q.shape}")
    batched = q.ndim == 4
    T = q.shape[-3]
    if T < 1:
        raise ValueError("track_video needs at least one frame")
    strategy = InitStrategy(cfg.init_strategy)
    if perms is None:
        chains = [matching_chain(x, cfg.match_metric) for x in (q if batched else q[None])]
        perms = np.stack(chains) if batched else chains[0]
    perms = np.asarray(perms)
    outputs, hidden = [], []
    prev = None
    for t in range(T):
        raw = q[..., t, :, :]
        matched = np.take_along_axis(raw, perms[..., t, :, None], axis=-2)
        if t == 0 or strategy is InitStrategy.MATCHED_QSEG:
            init = Tensor(matched)
        elif strategy is InitStrategy.ZERO:
            init = ad.zeros(matched.shape)
        elif strategy is InitStrategy.RAW_QSEG:
            init = Tensor(raw)
        else:
            init = prev
        reference = init if t == 0 else prev
        layers = denoise_frame_layers(init, reference, Tensor(matched), params, cfg.attention)
        prev = layers[-1]
        outputs.append(prev)
        hidden.append(layers[:-1])
    axis = 1 if batched else 0
    seq = TrackedSequence(q_tr=ad.stack(outputs, axis=axis), perms=perms)
    if keep_intermediate:
        seq.intermediate = [ad.stack([h[i] for h in hidden], axis=axis) for i in range(len(hidden[0]))]
    if pixels is not None:
        seq.class_logits, seq.mask_logits = predict(params, seq.q_tr, pixels)
    return seq


def predict(params, q: Tensor, pixels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Class logits ``[..., T, N, C+1]`` and mask logits ``[..., T, N, P]`` from queries ``[..., T, N, D]``."""
    class_logits = params.class_head(q)
    embed = params.mask_head(q)
    pix_t = Tensor(np.swapaxes(np.asarray(pixels, dtype=np.float64), -1, -2))
    return class_logits, ad.matmul(embed, pix_t)
