"""Temporal refiner: offline refinement of a whole tracked sequence.

Each temporal decoder block applies four pre-norm residual sublayers in
order, any of which can be switched off:

* short-term conv: two kernel-``k`` temporal convolutions per slot;
* long-term attention: self-attention along time, per slot;
* cross-attention: per frame, refined slots attend to the tracker's slots;
* FFN.

A video-level embedding per slot is the softmax-over-time weighted mean of
the refined queries, scored by a scalar linear map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import AttentionParams, linear, multi_head_attention, softmax, temporal_conv1d
from .modules import (
    FFN, MLP, Linear, Norm, init_attention, init_ffn, init_linear, init_mlp, init_norm, uniform,
)


@dataclass
class BlockToggles:
    conv: bool = True
    long_term: bool = True
    cross: bool = True
    ffn: bool = True


@dataclass
class RefinerConfig:
    D: int = 64
    C: int = 4
    num_layers: int = 6
    num_heads: int = 8
    ffn_mult: int = 8
    kernel_size: int = 5
    positional_encoding: bool = False
    toggles: BlockToggles = field(default_factory=BlockToggles)

    def validate(self) -> None:
        if self.D % self.num_heads:
            raise ConfigError(f"D={self.D} not divisible by num_heads={self.num_heads}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")


@dataclass
class Conv:
    kernel: Tensor  # [k, D_in, D_out]
    bias: Tensor

    def __call__(self, x) -> Tensor:
        return temporal_conv1d(x, self.kernel, self.bias)


@dataclass
class RefinerBlock:
    norm_conv: Norm
    conv1: Conv
    conv2: Conv
    norm_long: Norm
    long_term: AttentionParams
    norm_cross_q: Norm
    norm_cross_kv: Norm
    cross: AttentionParams
    norm_ffn: Norm
    ffn: FFN


@dataclass
class RefinerParams:
    blocks: list
    weighting: Linear  # D -> 1 temporal score
    class_head: Linear
    mask_head: MLP


def _init_conv(rng, k: int, d: int, zero: bool = False) -> Conv:
    kernel = Tensor(np.zeros((k, d, d))) if zero else uniform(rng, (k, d, d), k * d)
    return Conv(kernel, Tensor(np.zeros(d)))


def init_refiner(cfg: RefinerConfig, rng: np.random.Generator) -> RefinerParams:
    cfg.validate()
    D, h, k = cfg.D, cfg.num_heads, cfg.kernel_size
    blocks = [
        RefinerBlock(
            norm_conv=init_norm(D),
            conv1=_init_conv(rng, k, D),
            conv2=_init_conv(rng, k, D, zero=True),
            norm_long=init_norm(D),
            long_term=init_attention(rng, D, h),
            norm_cross_q=init_norm(D),
            norm_cross_kv=init_norm(D),
            cross=init_attention(rng, D, h),
            norm_ffn=init_norm(D),
            ffn=init_ffn(rng, D, cfg.ffn_mult * D),
        )
        for _ in range(cfg.num_layers)
    ]
    return RefinerParams(
        blocks=blocks,
        weighting=init_linear(rng, D, 1),
        class_head=init_linear(rng, D, cfg.C + 1),
        mask_head=init_mlp(rng, [D, D, D, D]),
    )


def sinusoidal_encoding(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(D // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / D))
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : D - D // 2]
    return pe


def conv_sublayer(x: Tensor, block: RefinerBlock) -> Tensor:
    """Residual short-term conv along time; ``x`` is ``[T, N, D]``."""
    h = ad.swapaxes(block.norm_conv(x), 0, 1)  # [N, T, D]
    h = block.conv2(ad.gelu(block.conv1(h)))
    return ad.add(x, ad.swapaxes(h, 0, 1))


def long_term_sublayer(x: Tensor, block: RefinerBlock, positional: bool = False) -> Tensor:
    h = ad.swapaxes(block.norm_long(x), 0, 1)  # [N, T, D]
    qk = ad.add(h, Tensor(sinusoidal_encoding(h.shape[1], h.shape[2]))) if positional else h
    out = multi_head_attention(qk, qk, h, block.long_term)
    return ad.add(x, ad.swapaxes(out, 0, 1))


def cross_sublayer(x: Tensor, q_tr: Tensor, block: RefinerBlock) -> Tensor:
    kv = block.norm_cross_kv(q_tr)
    return ad.add(x, multi_head_attention(block.norm_cross_q(x), kv, kv, block.cross))


def temporal_decoder_block(
    x,
    q_tr,
    block: RefinerBlock,
    toggles: BlockToggles | None = None,
    positional: bool = False,
) -> Tensor:
    x, q_tr = ad.as_tensor(x), ad.as_tensor(q_tr)
    if x.ndim != 3 or x.shape != q_tr.shape:
        raise DimensionError(f"temporal_decoder_block: x {x.shape} vs q_tr {q_tr.shape}")
    toggles = toggles or BlockToggles()
    if toggles.conv:
        x = conv_sublayer(x, block)
    if toggles.long_term:
        x = long_term_sublayer(x, block, positional)
    if toggles.cross:
        x = cross_sublayer(x, q_tr, block)
    if toggles.ffn:
        x = ad.add(x, block.ffn(block.norm_ffn(x)))
    return x


def temporal_weights(q_rf, weighting: Linear) -> Tensor:
    """``[T, N]`` softmax-over-time weights; each slot's column sums to 1."""
    scores = linear(q_rf, weighting.w, weighting.b)  # [T, N, 1]
    return softmax(ad.reshape(scores, scores.shape[:-1]), axis=0)


def temporal_weighting(q_rf, weighting: Linear) -> Tensor:
    """Per-slot weighted mean over frames: ``[T, N, D] -> [N, D]``."""
    q_rf = ad.as_tensor(q_rf)
    if q_rf.ndim != 3 or q_rf.shape[0] < 1:
        raise DimensionError(f"temporal_weighting expects [T>=1, N, D], got {q_rf.shape}")
    w = temporal_weights(q_rf, weighting)
    return ad.sum(ad.mul(ad.reshape(w, w.shape + (1,)), q_rf), axis=0)


@dataclass
class RefinedSequence:
    q_rf: Tensor  # [T, N, D]
    video_query: Tensor  # [N, D]
    class_logits: Tensor  # [N, C+1]
    mask_logits: Tensor | None = None  # [T, N, P]
    intermediate: list = field(default_factory=list)  # RefinedSequence per non-final block


def refiner_heads(x: Tensor, params: RefinerParams, pixels=None) -> RefinedSequence:
    """Video-level class logits and per-frame mask logits for refined queries ``x``."""
    video = temporal_weighting(x, params.weighting)
    class_logits = params.class_head(video)
    mask_logits = None
    if pixels is not None:
        embed = params.mask_head(x)
        pix_t = Tensor(np.swapaxes(np.asarray(pixels, dtype=np.float64), -1, -2))
        mask_logits = ad.matmul(embed, pix_t)
    return RefinedSequence(x, video, class_logits, mask_logits)


def refine_video(q_tr, params: RefinerParams, cfg: RefinerConfig, pixels=None, keep_intermediate: bool = False) -> RefinedSequence:
    q_tr = ad.as_tensor(q_tr)
    if q_tr.ndim != 3 or q_tr.shape[0] < 1:
        raise DimensionError(f"refine_video expects [T>=1, N, D], got {q_tr.shape}")
    x = q_tr
    hidden = []
    for block in params.blocks:
        x = temporal_decoder_block(x, q_tr, block, cfg.toggles, cfg.positional_encoding)
        hidden.append(x)
    out = refiner_heads(x, params, pixels)
    if keep_intermediate:
        out.intermediate = [refiner_heads(h, params, pixels) for h in hidden[:-1]]
    return out
