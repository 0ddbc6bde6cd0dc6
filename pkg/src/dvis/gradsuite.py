"""Finite-difference gradient suite over every differentiable op and both losses.

Each case builds a small random instance for a seed and reduces the op's
output to a scalar with a fixed random projection, so no coordinate of the
gradient is trivially zero.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import grad_check
from .layers import AttentionParams, layer_norm, linear, log_softmax, multi_head_attention, softmax, temporal_conv1d


def _rand(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape))


def _attention(rng, d=8, h=2):
    def w():
        return _rand(rng, d, d, scale=0.5)

    def b():
        return _rand(rng, d, scale=0.1)

    return AttentionParams(h, w(), b(), w(), b(), w(), b(), w(), b())


def _unary(op, low=None) -> Callable:
    def build(rng):
        x = _rand(rng, 3, 4)
        if low is not None:
            x = Tensor(np.abs(x.data) + low)
        r = rng.standard_normal(x.shape)
        return (lambda p: ad.sum(ad.mul(op(p), r))), x

    return build


def _binary(op, positive_b=False) -> Callable:
    def build(rng):
        a = _rand(rng, 3, 4)
        b = _rand(rng, 4)
        if positive_b:
            b = Tensor(np.abs(b.data) + 0.5)
        r = rng.standard_normal((3, 4))
        return (lambda p: ad.sum(ad.mul(op(p[0], p[1]), r))), [a, b]

    return build


def _case_linear(rng):
    params = [_rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)]
    r = rng.standard_normal((2, 3, 5))
    return (lambda p: ad.sum(ad.mul(linear(*p), r))), params


def _case_softmax(rng):
    x = _rand(rng, 3, 5)
    r = rng.standard_normal((3, 5))
    return (lambda p: ad.sum(ad.mul(softmax(p, axis=-1), r))), x


def _case_log_softmax(rng):
    x = _rand(rng, 3, 5)
    r = rng.standard_normal((3, 5))
    return (lambda p: ad.sum(ad.mul(log_softmax(p, axis=0), r))), x


def _case_layer_norm(rng):
    params = [_rand(rng, 3, 6), Tensor(1.0 + 0.1 * rng.standard_normal(6)), _rand(rng, 6, scale=0.1)]
    r = rng.standard_normal((3, 6))
    return (lambda p: ad.sum(ad.mul(layer_norm(*p), r))), params


def _case_attention(rng):
    params = {"q": _rand(rng, 2, 3, 8), "k": _rand(rng, 2, 4, 8), "v": _rand(rng, 2, 4, 8), "p": _attention(rng)}
    r = rng.standard_normal((2, 3, 8))
    return (lambda p: ad.sum(ad.mul(multi_head_attention(p["q"], p["k"], p["v"], p["p"]), r))), params


def _case_conv(rng):
    params = [_rand(rng, 2, 6, 3), _rand(rng, 5, 3, 4, scale=0.5), _rand(rng, 4)]
    r = rng.standard_normal((2, 6, 4))
    return (lambda p: ad.sum(ad.mul(temporal_conv1d(*p), r))), params


def _case_shapes(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    r = rng.standard_normal((3, 3, 3))

    def f(p):
        x, y = p
        s = ad.stack([x, y], axis=1)  # [2, 2, 3]
        c = ad.concat([ad.reshape(s, (4, 3)), x], axis=0)  # [6, 3]
        t = ad.take(c, [0, 5, 5, 2], axis=0)  # [4, 3], repeated index
        m = ad.matmul(ad.swapaxes(t, 0, 1), t)  # [3, 3]
        g = ad.matmul(ad.transpose(ad.mean(s, axis=0), (1, 0)), ad.take(x, [1, 0], axis=0))  # [3, 3]
        out = ad.stack([m, ad.swapaxes(m, 0, 1), g], axis=1)
        return ad.sum(ad.mul(out, r))

    return f, [a, b]


def _tracker_case(rng):
    from .losses import ClipTargets, LossWeights, MatchSourceRule, match_tracker, tracker_loss
    from .tracker import TrackerConfig, init_tracker, track_video

    cfg = TrackerConfig(D=8, C=2, num_layers=1, num_heads=2, ffn_mult=2)
    params = init_tracker(cfg, rng)
    params = _perturb(params, rng)
    T, N, P = 2, 3, 5
    queries = rng.standard_normal((T, N, cfg.D))
    pixels = rng.standard_normal((T, P, cfg.D))
    masks = rng.random((2, T, P)) < 0.5
    masks[:, 0, 0] = True
    targets = ClipTargets(np.array([0, 1]), masks)
    seq = track_video(queries, params, cfg, pixels)
    assignment = match_tracker(None, (seq.class_logits.data, seq.mask_logits.data), targets, MatchSourceRule(2, 1))
    w = LossWeights()

    def f(p):
        s = track_video(queries, p, cfg, pixels, seq.perms)
        return tracker_loss(s.class_logits, s.mask_logits, targets, assignment, w)

    return f, params


def _refiner_case(rng):
    from .losses import ClipTargets, LossWeights, MatchSourceRule, match_refiner, refiner_loss
    from .refiner import RefinerConfig, init_refiner, refine_video

    cfg = RefinerConfig(D=8, C=2, num_layers=1, num_heads=2, ffn_mult=2, kernel_size=3)
    params = _perturb(init_refiner(cfg, rng), rng)
    T, N, P = 2, 3, 5
    q_tr = rng.standard_normal((T, N, cfg.D))
    pixels = rng.standard_normal((T, P, cfg.D))
    masks = rng.random((2, T, P)) < 0.5
    masks[:, 0, 0] = True
    targets = ClipTargets(np.array([0, 1]), masks)
    ref = refine_video(q_tr, params, cfg, pixels)
    assignment = match_refiner(None, (ref.class_logits.data, ref.mask_logits.data), targets, MatchSourceRule(2, 1))
    w = LossWeights()

    def f(p):
        r = refine_video(q_tr, p, cfg, pixels)
        return refiner_loss(r.class_logits, r.mask_logits, targets, assignment, w)

    return f, params


def _perturb(params, rng):
    """Replace zero-initialized tensors by small random values so every path carries gradient."""
    from .tree import tree_map

    return tree_map(lambda t: Tensor(t.data + 0.3 * rng.standard_normal(t.shape)), params)


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "square": _unary(ad.square),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, low=0.5),
    "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(ad.softplus),
    "gelu": _unary(ad.gelu),
    "sum_mean_reshape": _unary(
        lambda x: ad.mul(ad.reshape(ad.mean(ad.sum(x, axis=1, keepdims=True), axis=1), (3, 1)), x)
    ),
    "linear": _case_linear,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "multi_head_attention": _case_attention,
    "temporal_conv1d": _case_conv,
    "shape_ops": _case_shapes,
    "tracker_loss": _tracker_case,
    "refiner_loss": _refiner_case,
}


def run_suite(seeds: int = 10, names=None, max_coords: int | None = 400) -> dict:
    """``{name: {"max_error": float, "seeds": n}}`` over ``seeds`` random instances per case."""
    results = {}
    for name in names or CASES:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
            f, params = CASES[name](rng)
            worst = max(worst, grad_check(f, params, max_coords=max_coords, seed=seed))
        results[name] = {"max_error": worst, "seeds": seeds}
    return results
