import numpy as np
import pytest

from dvis import autodiff as ad
from dvis.autodiff import Tensor
from dvis.errors import ConfigError, DimensionError
from dvis.layers import multi_head_attention, temporal_conv1d
from dvis.modules import Linear
from dvis.refiner import (
    BlockToggles, RefinerConfig, init_refiner, refine_video, sinusoidal_encoding, temporal_decoder_block,
    temporal_weighting, temporal_weights,
)
from dvis.tracker import TrackerConfig, init_tracker, predict
from dvis.tree import tree_map

CFG = RefinerConfig(D=8, C=2, num_layers=2, num_heads=2, ffn_mult=2, kernel_size=3)
OFF = BlockToggles(False, False, False, False)


def randomized(params, rng, scale=0.3):
    return tree_map(lambda t: Tensor(t.data + scale * rng.standard_normal(t.shape)), params)


def setup(seed=0, T=4, N=2):
    rng = np.random.default_rng(seed)
    params = randomized(init_refiner(CFG, rng), rng)
    return rng, params, rng.standard_normal((T, N, 8)), rng.standard_normal((T, N, 8))


def test_all_toggles_off_is_identity():
    _, params, x, q = setup()
    out = temporal_decoder_block(x, q, params.blocks[0], OFF)
    assert np.array_equal(out.data, x)


def test_block_matches_sublayer_reference():
    _, params, x, q = setup(1)
    b = params.blocks[0]
    h = b.norm_conv(x).data.transpose(1, 0, 2)
    conv = b.conv2(ad.gelu(temporal_conv1d(h, b.conv1.kernel, b.conv1.bias))).data.transpose(1, 0, 2)
    y = x + conv
    h = b.norm_long(y).data.transpose(1, 0, 2)
    y = y + np.stack([multi_head_attention(h[n], h[n], h[n], b.long_term).data for n in range(2)], axis=1)
    kv = b.norm_cross_kv(q).data
    hq = b.norm_cross_q(y).data
    y = y + np.stack([multi_head_attention(hq[t], kv[t], kv[t], b.cross).data for t in range(4)])
    y = y + b.ffn(b.norm_ffn(y)).data
    np.testing.assert_allclose(temporal_decoder_block(x, q, b).data, y, atol=1e-10)


def test_single_frame_cross_only_is_frame_decoder():
    _, params, x, q = setup(2, T=1, N=3)
    b = params.blocks[0]
    tog = BlockToggles(conv=False, long_term=False, cross=True, ffn=False)
    expected = x[0] + multi_head_attention(b.norm_cross_q(x[0]), b.norm_cross_kv(q[0]), b.norm_cross_kv(q[0]), b.cross).data
    np.testing.assert_allclose(temporal_decoder_block(x, q, b, tog).data[0], expected, atol=1e-12)


def test_weights_sum_to_one_and_single_frame_identity():
    rng = np.random.default_rng(3)
    lin = Linear(Tensor(rng.standard_normal((8, 1))), Tensor(rng.standard_normal(1)))
    q = rng.standard_normal((6, 3, 8))
    w = temporal_weights(q, lin).data
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)
    assert np.array_equal(temporal_weighting(q[:1], lin).data, q[0])


def test_constant_score_gives_mean():
    q = np.random.default_rng(4).standard_normal((5, 2, 8))
    lin = Linear(Tensor(np.zeros((8, 1))), Tensor(np.array([0.7])))
    np.testing.assert_allclose(temporal_weighting(q, lin).data, q.mean(axis=0), atol=1e-14)


def test_weighting_formula():
    rng = np.random.default_rng(5)
    lin = Linear(Tensor(rng.standard_normal((8, 1))), Tensor(rng.standard_normal(1)))
    q = rng.standard_normal((5, 3, 8))
    s = (q @ lin.w.data)[..., 0] + lin.b.data[0]
    w = np.exp(s - s.max(axis=0)) / np.exp(s - s.max(axis=0)).sum(axis=0)
    np.testing.assert_allclose(temporal_weighting(q, lin).data, (w[..., None] * q).sum(axis=0), atol=1e-12)


def test_weighting_rejects_bad_shape():
    lin = Linear(Tensor(np.zeros((8, 1))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        temporal_weighting(np.zeros((0, 2, 8)), lin)


def test_disabled_refiner_reproduces_tracker_masks():
    rng = np.random.default_rng(6)
    tcfg = TrackerConfig(D=8, C=2, num_layers=1, num_heads=2, ffn_mult=2)
    tracker = randomized(init_tracker(tcfg, rng), rng)
    cfg = RefinerConfig(D=8, C=2, num_layers=2, num_heads=2, ffn_mult=2, kernel_size=3, toggles=OFF)
    params = init_refiner(cfg, rng)
    params.class_head, params.mask_head = tracker.class_head, tracker.mask_head
    q_tr, pix = rng.standard_normal((3, 2, 8)), rng.standard_normal((3, 7, 8))
    ref = refine_video(q_tr, params, cfg, pix)
    assert np.array_equal(ref.q_rf.data, q_tr)
    np.testing.assert_array_equal(ref.mask_logits.data, predict(tracker, Tensor(q_tr), pix)[1].data)


def test_single_frame_refinement_defined():
    _, params, _, q = setup(7, T=1, N=3)
    ref = refine_video(q, params, CFG, np.ones((1, 5, 8)))
    assert ref.class_logits.shape == (3, 3) and np.isfinite(ref.q_rf.data).all()
    np.testing.assert_allclose(ref.video_query.data, ref.q_rf.data[0], atol=1e-14)


def test_slot_isolation_without_cross_attention():
    cfg = RefinerConfig(D=8, C=2, num_layers=2, num_heads=2, ffn_mult=2, kernel_size=3,
                        toggles=BlockToggles(cross=False))
    rng = np.random.default_rng(8)
    params = randomized(init_refiner(cfg, rng), rng)
    q = rng.standard_normal((5, 3, 8))
    zeroed = np.zeros_like(q)
    zeroed[:, 1] = q[:, 1]
    a = refine_video(q, params, cfg).q_rf.data[:, 1]
    b = refine_video(zeroed, params, cfg).q_rf.data[:, 1]
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_long_term_attention_frame_equivariant_but_conv_is_not():
    rng = np.random.default_rng(9)
    params = randomized(init_refiner(CFG, rng), rng)
    x = rng.standard_normal((6, 2, 8))
    pi = rng.permutation(6)
    long_only = BlockToggles(conv=False, long_term=True, cross=False, ffn=False)
    b = params.blocks[0]
    np.testing.assert_allclose(
        temporal_decoder_block(x[pi], x[pi], b, long_only).data,
        temporal_decoder_block(x, x, b, long_only).data[pi],
        atol=1e-10,
    )
    conv_only = BlockToggles(conv=True, long_term=False, cross=False, ffn=False)
    assert not np.allclose(
        temporal_decoder_block(x[pi], x[pi], b, conv_only).data,
        temporal_decoder_block(x, x, b, conv_only).data[pi],
    )


def test_refine_video_is_pure():
    _, params, _, q = setup(10)
    a, b = refine_video(q, params, CFG), refine_video(q, params, CFG)
    assert np.array_equal(a.q_rf.data, b.q_rf.data)
    assert np.array_equal(a.class_logits.data, b.class_logits.data)


def test_positional_encoding_changes_long_term_attention():
    pe = sinusoidal_encoding(4, 8)
    assert pe.shape == (4, 8) and np.allclose(pe[0, 1::2], 1.0)
    rng = np.random.default_rng(11)
    params = randomized(init_refiner(CFG, rng), rng)
    x = rng.standard_normal((4, 2, 8))
    long_only = BlockToggles(conv=False, long_term=True, cross=False, ffn=False)
    a = temporal_decoder_block(x, x, params.blocks[0], long_only, positional=False).data
    b = temporal_decoder_block(x, x, params.blocks[0], long_only, positional=True).data
    assert not np.allclose(a, b)


def test_intermediate_heads():
    _, params, _, q = setup(12)
    ref = refine_video(q, params, CFG, np.ones((4, 5, 8)), keep_intermediate=True)
    assert len(ref.intermediate) == CFG.num_layers - 1
    assert ref.intermediate[0].mask_logits.shape == ref.mask_logits.shape


def test_config_validation():
    with pytest.raises(ConfigError):
        RefinerConfig(kernel_size=4).validate()
    with pytest.raises(DimensionError):
        temporal_decoder_block(np.zeros((3, 2, 8)), np.zeros((3, 3, 8)), setup()[1].blocks[0])
