import time

import numpy as np
import pytest

from dvis.assignment import match_adjacent
from dvis.errors import ConfigError, FormatError
from dvis.metrics import mask_iou
from dvis.synth import SynthConfig, generate_dataset, generate_video, read_dataset, stub_predictions, write_dataset


def per_frame_matched_iou(pred_masks, gt_masks):
    """Mean IoU of a per-frame Hungarian match of predicted slots to visible GT."""
    from dvis.assignment import hungarian_min

    ious = []
    for t in range(gt_masks.shape[1]):
        vis = np.flatnonzero(gt_masks[:, t].any(axis=1))
        if vis.size == 0:
            continue
        iou = mask_iou(gt_masks[vis, t], pred_masks[t])
        m = hungarian_min(-iou).mapping
        ious.extend(iou[np.arange(len(vis)), m])
    return float(np.mean(ious))


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(N_inst=11, N_slots=10)
    with pytest.raises(ConfigError):
        SynthConfig(sigma_obs=-1.0)


def test_deterministic_and_schedule_independent():
    cfg = SynthConfig(num_videos=3, T=5)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.queries, y.queries)
        np.testing.assert_array_equal(x.pixel_features, y.pixel_features)
    np.testing.assert_array_equal(generate_video(cfg, 2).queries, a[2].queries)


def test_noiseless_planted_permutation_recovered():
    cfg = SynthConfig(T=3, N_slots=2, N_inst=2, sigma_obs=0.0, sigma_motion=0.0, occlusion_prob=0.0, distractor_prob=0.0)
    v = generate_video(cfg, 0)
    for t in range(1, 3):
        _, perm = match_adjacent(v.queries[t - 1], v.queries[t])
        np.testing.assert_array_equal(v.planted[t][perm], v.planted[t - 1])


def test_single_frame_first_appearance_zero():
    v = generate_video(SynthConfig(T=1), 0)
    assert all(g.first_appearance == 0 for g in v.gt)


def test_first_appearance_invariant():
    for v in generate_dataset(SynthConfig(num_videos=5)):
        for g in v.gt:
            vis = g.visible
            assert vis[g.first_appearance]
            assert g.first_appearance == int(np.flatnonzero(vis)[0])
            assert 0 <= g.class_label < 4


def test_occlusion_windows_raise_absence():
    # Depth overlap alone can hide an instance, so occlusion_prob=0 is not absence-free.
    hidden = [
        np.mean([v.occlusion_level() for v in generate_dataset(SynthConfig(num_videos=10, occlusion_prob=p))])
        for p in (0.0, 1.0)
    ]
    assert hidden[1] > hidden[0] + 0.05
    assert min(v.occlusion_level() for v in generate_dataset(SynthConfig(num_videos=5, occlusion_prob=1.0))) > 0.0


@pytest.mark.parametrize("seed", range(5))
def test_stub_masks_reach_iou_floor(seed):
    cfg = SynthConfig(seed=seed)
    ious = [per_frame_matched_iou(stub_predictions(v, cfg).masks(), v.gt_masks()) for v in generate_dataset(cfg)]
    assert np.mean(ious) >= 0.9


def test_mask_drift_keeps_codes_orthonormal_and_decodable():
    cfg = SynthConfig(num_videos=3, mask_drift=0.25, seed=2)
    v = generate_video(cfg, 0)
    ms = cfg.mask_slice
    codes = np.stack([v.queries[t][np.argsort(v.planted[t])][: cfg.N_inst, ms] for t in range(cfg.T)])
    visible = v.gt_masks().any(axis=2).T  # [T, N_inst]
    for t in range(cfg.T):
        c = codes[t][visible[t]].astype(np.float64)
        np.testing.assert_allclose(c @ c.T, np.eye(len(c)), atol=1e-5)
    inst0 = [t for t in range(cfg.T) if visible[t, 0]]
    a, b = codes[inst0[0], 0], codes[inst0[-1], 0]
    assert abs(float(a @ b)) < 0.99
    ious = [per_frame_matched_iou(stub_predictions(x, cfg).masks(), x.gt_masks()) for x in generate_dataset(cfg)]
    assert np.mean(ious) >= 0.9
    with pytest.raises(ConfigError):
        SynthConfig(mask_drift=-0.1)


def test_stub_classes_noiseless():
    cfg = SynthConfig(sigma_obs=0.0, sigma_motion=0.0, distractor_prob=0.0, T=4)
    v = generate_video(cfg, 0)
    probs = stub_predictions(v, cfg).class_probs()
    for t in range(v.T):
        for slot, src in enumerate(v.planted[t]):
            visible = src < cfg.N_inst and v.gt[src].visible[t]
            expected = v.gt[src].class_label if visible else cfg.C
            assert probs[t, slot].argmax() == expected


def test_planted_slot_has_best_mask_iou_noiseless():
    cfg = SynthConfig(sigma_obs=0.0, sigma_motion=0.0, distractor_prob=0.0, T=6)
    v = generate_video(cfg, 1)
    masks = stub_predictions(v, cfg).masks()
    gt = v.gt_masks()
    for t in range(v.T):
        for n in range(cfg.N_inst):
            if not gt[n, t].any():
                continue
            slot = int(np.flatnonzero(v.planted[t] == n)[0])
            iou = mask_iou(gt[n, t][None], masks[t])[0]
            assert iou[slot] == iou.max()


def test_dataset_round_trip_and_bytes(tmp_path):
    cfg = SynthConfig(num_videos=3, T=6)
    vids = generate_dataset(cfg)
    p1, p2 = tmp_path / "a.dvsy", tmp_path / "b.dvsy"
    write_dataset(p1, vids, cfg)
    write_dataset(p2, generate_dataset(cfg), cfg)
    assert p1.read_bytes() == p2.read_bytes()
    back, stored = read_dataset(p1)
    assert stored == cfg
    for x, y in zip(vids, back):
        np.testing.assert_array_equal(x.queries, y.queries)
        np.testing.assert_array_equal(x.pixel_features, y.pixel_features)
        np.testing.assert_array_equal(x.planted, y.planted)
        np.testing.assert_array_equal(x.gt_masks(), y.gt_masks())
        assert [(g.instance_id, g.class_label, g.first_appearance) for g in x.gt] == [
            (g.instance_id, g.class_label, g.first_appearance) for g in y.gt
        ]


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
        (lambda b: b[: len(b) // 2], "truncat"),
    ],
)
def test_corrupt_dataset_reports_offset(tmp_path, mutate, where):
    p = tmp_path / "d.dvsy"
    write_dataset(p, generate_dataset(SynthConfig(num_videos=1, T=3)))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError) as info:
        read_dataset(p)
    assert where in str(info.value).lower()
    assert info.value.offset >= 0


def test_hundred_videos_round_trip_quickly(tmp_path):
    cfg = SynthConfig(num_videos=100)
    vids = generate_dataset(cfg)
    t0 = time.perf_counter()
    write_dataset(tmp_path / "big.dvsy", vids, cfg)
    read_dataset(tmp_path / "big.dvsy")
    assert time.perf_counter() - t0 < 5.0
