import csv
import io
import json

import numpy as np
import pytest

from dvis.autodiff import Tensor
from dvis.engine import flat_pixels, run_tracker
from dvis.errors import ConfigError
from dvis.evaluation import (
    InferenceMode, VideoPrediction, baseline_prediction, evaluate, evaluate_baseline, infer, occlusion_buckets,
    parameter_report, video_metrics,
)
from dvis.losses import class_probs
from dvis.refiner import RefinerConfig, init_refiner, refine_video
from dvis.synth import SynthConfig, generate_dataset
from dvis.tracker import TrackerConfig, init_tracker
from dvis.tree import tree_map

SYN = SynthConfig(num_videos=4, T=7, N_slots=4, N_inst=3, D=24, C=2, grid=(8, 8), mask_dim=6, size_range=(2, 4))
TRK = TrackerConfig(D=24, C=2, num_layers=1, num_heads=2, ffn_mult=2)
REF = RefinerConfig(D=24, C=2, num_layers=2, num_heads=2, ffn_mult=2, kernel_size=3)


def jitter(params, rng, scale=0.2):
    return tree_map(lambda t: Tensor(t.data + scale * rng.standard_normal(t.shape)), params)


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    videos = generate_dataset(SYN)
    tracker = (jitter(init_tracker(TRK, rng), rng), TRK)
    refiner = (jitter(init_refiner(REF, rng), rng), REF)
    return videos, tracker, refiner


def test_mode_parsing_and_validation():
    assert InferenceMode.parse("online") == InferenceMode.online()
    assert InferenceMode.parse("semi_online:5") == InferenceMode.semi_online(5)
    assert InferenceMode.parse("offline").label() == "offline"
    for bad in ("semi_online:0", "semi_online:x", "online:3", "streaming"):
        with pytest.raises(ConfigError):
            InferenceMode.parse(bad)


def test_semi_online_full_length_is_offline(setup):
    videos, tracker, refiner = setup
    for v in videos:
        a = infer(v, tracker, refiner, InferenceMode.offline())
        b = infer(v, tracker, refiner, InferenceMode.semi_online(v.T))
        c = infer(v, tracker, refiner, InferenceMode.semi_online(10 * v.T))
        for other in (b, c):
            assert np.array_equal(a.mask_logits, other.mask_logits)
            assert np.array_equal(a.class_probs, other.class_probs)


def test_semi_online_refines_disjoint_windows(setup):
    videos, tracker, refiner = setup
    v = videos[0]
    out = run_tracker(v, *tracker)
    pix = flat_pixels(v)
    pred = infer(v, tracker, refiner, InferenceMode.semi_online(3))
    probs = []
    for start in (0, 3, 6):
        ref = refine_video(Tensor(out.q_tr[start : start + 3]), *refiner, pix[start : start + 3])
        np.testing.assert_array_equal(pred.mask_logits[start : start + 3], ref.mask_logits.data)
        probs.append(class_probs(ref.class_logits.data))
    np.testing.assert_allclose(pred.class_probs, np.mean(probs, axis=0), atol=1e-15)


def test_online_ignores_refiner(setup):
    videos, tracker, refiner = setup
    a = infer(videos[1], tracker, refiner, InferenceMode.online())
    b = infer(videos[1], tracker, None, InferenceMode.online())
    assert np.array_equal(a.mask_logits, b.mask_logits) and np.array_equal(a.class_probs, b.class_probs)
    out = run_tracker(videos[1], *tracker)
    np.testing.assert_allclose(a.class_probs, class_probs(out.class_logits).mean(axis=0))


def test_refiner_required_for_refined_modes(setup):
    videos, tracker, _ = setup
    for mode in (InferenceMode.offline(), InferenceMode.semi_online(2)):
        with pytest.raises(ConfigError):
            infer(videos[0], tracker, None, mode)


def test_occlusion_buckets_terciles():
    assert occlusion_buckets([0.5, 0.1, 0.9, 0.3, 0.3, 0.7]) == ["mid", "low", "high", "low", "mid", "high"]
    assert occlusion_buckets([0.2]) == ["low"]


def test_report_aggregates_and_serializes(setup):
    videos, tracker, refiner = setup
    rep = evaluate(videos, tracker, refiner, InferenceMode.offline())
    assert rep.mode == "offline" and len(rep.videos) == len(videos)
    for key in ("id_switches", "association_accuracy", "mean_iou"):
        assert rep.aggregate[key] == pytest.approx(np.mean([r[key] for r in rep.videos]))
    for r in rep.videos:
        assert 0 <= r["association_accuracy"] <= 1 and 0 <= r["mean_iou"] <= 1 and r["id_switches"] >= 0
        assert 0 <= r["ap50"] <= 1 and r["ap75"] <= r["ap50"] + 1e-12
    doc = json.loads(rep.to_json())
    assert "runtime" not in doc and "runtime" in json.loads(rep.to_json(include_runtime=True))
    assert rep.runtime["total_seconds"] >= 0
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(rows) == len(videos) and float(rows[0]["ap50"]) == pytest.approx(rep.videos[0]["ap50"])
    assert rep.to_json() == evaluate(videos, tracker, refiner, InferenceMode.offline()).to_json()


def test_ground_truth_prediction_scores_perfectly(setup):
    v = setup[0][0]
    gt = v.gt_masks()
    G = gt.shape[0]
    logits = np.where(gt.transpose(1, 0, 2), 5.0, -5.0)
    probs = np.zeros((G, SYN.C + 1))
    probs[np.arange(G), [g.class_label for g in v.gt]] = 1.0
    m = video_metrics(VideoPrediction(logits, probs), v)
    assert m["id_switches"] == 0 and m["association_accuracy"] == 1.0 and m["mean_iou"] == 1.0
    assert m["ap50"] == 1.0 and m["ap75"] == 1.0
    empty = video_metrics(VideoPrediction(np.full_like(logits, -5.0), probs), v)
    assert empty["ap50"] == 0.0


def test_baseline_is_stub_through_matching_chain(setup):
    videos = setup[0]
    rep = evaluate_baseline(videos, SYN)
    assert rep.mode == "baseline"
    pred = baseline_prediction(videos[0], SYN)
    assert pred.mask_logits.shape == (SYN.T, SYN.N_slots, 64)
    assert rep.videos[0] == {**rep.videos[0], **video_metrics(pred, videos[0])}


def test_parameter_counts_near_targets():
    rep = parameter_report("paper-r50")
    for name in ("tracker", "refiner"):
        assert abs(rep[name]["relative_error"]) <= 0.2
    with pytest.raises(ConfigError):
        parameter_report("swin-l")
