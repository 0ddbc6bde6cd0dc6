"""Inference modes, per-video tracking metrics and report writing."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .engine import TrackerOutput, flat_pixels, run_tracker
from .errors import ConfigError
from .losses import class_probs
from .metrics import (
    association_accuracy, average_precision, frame_matches, id_switches, mean_frame_iou, tube_iou,
)
from .refiner import RefinerConfig, RefinerParams, init_refiner, refine_video
from .synth import SynthVideo, stub_predictions
from .tracker import TrackerConfig, TrackerParams, init_tracker, matching_chain
from .tree import count_parameters

MODES = ("online", "semi_online", "offline")
AP_THRESHOLDS = (0.5, 0.75)


@dataclass(frozen=True)
class InferenceMode:
    kind: str = "online"
    clip_len: int | None = None

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"inference mode must be one of {MODES}, got {self.kind!r}")
        if self.kind == "semi_online" and (self.clip_len is None or self.clip_len < 1):
            raise ConfigError("semi_online mode needs clip_len >= 1")

    @classmethod
    def online(cls) -> "InferenceMode":
        return cls("online")

    @classmethod
    def semi_online(cls, clip_len: int) -> "InferenceMode":
        return cls("semi_online", clip_len)

    @classmethod
    def offline(cls) -> "InferenceMode":
        return cls("offline")

    @classmethod
    def parse(cls, text: str) -> "InferenceMode":
        """``online`` | ``offline`` | ``semi_online:<clip_len>``."""
        kind, _, arg = text.partition(":")
        if kind == "semi_online":
            try:
                return cls.semi_online(int(arg))
            except ValueError:
                raise ConfigError(f"bad semi_online clip length in {text!r}") from None
        if arg:
            raise ConfigError(f"mode {kind!r} takes no argument")
        return cls(kind)

    def label(self) -> str:
        return f"semi_online:{self.clip_len}" if self.kind == "semi_online" else self.kind


@dataclass
class VideoPrediction:
    mask_logits: np.ndarray  # [T, N, P]
    class_probs: np.ndarray  # [N, C+1] video-level

    @property
    def masks(self) -> np.ndarray:
        return self.mask_logits > 0

    @property
    def labels(self) -> np.ndarray:
        return self.class_probs[:, :-1].argmax(axis=1)

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs[:, :-1].max(axis=1)


def infer(
    video: SynthVideo,
    tracker: tuple[TrackerParams, TrackerConfig],
    refiner: tuple[RefinerParams, RefinerConfig] | None = None,
    mode: InferenceMode = InferenceMode(),
    tracker_output: TrackerOutput | None = None,
) -> VideoPrediction:
    """Run one video; online scores are mean per-frame class probabilities."""
    out = tracker_output or run_tracker(video, *tracker)
    if mode.kind == "online":
        return VideoPrediction(out.mask_logits, class_probs(out.class_logits).mean(axis=0))
    if refiner is None:
        raise ConfigError(f"{mode.label()} inference needs a refiner checkpoint")
    params, cfg = refiner
    pixels = flat_pixels(video)
    T = out.q_tr.shape[0]
    c = T if mode.kind == "offline" else mode.clip_len
    masks, probs = [], []
    for start in range(0, T, c):
        stop = min(start + c, T)
        ref = refine_video(Tensor(out.q_tr[start:stop]), params, cfg, pixels[start:stop])
        masks.append(ref.mask_logits.data)
        probs.append(class_probs(ref.class_logits.data))
    mask_logits = masks[0] if len(masks) == 1 else np.concatenate(masks, axis=0)
    return VideoPrediction(mask_logits, np.mean(probs, axis=0) if len(probs) > 1 else probs[0])


def baseline_prediction(video: SynthVideo, synth_cfg, metric: str = "cosine") -> VideoPrediction:
    """Tracker blocks disabled: the adjacent-frame Hungarian chain over stub predictions."""
    perms = matching_chain(video.queries.astype(np.float64), metric)
    stub = stub_predictions(video, synth_cfg)
    mask_logits = np.take_along_axis(stub.mask_logits, perms[:, :, None], axis=1)
    logits = np.take_along_axis(stub.class_logits, perms[:, :, None], axis=1)
    return VideoPrediction(mask_logits, class_probs(logits).mean(axis=0))


# --- metrics ----------------------------------------------------------------


def tube_ap(pred: VideoPrediction, gt_masks: np.ndarray, gt_labels: np.ndarray, thresholds=AP_THRESHOLDS) -> dict:
    iou = tube_iou(pred.masks, gt_masks)
    return {
        f"ap{int(round(th * 100))}": average_precision(pred.scores, pred.labels, iou, gt_labels, th)
        for th in thresholds
    }


def video_metrics(pred: VideoPrediction, video: SynthVideo) -> dict:
    gt = video.gt_masks()
    labels = np.array([g.class_label for g in video.gt], dtype=np.int64)
    visible = gt.any(axis=2)
    matches = frame_matches(pred.masks, gt)
    row = {
        "id_switches": id_switches(matches),
        "association_accuracy": association_accuracy(matches, visible),
        "mean_iou": mean_frame_iou(pred.masks, gt),
    }
    row.update(tube_ap(pred, gt, labels))
    return row


METRIC_KEYS = ("id_switches", "association_accuracy", "mean_iou", "ap50", "ap75")
BUCKETS = ("low", "mid", "high")


def occlusion_buckets(levels) -> list[str]:
    """Tercile buckets of realized occlusion; ties broken by video order."""
    levels = np.asarray(levels, dtype=np.float64)
    order = np.argsort(levels, kind="stable")
    out = [""] * len(levels)
    n = len(levels)
    for rank, i in enumerate(order):
        out[i] = BUCKETS[min(3 * rank // max(n, 1), 2)]
    return out


def _mean(rows: list[dict], key: str) -> float:
    vals = [r[key] for r in rows if not (isinstance(r[key], float) and np.isnan(r[key]))]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    mode: str
    videos: list[dict]
    aggregate: dict
    buckets: dict
    runtime: dict = field(default_factory=dict)

    def to_json(self, include_runtime: bool = False) -> str:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime")
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["video", "occlusion", "bucket", *METRIC_KEYS]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.videos:
            writer.writerow({k: row[k] for k in cols})
        return buf.getvalue()


def build_report(mode_label: str, videos: list[SynthVideo], preds: list[VideoPrediction], seconds=None) -> EvalReport:
    levels = [v.occlusion_level() for v in videos]
    buckets = occlusion_buckets(levels)
    rows = []
    for i, (v, p) in enumerate(zip(videos, preds)):
        row = {"video": i, "occlusion": levels[i], "bucket": buckets[i]}
        row.update(video_metrics(p, v))
        rows.append(row)
    aggregate = {k: _mean(rows, k) for k in METRIC_KEYS}
    per_bucket = {
        b: {k: _mean([r for r in rows if r["bucket"] == b], k) for k in METRIC_KEYS}
        for b in BUCKETS
        if any(r["bucket"] == b for r in rows)
    }
    runtime = {}
    if seconds is not None:
        runtime = {"total_seconds": float(np.sum(seconds)), "seconds_per_video": float(np.mean(seconds))}
    return EvalReport(mode_label, rows, aggregate, per_bucket, runtime)


def evaluate(
    videos: list[SynthVideo],
    tracker: tuple[TrackerParams, TrackerConfig],
    refiner: tuple[RefinerParams, RefinerConfig] | None = None,
    mode: InferenceMode = InferenceMode(),
    tracker_outputs: list[TrackerOutput] | None = None,
) -> EvalReport:
    preds, seconds = [], []
    for i, v in enumerate(videos):
        t0 = time.perf_counter()
        out = tracker_outputs[i] if tracker_outputs else None
        preds.append(infer(v, tracker, refiner, mode, out))
        seconds.append(time.perf_counter() - t0)
    return build_report(mode.label(), videos, preds, seconds)


def evaluate_baseline(videos: list[SynthVideo], synth_cfg, metric: str = "cosine") -> EvalReport:
    return build_report("baseline", videos, [baseline_prediction(v, synth_cfg, metric) for v in videos])


# --- parameter-count presets --------------------------------------------------

PRESETS = {
    "paper-r50": {
        "tracker": TrackerConfig(D=256, C=40, num_layers=6, num_heads=8, ffn_mult=8),
        "refiner": RefinerConfig(D=256, C=40, num_layers=6, num_heads=8, ffn_mult=8, kernel_size=5),
        "targets": {"tracker": 9.68e6, "refiner": 14.41e6},
    },
}


def parameter_report(preset: str = "paper-r50") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    rng = np.random.default_rng(0)
    counts = {
        "tracker": count_parameters(init_tracker(p["tracker"], rng)),
        "refiner": count_parameters(init_refiner(p["refiner"], rng)),
    }
    return {
        name: {
            "params": counts[name],
            "target": p["targets"][name],
            "relative_error": (counts[name] - p["targets"][name]) / p["targets"][name],
        }
        for name in counts
    }
