"""Staged training: tracker first (segmenter stub frozen), then the refiner
(tracker frozen). Also AdamW, clip sampling and the DVCK checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, EvaluationError, FormatError
from .losses import (
    ClipTargets, LossWeights, MatchSourceRule, match_refiner, match_tracker,
    refiner_loss_terms, tracker_loss_terms, video_class_logits_from_frames,
)
from .refiner import BlockToggles, RefinerConfig, RefinerParams, init_refiner, refine_video
from .synth import SynthConfig, SynthVideo, stub_class_weights
from .tracker import TrackerConfig, TrackerParams, init_tracker, matching_chain, predict, track_video
from .modules import MLP, Linear
from .tree import named_leaves, replace_leaves

log = logging.getLogger(__name__)

STAGES = ("tracker", "refiner")


@dataclass
class TrainConfig:
    stage: str = "tracker"
    base_lr: float = 1e-4
    weight_decay: float = 5e-2
    max_iter: int = 3000
    lr_drop_frac: float = 0.7
    lr_drop_factor: float = 0.1
    clip_len: int | None = None
    batch_size: int = 1
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    refiner_heads_from_tracker: bool = True
    augment: bool = True
    head_init: str = "stub"
    decay_vectors: bool = False
    aux_loss: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.tracker, dict):
            self.tracker = TrackerConfig(**self.tracker)
        if isinstance(self.refiner, dict):
            d = dict(self.refiner)
            if isinstance(d.get("toggles"), dict):
                d["toggles"] = BlockToggles(**d["toggles"])
            self.refiner = RefinerConfig(**d)

    @property
    def effective_clip_len(self) -> int:
        if self.clip_len is not None:
            return self.clip_len
        return 5 if self.stage == "tracker" else 21

    @property
    def lr_drop_at(self) -> int:
        return int(math.floor(self.lr_drop_frac * self.max_iter))

    def lr_at(self, it: int) -> float:
        return self.base_lr * (self.lr_drop_factor if it >= self.lr_drop_at and self.max_iter > 0 else 1.0)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.max_iter < 0 or self.batch_size < 1:
            raise ConfigError("max_iter must be >= 0 and batch_size >= 1")
        if self.max_iter > 0 and not 0 <= self.lr_drop_at < self.max_iter:
            raise ConfigError(f"lr_drop_at={self.lr_drop_at} must be < max_iter={self.max_iter}")
        if self.head_init not in ("stub", "random"):
            raise ConfigError(f"head_init must be 'stub' or 'random', got {self.head_init!r}")
        if self.effective_clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if not (self.base_lr >= 0 and self.weight_decay >= 0):
            raise ConfigError("base_lr and weight_decay must be >= 0")
        self.tracker.validate()
        self.refiner.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments stored flat, in parameter order."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "OptimizerState":
        n = sum(p.data.size for p in params)
        return cls(np.zeros(n), np.zeros(n))


def optimizer_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float, wd):
    """One AdamW step with decoupled weight decay; returns ``(new_params, state)``.

    ``wd`` is a scalar or one decay coefficient per parameter.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads disagree in length")
    sizes = [p.data.size for p in params]
    if sum(sizes) != state.m.size:
        raise ValueError("optimizer state does not match the parameter count")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter {params[i].shape}")
    g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
    if not math.isfinite(float(np.sum(g))) and not np.isfinite(g).all():
        bad = next(i for i, x in enumerate(grads) if not np.all(np.isfinite(x)))
        raise EvaluationError(f"non-finite gradient for parameter {bad}; step aborted")
    shrink = np.repeat(np.broadcast_to(np.asarray(wd, dtype=np.float64), (len(params),)), sizes)
    shrink *= -lr
    shrink += 1.0
    new = np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)
    new *= shrink
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    # moments updated in place; ``g`` and ``shrink`` are reused as scratch
    state.m *= b1
    np.multiply(g, 1 - b1, out=shrink)
    state.m += shrink
    g *= g
    g *= 1 - b2
    state.v *= b2
    state.v += g
    np.divide(state.v, c2, out=g)
    np.sqrt(g, out=g)
    g += state.eps
    np.divide(state.m, g, out=g)
    g *= lr / c1
    new -= g
    out, offset = [], 0
    for p, n in zip(params, sizes):
        out.append(Tensor._wrap(new[offset : offset + n].reshape(p.shape).copy(), False))
        offset += n
    return out, state


# --- clips ------------------------------------------------------------------


@dataclass
class Clip:
    video_index: int
    start: int
    queries: np.ndarray  # [L, N, D]
    pixels: np.ndarray  # [L, P, D]
    targets: ClipTargets
    instance_ids: np.ndarray

    @property
    def stop(self) -> int:
        return self.start + self.queries.shape[0]


def video_targets(video: SynthVideo) -> ClipTargets:
    return ClipTargets(np.array([g.class_label for g in video.gt], dtype=np.int64), video.gt_masks())


def flat_pixels(video: SynthVideo, start: int = 0, stop: int | None = None) -> np.ndarray:
    feats = video.pixel_features[start:stop]
    T, H, W, D = feats.shape
    return feats.astype(np.float64).reshape(T, H * W, D)


def window(video: SynthVideo, start: int, length: int, video_index: int = 0) -> Clip:
    """Frames ``[start, start+length)`` with clip-local targets (absent instances dropped)."""
    stop = min(start + length, video.T)
    masks = np.stack([g.masks[start:stop].reshape(stop - start, -1) for g in video.gt]) if video.gt else \
        np.zeros((0, stop - start, int(np.prod(video.pixel_features.shape[1:3]))), dtype=bool)
    keep = np.flatnonzero(masks.any(axis=(1, 2)))
    labels = np.array([video.gt[i].class_label for i in keep], dtype=np.int64)
    return Clip(
        video_index,
        start,
        video.queries[start:stop].astype(np.float64),
        flat_pixels(video, start, stop),
        ClipTargets(labels, masks[keep]),
        np.array([video.gt[i].instance_id for i in keep], dtype=np.int64),
    )


def sample_clip(video: SynthVideo, clip_len: int, rng: np.random.Generator, video_index: int = 0) -> Clip:
    """Uniformly placed contiguous window; the whole video when ``clip_len >= T``."""
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    if clip_len >= video.T:
        return window(video, 0, video.T, video_index)
    start = int(rng.integers(0, video.T - clip_len + 1))
    return window(video, start, clip_len, video_index)


def haar_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def augment_clip(clip: Clip, synth: SynthConfig, rng: np.random.Generator) -> Clip:
    """Random orthogonal mixing inside the mask-coefficient and appearance channel groups.

    The same rotation is applied to queries and pixel features, so every
    query-pixel inner product (hence the masks and labels) is unchanged while
    per-instance codes become fresh.
    """
    q, pix = rotate_channel_groups((clip.queries, clip.pixels), synth, rng)
    return dataclasses.replace(clip, queries=q, pixels=pix)


def rotate_channel_groups(arrays, synth: SynthConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Copies of ``arrays`` with one shared random rotation per channel group."""
    out = [np.array(a, dtype=np.float64) for a in arrays]
    for sl in (synth.mask_slice, synth.appearance_slice):
        n = sl.stop - sl.start
        if n < 2:
            continue
        R = haar_orthogonal(rng, n)
        for a in out:
            a[..., sl] = a[..., sl] @ R
    return out


def clip_stub(clip: Clip, synth: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Segmenter-stub class and mask logits for a clip in raw slot order."""
    return clip.queries @ stub_class_weights(synth), clip.queries @ np.swapaxes(clip.pixels, -1, -2)


def stub_heads(D: int, synth: SynthConfig, shift: float = 10.0) -> tuple[Linear, MLP]:
    """Class/mask heads that reproduce the segmenter stub's decoding.

    The class head is the stub's fixed projection. The mask MLP is an
    identity map: inputs are shifted by ``shift`` into the linear regime of
    GELU and shifted back after the last layer.
    """
    eye = np.eye(D)
    class_head = Linear(Tensor(stub_class_weights(synth)), Tensor(np.zeros(synth.C + 1)))
    mask_head = MLP([
        Linear(Tensor(eye), Tensor(np.full(D, shift))),
        Linear(Tensor(eye), Tensor(np.zeros(D))),
        Linear(Tensor(eye), Tensor(np.full(D, -shift))),
    ])
    return class_head, mask_head


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    params: Any
    log: list[dict]
    config: TrainConfig


def _check_dataset(cfg: TrainConfig, synth: SynthConfig, videos: list[SynthVideo]) -> None:
    if not videos:
        raise ConfigError("training dataset is empty")
    D = videos[0].queries.shape[-1]
    C = synth.C
    model = cfg.tracker if cfg.stage == "tracker" else cfg.refiner
    if model.D != D or model.C != C or cfg.tracker.D != D or cfg.tracker.C != C:
        raise ConfigError(f"model (D={model.D}, C={model.C}) does not fit dataset (D={D}, C={C})")
    grids = {v.pixel_features.shape[1:3] for v in videos}
    if len(grids) != 1:
        raise ConfigError(f"videos disagree on the pixel grid: {sorted(grids)}")


def _permute_slots(arr: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return np.take_along_axis(arr, perms[:, :, None], axis=1)


def _with_aux(terms: dict, aux: list[dict]) -> dict:
    """Deep supervision: intermediate-block losses reuse the final block's assignment."""
    if not aux:
        return terms
    extra = aux[0]["total"]
    for a in aux[1:]:
        extra = ad.add(extra, a["total"])
    return {**terms, "aux": extra, "total": ad.add(terms["total"], extra)}


def _item(x: Tensor, b: int) -> Tensor:
    """Batch element ``b`` of a tensor with a leading batch axis."""
    return ad.reshape(ad.take(x, [b], axis=0), x.shape[1:])


def _mean_terms(per_item: list[dict]) -> dict:
    out = {}
    for k in per_item[0]:
        acc = per_item[0][k]
        for d in per_item[1:]:
            acc = ad.add(acc, d[k])
        out[k] = ad.mul(acc, 1.0 / len(per_item))
    return out


def _run(cfg: TrainConfig, params, step_fn, log_path) -> TrainResult:
    names_leaves = list(named_leaves(params))
    current = [t for _, t in names_leaves]
    decays = [cfg.weight_decay if (t.ndim >= 2 or cfg.decay_vectors) else 0.0 for t in current]
    state = OptimizerState.zeros_like(current)
    records = []
    sink = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.max_iter):
            lr = cfg.lr_at(it)
            rule = MatchSourceRule(cfg.max_iter, it)
            with Tape() as tape:
                watched = tape.watch(*current)
                model = replace_leaves(params, watched)
                terms = step_fn(model, rule)
                loss = terms["total"]
                total = tape.gradient(loss, watched)
            loss_sum = float(loss.data)
            if not math.isfinite(loss_sum):
                raise EvaluationError(f"non-finite loss at iteration {it}")
            acc = {k: float(v.data) for k, v in terms.items()}
            current, state = optimizer_step(current, total, state, lr, decays)
            rec = {"iter": it, "lr": lr, "source": "model" if rule.use_model else "early"}
            rec.update({("loss" if k == "total" else f"loss_{k}"): v for k, v in acc.items()})
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
            if it % 500 == 0:
                log.info("%s iter %d lr %.2e loss %.4f", cfg.stage, it, lr, loss_sum)
    finally:
        if sink:
            sink.close()
    return TrainResult(replace_leaves(params, current), records, cfg)


def train_tracker(cfg: TrainConfig, videos: list[SynthVideo], synth: SynthConfig, init: TrackerParams | None = None, log_path=None) -> TrainResult:
    cfg.validate()
    _check_dataset(cfg, synth, videos)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    if init is None:
        init = init_tracker(cfg.tracker, rng)
        if cfg.head_init == "stub":
            cls, mask = stub_heads(cfg.tracker.D, synth)
            init = dataclasses.replace(init, class_head=cls, mask_head=mask)
    params = init
    w = cfg.loss

    def clip_terms(model, rule, clip, seq, hidden, b=None):
        pick = (lambda x: x) if b is None else (lambda x: _item(x, b))
        cls_logits, mask_logits = pick(seq.class_logits), pick(seq.mask_logits)
        perms = seq.perms if b is None else seq.perms[b]
        early = None
        if not rule.use_model:
            cls, masks = clip_stub(clip, synth)
            early = (_permute_slots(cls, perms), _permute_slots(masks, perms))
        assignment = match_tracker(early, (cls_logits.data, mask_logits.data), clip.targets, rule, w)
        terms = tracker_loss_terms(cls_logits, mask_logits, clip.targets, assignment, w)
        aux = [tracker_loss_terms(pick(c), pick(m), clip.targets, assignment, w) for c, m in hidden]
        return _with_aux(terms, aux)

    def track(model, queries, pixels):
        seq = track_video(queries, model, cfg.tracker, pixels, keep_intermediate=cfg.aux_loss)
        return seq, [predict(model, h, pixels) for h in seq.intermediate]

    def step(model: TrackerParams, rule: MatchSourceRule):
        clips = []
        for _ in range(cfg.batch_size):
            vi = int(rng.integers(len(videos)))
            clip = sample_clip(videos[vi], cfg.effective_clip_len, rng, vi)
            clips.append(augment_clip(clip, synth, rng) if cfg.augment else clip)
        if len({c.queries.shape for c in clips}) == 1 and len(clips) > 1:
            seq, hidden = track(model, np.stack([c.queries for c in clips]), np.stack([c.pixels for c in clips]))
            per_clip = [clip_terms(model, rule, c, seq, hidden, b) for b, c in enumerate(clips)]
        else:
            per_clip = []
            for c in clips:
                seq, hidden = track(model, c.queries, c.pixels)
                per_clip.append(clip_terms(model, rule, c, seq, hidden))
        return _mean_terms(per_clip)

    return _run(cfg, params, step, log_path)


@dataclass
class TrackerOutput:
    q_tr: np.ndarray  # [T, N, D]
    class_logits: np.ndarray  # [T, N, C+1]
    mask_logits: np.ndarray  # [T, N, P]
    perms: np.ndarray


def run_tracker(video: SynthVideo, params: TrackerParams, cfg: TrackerConfig) -> TrackerOutput:
    """Full-video online tracking (no tape)."""
    seq = track_video(video.queries.astype(np.float64), params, cfg, flat_pixels(video))
    return TrackerOutput(seq.q_tr.data, seq.class_logits.data, seq.mask_logits.data, seq.perms)


def heads_from_tracker(refiner: RefinerParams, tracker: TrackerParams) -> RefinerParams:
    return dataclasses.replace(
        refiner, class_head=tracker.class_head, mask_head=tracker.mask_head
    )


def train_refiner(
    cfg: TrainConfig,
    videos: list[SynthVideo],
    synth: SynthConfig,
    tracker: TrackerParams,
    init: RefinerParams | None = None,
    log_path=None,
    tracker_outputs: list[TrackerOutput] | None = None,
) -> TrainResult:
    """Train the refiner on windows of the frozen tracker's full-video outputs."""
    if tracker is None:
        raise ConfigError("refiner training requires a tracker checkpoint")
    cfg.validate()
    _check_dataset(cfg, synth, videos)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    if init is None:
        init = init_refiner(cfg.refiner, rng)
        if cfg.refiner_heads_from_tracker:
            init = heads_from_tracker(init, tracker)
    outs = tracker_outputs or [run_tracker(v, tracker, cfg.tracker) for v in videos]
    pixels = [flat_pixels(v) for v in videos]
    w = cfg.loss

    def one_window(model: RefinerParams, rule: MatchSourceRule):
        vi = int(rng.integers(len(videos)))
        video, out = videos[vi], outs[vi]
        L = min(cfg.effective_clip_len, video.T)
        start = int(rng.integers(0, video.T - L + 1))
        stop = start + L
        masks = video.gt_masks()[:, start:stop]
        keep = np.flatnonzero(masks.any(axis=(1, 2)))
        targets = ClipTargets(np.array([video.gt[i].class_label for i in keep], dtype=np.int64), masks[keep])
        q_tr, pix = out.q_tr[start:stop], pixels[vi][start:stop]
        if cfg.augment:
            q_tr, pix = rotate_channel_groups((q_tr, pix), synth, rng)
        ref = refine_video(Tensor(q_tr), model, cfg.refiner, pix, cfg.aux_loss)
        early = (video_class_logits_from_frames(out.class_logits[start:stop]), out.mask_logits[start:stop])
        model_pred = (ref.class_logits.data, ref.mask_logits.data)
        assignment = match_refiner(early, model_pred, targets, rule, w)
        terms = refiner_loss_terms(ref.class_logits, ref.mask_logits, targets, assignment, w)
        aux = [refiner_loss_terms(h.class_logits, h.mask_logits, targets, assignment, w) for h in ref.intermediate]
        return _with_aux(terms, aux)

    def step(model: RefinerParams, rule: MatchSourceRule):
        return _mean_terms([one_window(model, rule) for _ in range(cfg.batch_size)])

    return _run(cfg, init, step, log_path)


# --- checkpoints ------------------------------------------------------------

CK_MAGIC = b"DVCK"
CK_VERSION = 1


def _config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def write_checkpoint(path, kind: str, cfg, params) -> None:
    """``kind`` is ``tracker`` or ``refiner``; tensors stored as little-endian float64."""
    entries, chunks, offset = [], [], 0
    for name, t in named_leaves(params):
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {"kind": kind, "config": _config_dict(cfg), "tensors": entries}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CK_MAGIC)
        fh.write(struct.pack("<I", CK_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def tracker_config_from_dict(d: dict) -> TrackerConfig:
    return TrackerConfig(**d)


def refiner_config_from_dict(d: dict) -> RefinerConfig:
    d = dict(d)
    d["toggles"] = BlockToggles(**d.get("toggles", {}))
    return RefinerConfig(**d)


def read_checkpoint(path):
    """Returns ``(kind, config, params)``."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CK_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CK_MAGIC!r}", 0)
    if len(data) < 16:
        raise FormatError("truncated header", len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (meta_len,) = struct.unpack_from("<Q", data, 8)
    if 16 + meta_len > len(data):
        raise FormatError("metadata truncated", len(data))
    try:
        meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", 16) from None
    kind = meta.get("kind")
    if kind == "tracker":
        cfg = tracker_config_from_dict(meta["config"])
        skeleton = init_tracker(cfg, np.random.default_rng(0))
    elif kind == "refiner":
        cfg = refiner_config_from_dict(meta["config"])
        skeleton = init_refiner(cfg, np.random.default_rng(0))
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}", 16)
    base = 16 + meta_len
    expected = [name for name, _ in named_leaves(skeleton)]
    names = [e["name"] for e in meta["tensors"]]
    if names != expected:
        raise FormatError("tensor manifest does not match the architecture in the metadata", 16)
    tensors = []
    for e, (_, ref) in zip(meta["tensors"], named_leaves(skeleton)):
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise FormatError(f"tensor {e['name']!r} truncated", start)
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(e["shape"])
        if arr.shape != ref.shape:
            raise FormatError(f"tensor {e['name']!r} has shape {arr.shape}, expected {ref.shape}", start)
        tensors.append(Tensor(arr))
    return kind, cfg, replace_leaves(skeleton, tensors)
