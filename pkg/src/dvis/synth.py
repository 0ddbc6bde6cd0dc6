"""Synthetic stand-in for a frozen per-frame segmenter.

Each video holds, per frame, ``N_slots`` instance-query embeddings in shuffled
slot order, a ``H x W x D`` pixel-feature map, and ground-truth tracks.
Embedding layout (``D`` channels)::

    [0]                 bias channel: +bias in queries, -1 in every pixel
    [1, 1+C)            class channels: class_scale * one_hot(label)
    [1+C, 1+C+M)        mask coefficients: orthonormal code per instance,
                        written into the pixels the instance covers;
                        ``mask_drift > 0`` turns the codes into a random
                        walk (kept orthonormal), so each frame's pixels
                        carry that frame's codes
    [1+C+M, D)          appearance: per-instance code with random-walk drift

Observation noise perturbs the class and appearance channels of every query;
mask coefficients stay exact, so ``<query, pixel>`` decodes the instance mask
(positive inside, negative elsewhere). Distractors are instances that copy an
earlier instance's class and (nearly) its appearance, so raw-embedding
similarity struggles to tell the pair apart. Absent instances leave a
background query in their slot: bias channel plus small noise, which decodes
to an empty mask and the no-object class.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DVSY"
VERSION = 1


@dataclass
class SynthConfig:
    num_videos: int = 20
    T: int = 24
    N_slots: int = 10
    N_inst: int = 8
    D: int = 64
    C: int = 4
    grid: tuple[int, int] = (24, 24)
    occlusion_prob: float = 0.3
    occlusion_len: tuple[int, int] = (2, 6)
    sigma_motion: float = 0.02
    sigma_obs: float = 0.35
    mask_drift: float = 0.0
    distractor_prob: float = 0.3
    seed: int = 0
    mask_dim: int = 16
    bias: float = 0.5
    class_scale: float = 1.5
    appearance_scale: float = 2.0
    background_scale: float = 0.1
    pixel_noise: float = 0.04
    distractor_jitter: float = 0.25
    size_range: tuple[int, int] = (4, 8)
    max_speed: float = 0.6

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.occlusion_len = tuple(int(v) for v in self.occlusion_len)
        self.size_range = tuple(int(v) for v in self.size_range)
        self.validate()

    def validate(self) -> None:
        if self.N_inst > self.N_slots:
            raise ConfigError(f"N_inst={self.N_inst} exceeds N_slots={self.N_slots}")
        if self.T < 1 or self.N_inst < 0 or self.num_videos < 0:
            raise ConfigError("T must be >= 1 and counts non-negative")
        if self.mask_dim < self.N_inst:
            raise ConfigError(f"mask_dim={self.mask_dim} < N_inst={self.N_inst}")
        if 1 + self.C + self.mask_dim > self.D:
            raise ConfigError(f"D={self.D} too small for C={self.C}, mask_dim={self.mask_dim}")
        for name in ("sigma_motion", "sigma_obs", "mask_drift", "background_scale", "pixel_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        lo, hi = self.occlusion_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad occlusion_len {self.occlusion_len}")
        if not 0 <= self.occlusion_prob <= 1 or not 0 <= self.distractor_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")

    @property
    def class_slice(self) -> slice:
        return slice(1, 1 + self.C)

    @property
    def mask_slice(self) -> slice:
        return slice(1 + self.C, 1 + self.C + self.mask_dim)

    @property
    def appearance_slice(self) -> slice:
        return slice(1 + self.C + self.mask_dim, self.D)

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


@dataclass
class GroundTruthTrack:
    instance_id: int
    class_label: int
    masks: np.ndarray  # [T, H, W] bool
    first_appearance: int

    @property
    def visible(self) -> np.ndarray:
        return self.masks.reshape(self.masks.shape[0], -1).any(axis=1)


@dataclass
class SynthVideo:
    queries: np.ndarray  # [T, N_slots, D] float32, slot order shuffled per frame
    pixel_features: np.ndarray  # [T, H, W, D] float32
    gt: list[GroundTruthTrack]
    planted: np.ndarray  # [T, N_slots] source row per slot (< N_inst: that instance)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.queries.shape[0]

    def gt_masks(self) -> np.ndarray:
        """``[N_inst, T, H*W]`` boolean ground-truth masks."""
        if not self.gt:
            T, H, W = self.pixel_features.shape[:3]
            return np.zeros((0, T, H * W), dtype=bool)
        return np.stack([g.masks.reshape(g.masks.shape[0], -1) for g in self.gt])

    def occlusion_level(self) -> float:
        """Fraction of instance-frames with no visible pixels."""
        if not self.gt:
            return 0.0
        return float(1.0 - np.mean([g.visible.mean() for g in self.gt]))


@dataclass
class Prediction:
    """Per-frame class logits ``[T, N, C+1]`` and mask logits ``[T, N, H*W]``."""

    class_logits: np.ndarray
    mask_logits: np.ndarray

    def masks(self) -> np.ndarray:
        return self.mask_logits > 0

    def class_probs(self) -> np.ndarray:
        z = self.class_logits - self.class_logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


# --- generation ---------------------------------------------------------------


def video_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, video index), independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 0x5EED]))


def _unit(rng, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _latent_codes(cfg: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Class labels, orthonormal mask codes, appearance codes, distractor pairs."""
    n = cfg.N_inst
    da = cfg.D - 1 - cfg.C - cfg.mask_dim
    labels = rng.integers(0, cfg.C, size=n)
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.mask_dim, cfg.mask_dim)))
    mask_codes = basis[:, :n].T.copy()
    app = np.zeros((n, da))
    pairs = []
    for i in range(n):
        app[i] = cfg.appearance_scale * _unit(rng, da) if da else app[i]
        if i > 0 and da and rng.random() < cfg.distractor_prob:
            j = int(rng.integers(0, i))
            labels[i] = labels[j]
            jitter = cfg.distractor_jitter * _unit(rng, da)
            v = app[j] + cfg.appearance_scale * jitter
            app[i] = cfg.appearance_scale * v / np.linalg.norm(v)
            pairs.append((j, i))
    return labels, mask_codes, app, pairs


def _drifting_codes(cfg: SynthConfig, codes: np.ndarray, rng) -> np.ndarray:
    """Per-frame mask codes ``[T, N_inst, M]``: a random walk kept orthonormal by polar projection."""
    out = np.repeat(codes[None], cfg.T, axis=0)
    if cfg.mask_drift == 0 or codes.size == 0:
        return out
    for t in range(1, cfg.T):
        u, _, vt = np.linalg.svd(out[t - 1] + cfg.mask_drift * rng.normal(size=codes.shape), full_matrices=False)
        out[t] = u @ vt
    return out


def _rectangles(cfg: SynthConfig, rng) -> np.ndarray:
    """Boolean masks ``[N_inst, T, H, W]`` of moving, depth-ordered rectangles."""
    H, W = cfg.grid
    n, T = cfg.N_inst, cfg.T
    lo, hi = cfg.size_range
    raw = np.zeros((n, T, H, W), dtype=bool)
    for i in range(n):
        h, w = rng.integers(lo, hi + 1, size=2)
        h, w = min(h, H), min(w, W)
        pos = np.array([rng.uniform(0, H - h), rng.uniform(0, W - w)])
        vel = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
        limit = np.array([H - h, W - w], dtype=float)
        for t in range(T):
            r, c = np.round(pos).astype(int)
            raw[i, t, r : r + h, c : c + w] = True
            pos = pos + vel
            for k in range(2):
                if pos[k] < 0 or pos[k] > limit[k]:
                    vel[k] = -vel[k]
                    pos[k] = np.clip(pos[k], 0, limit[k])
    # Occlusion windows: instance hidden entirely for a contiguous span.
    for i in range(n):
        if rng.random() < cfg.occlusion_prob and T > 1:
            lo_len, hi_len = cfg.occlusion_len
            length = int(rng.integers(lo_len, hi_len + 1))
            length = min(length, T - 1)
            start = int(rng.integers(0, T - length + 1))
            raw[i, start : start + length] = False
    # Depth order: lower index is in front; later instances lose covered pixels.
    masks = raw.copy()
    covered = np.zeros((T, H, W), dtype=bool)
    for i in range(n):
        masks[i] &= ~covered
        covered |= masks[i]
    # Every instance must be visible at least once.
    for i in range(n):
        if not masks[i].any():
            t = int(rng.integers(0, T))
            r, c = int(rng.integers(0, H - 1)), int(rng.integers(0, W - 1))
            for j in range(n):
                masks[j, t, r : r + 2, c : c + 2] = False
            masks[i, t, r : r + 2, c : c + 2] = True
    return masks


def generate_video(cfg: SynthConfig, index: int) -> SynthVideo:
    rng = video_rng(cfg.seed, index)
    T, N, D = cfg.T, cfg.N_slots, cfg.D
    H, W = cfg.grid
    labels, mask_codes, app, pairs = _latent_codes(cfg, rng)
    masks = _rectangles(cfg, rng)
    ms, cs, aps = cfg.mask_slice, cfg.class_slice, cfg.appearance_slice
    noisy = np.zeros(D, dtype=bool)
    noisy[cs] = True
    noisy[aps] = True

    codes = _drifting_codes(cfg, mask_codes, rng)
    pixels = np.zeros((T, H, W, D))
    pixels[..., 0] = -1.0
    for i in range(cfg.N_inst):
        pixels[..., ms] += masks[i][..., None] * codes[:, i, None, None, :]
    pixels[..., 1:] += cfg.pixel_noise * rng.normal(size=(T, H, W, D - 1))

    queries = np.zeros((T, N, D))
    planted = np.zeros((T, N), dtype=np.int64)
    drift = np.zeros_like(app)
    visible = masks.reshape(cfg.N_inst, T, -1).any(axis=2)
    for t in range(T):
        if t > 0:
            drift += cfg.sigma_motion * rng.normal(size=drift.shape)
        rows = np.zeros((N, D))
        rows[:, 0] = cfg.bias
        rows[:, noisy] += cfg.background_scale * rng.normal(size=(N, noisy.sum()))
        for i in range(cfg.N_inst):
            if not visible[i, t]:
                continue
            q = np.zeros(D)
            q[0] = cfg.bias
            q[1 + labels[i]] = cfg.class_scale
            q[ms] = codes[t, i]
            q[aps] = app[i] + drift[i]
            q[noisy] += cfg.sigma_obs * rng.normal(size=noisy.sum())
            rows[i] = q
        perm = rng.permutation(N)
        queries[t] = rows[perm]
        planted[t] = perm

    gt = []
    for i in range(cfg.N_inst):
        vis = np.flatnonzero(visible[i])
        gt.append(GroundTruthTrack(i, int(labels[i]), masks[i], int(vis[0])))
    return SynthVideo(
        queries=queries.astype(np.float32),
        pixel_features=pixels.astype(np.float32),
        gt=gt,
        planted=planted,
        meta={"index": index, "distractor_pairs": [list(p) for p in pairs]},
    )


def generate_dataset(cfg: SynthConfig) -> list[SynthVideo]:
    cfg.validate()
    return [generate_video(cfg, i) for i in range(cfg.num_videos)]


# --- analytic segmenter heads -------------------------------------------------


def stub_class_weights(cfg: SynthConfig, temperature: float = 4.0) -> np.ndarray:
    """Fixed ``[D, C+1]`` projection: class channels, no-object from the bias channel."""
    w = np.zeros((cfg.D, cfg.C + 1))
    scale = temperature / cfg.class_scale
    for c in range(cfg.C):
        w[1 + c, c] = scale
    w[0, cfg.C] = scale * 0.5 * cfg.class_scale / cfg.bias
    return w


def stub_predictions(video: SynthVideo, cfg: SynthConfig) -> Prediction:
    """Analytic per-frame predictions of the frozen segmenter (no training)."""
    q = video.queries.astype(np.float64)
    T, H, W, D = video.pixel_features.shape
    pix = video.pixel_features.astype(np.float64).reshape(T, H * W, D)
    return Prediction(
        class_logits=q @ stub_class_weights(cfg),
        mask_logits=np.einsum("tnd,tpd->tnp", q, pix),
    )


# --- binary dataset format ----------------------------------------------------


def _tensor_entry(name: str, arr: np.ndarray, kind: str, offset: int, nbytes: int) -> dict:
    return {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}


def write_dataset(path, videos: list[SynthVideo], cfg: SynthConfig | None = None) -> None:
    """Write ``videos`` in the DVSY container (see module docs in README)."""
    payload = io.BytesIO()
    manifest = []
    for v in videos:
        entries = []
        blobs = [
            ("queries", v.queries, "f32"),
            ("pixel_features", v.pixel_features, "f32"),
            ("planted", v.planted.astype(np.float32), "f32"),
        ] + [(f"mask{g.instance_id}", g.masks, "bits") for g in v.gt]
        for name, arr, kind in blobs:
            if kind == "f32":
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            else:
                raw = np.packbits(np.asarray(arr, dtype=bool).ravel(), bitorder="little").tobytes()
            entries.append(_tensor_entry(name, arr, kind, payload.tell(), len(raw)))
            payload.write(raw)
        manifest.append(
            {
                "tensors": entries,
                "gt": [
                    {"instance_id": g.instance_id, "class_label": g.class_label,
                     "first_appearance": g.first_appearance}
                    for g in v.gt
                ],
                "meta": v.meta,
            }
        )
    meta = {"config": cfg.to_dict() if cfg else None, "videos": manifest}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())


def read_dataset(path) -> tuple[list[SynthVideo], SynthConfig | None]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < 16:
        raise FormatError("truncated header", len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    (meta_len,) = struct.unpack_from("<Q", data, 8)
    if 16 + meta_len > len(data):
        raise FormatError(f"metadata of {meta_len} bytes truncated", len(data))
    try:
        meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", 16) from None
    base = 16 + meta_len
    cfg = SynthConfig.from_dict(meta["config"]) if meta.get("config") else None
    videos = []
    for entry in meta["videos"]:
        arrays = {}
        for t in entry["tensors"]:
            start = base + t["offset"]
            end = start + t["nbytes"]
            if end > len(data):
                raise FormatError(f"tensor {t['name']!r} truncated", start)
            shape = tuple(t["shape"])
            chunk = data[start:end]
            if t["kind"] == "f32":
                arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
            else:
                bits = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8), bitorder="little")
                arr = bits[: int(np.prod(shape))].astype(bool).reshape(shape)
            arrays[t["name"]] = arr
        gt = [
            GroundTruthTrack(g["instance_id"], g["class_label"], arrays[f"mask{g['instance_id']}"],
                             g["first_appearance"])
            for g in entry["gt"]
        ]
        videos.append(
            SynthVideo(
                queries=arrays["queries"],
                pixel_features=arrays["pixel_features"],
                gt=gt,
                planted=arrays["planted"].astype(np.int64),
                meta=entry.get("meta", {}),
            )
        )
    return videos, cfg
