"""Experiment configuration: one JSON document, defaults for every key.

Schema (all sections optional; unknown keys are rejected)::

    seed            int, base seed for training runs
    data.synth      SynthConfig fields (the evaluation benchmark)
    data.train_videos, data.train_seed_offset
                    training set = same generator settings with
                    num_videos=train_videos and seed=synth.seed+train_seed_offset
    tracker         TrackerConfig fields
    refiner         RefinerConfig fields (toggles.{conv,long_term,cross,ffn})
    loss            LossWeights fields
    train_tracker   optimizer/schedule fields for stage 1 (base_lr, weight_decay,
                    max_iter, lr_drop_frac, lr_drop_factor, clip_len, batch_size,
                    augment, head_init, decay_vectors, aux_loss)
    train_refiner   the same for stage 2, plus heads_from_tracker
    eval.modes      list of "online" | "offline" | "semi_online:<c>"
    eval.baseline   also report the Hungarian-only baseline
    ablate.semi_online_clips   clip lengths for the semi-online sweep
"""
from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path
from typing import Any

from .engine import TrainConfig
from .errors import ConfigError
from .losses import LossWeights
from .refiner import RefinerConfig
from .synth import SynthConfig
from .tracker import TrackerConfig

_SCHEDULE = {
    "base_lr": 1e-3,
    "weight_decay": 5e-2,
    "max_iter": 3000,
    "lr_drop_frac": 0.7,
    "lr_drop_factor": 0.1,
    "clip_len": None,
    "batch_size": 1,
    "augment": True,
    "head_init": "stub",
    "decay_vectors": False,
    "aux_loss": False,
}


def default_config() -> dict:
    return {
        "seed": 0,
        "data": {"synth": SynthConfig().to_dict(), "train_videos": 40, "train_seed_offset": 1000},
        "tracker": dataclasses.asdict(TrackerConfig()),
        "refiner": dataclasses.asdict(RefinerConfig()),
        "loss": dataclasses.asdict(LossWeights()),
        "train_tracker": {**_SCHEDULE, "batch_size": 4},
        "train_refiner": {**_SCHEDULE, "heads_from_tracker": True},
        "eval": {"modes": ["online", "offline"], "baseline": True},
        "ablate": {"semi_online_clips": [1, 3, 6, 12, 24]},
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is parsed as JSON when possible, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_override(cfg: dict, text: str) -> None:
    path, value = parse_override(text)
    node = cfg
    for i, part in enumerate(path[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {'.'.join(path[: i + 1])!r}")
        node = node[part]
    if not isinstance(node, dict) or path[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(path)!r}")
    if isinstance(node[path[-1]], dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {'.'.join(path)!r} must be an object")
        _merge(node[path[-1]], value, ".".join(path) + ".")
    else:
        node[path[-1]] = value


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge(cfg, user)
    for text in overrides:
        apply_override(cfg, text)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def _build(factory, value, name):
    try:
        return factory(value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def synth_config(cfg: dict) -> SynthConfig:
    return _build(lambda d: SynthConfig.from_dict(copy.deepcopy(d)), cfg["data"]["synth"], "data.synth")


def train_synth_config(cfg: dict) -> SynthConfig:
    d = copy.deepcopy(cfg["data"]["synth"])
    d["num_videos"] = cfg["data"]["train_videos"]
    d["seed"] = d["seed"] + cfg["data"]["train_seed_offset"]
    return _build(SynthConfig.from_dict, d, "data")


def train_config(cfg: dict, stage: str) -> TrainConfig:
    section = dict(cfg[f"train_{stage}"])
    heads = section.pop("heads_from_tracker", True)
    tc = _build(
        lambda s: TrainConfig(
            stage=stage,
            seed=cfg["seed"],
            loss=copy.deepcopy(cfg["loss"]),
            tracker=copy.deepcopy(cfg["tracker"]),
            refiner=copy.deepcopy(cfg["refiner"]),
            refiner_heads_from_tracker=heads,
            **s,
        ),
        section,
        f"train_{stage}",
    )
    tc.validate()
    return tc


def validate(cfg: dict) -> None:
    syn = synth_config(cfg)
    train_synth_config(cfg)
    for stage in ("tracker", "refiner"):
        tc = train_config(cfg, stage)
        for arch in (tc.tracker, tc.refiner):
            if arch.D != syn.D or arch.C != syn.C:
                raise ConfigError(
                    f"model (D={arch.D}, C={arch.C}) does not fit data (D={syn.D}, C={syn.C})"
                )
    from .evaluation import InferenceMode

    for m in cfg["eval"]["modes"]:
        InferenceMode.parse(m)


def dump(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"
