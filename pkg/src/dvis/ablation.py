"""Ablation matrices run from one config, summarized as a comparison table.

Matrices:

* ``init``: the four tracker initialization strategies;
* ``attention``: referring versus standard cross-attention in the tracker;
* ``refiner``: full temporal decoder and one row per disabled component;
* ``semi_online``: refiner window length sweep at inference, plus offline.

Every trained model shares the config's seed, so rows differ only in the
ablated setting. A tracker or refiner trained with the default settings is
reused across matrices instead of being retrained.
"""
from __future__ import annotations

import copy
import csv
import io
import json
from pathlib import Path

from . import config as config_mod
from .engine import run_tracker, train_refiner, train_tracker
from .errors import ConfigError
from .evaluation import METRIC_KEYS, InferenceMode, evaluate, evaluate_baseline
from .synth import generate_dataset
from .tracker import ATTENTION_TYPES, InitStrategy

MATRICES = ("init", "attention", "refiner", "semi_online")
REFINER_COMPONENTS = ("conv", "long_term", "cross", "ffn")


class _Runner:
    """Trains and caches models keyed by their effective config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.bench_cfg = config_mod.synth_config(cfg)
        self.train_cfg = config_mod.train_synth_config(cfg)
        self.bench = generate_dataset(self.bench_cfg)
        self.train = generate_dataset(self.train_cfg)
        self._trackers: dict[str, tuple] = {}
        self._refiners: dict[str, tuple] = {}

    def tracker(self, overrides: dict):
        cfg = copy.deepcopy(self.cfg)
        cfg["tracker"].update(overrides)
        key = json.dumps(cfg["tracker"], sort_keys=True)
        if key not in self._trackers:
            tc = config_mod.train_config(cfg, "tracker")
            params = train_tracker(tc, self.train, self.train_cfg).params
            model = (params, tc.tracker)
            outs = [run_tracker(v, *model) for v in self.bench]
            self._trackers[key] = (model, outs, tc)
        return self._trackers[key]

    def refiner(self, toggles: dict):
        model, _, ttc = self.tracker({})
        cfg = copy.deepcopy(self.cfg)
        cfg["refiner"]["toggles"].update(toggles)
        key = json.dumps(cfg["refiner"], sort_keys=True)
        if key not in self._refiners:
            rc = config_mod.train_config(cfg, "refiner")
            rc.tracker = ttc.tracker
            params = train_refiner(rc, self.train, self.train_cfg, model[0]).params
            self._refiners[key] = (params, rc.refiner)
        return self._refiners[key]

    def online(self, overrides: dict):
        model, outs, _ = self.tracker(overrides)
        return evaluate(self.bench, model, None, InferenceMode.online(), outs)

    def refined(self, toggles: dict, mode: InferenceMode):
        model, outs, _ = self.tracker({})
        return evaluate(self.bench, model, self.refiner(toggles), mode, outs)


def _rows_init(run: _Runner) -> list[tuple[str, str, dict]]:
    return [("init", s.value, run.online({"init_strategy": s.value}).aggregate) for s in InitStrategy]


def _rows_attention(run: _Runner) -> list[tuple[str, str, dict]]:
    return [("attention", a, run.online({"attention": a}).aggregate) for a in ATTENTION_TYPES]


def _rows_refiner(run: _Runner) -> list[tuple[str, str, dict]]:
    rows = [("refiner", "full", run.refined({}, InferenceMode.offline()).aggregate)]
    for comp in REFINER_COMPONENTS:
        rows.append(("refiner", f"w/o {comp}", run.refined({comp: False}, InferenceMode.offline()).aggregate))
    return rows


def _rows_semi_online(run: _Runner) -> list[tuple[str, str, dict]]:
    rows = []
    for c in run.cfg["ablate"]["semi_online_clips"]:
        mode = InferenceMode.semi_online(int(c))
        rows.append(("semi_online", mode.label(), run.refined({}, mode).aggregate))
    rows.append(("semi_online", "offline", run.refined({}, InferenceMode.offline()).aggregate))
    return rows


_BUILDERS = {
    "init": _rows_init,
    "attention": _rows_attention,
    "refiner": _rows_refiner,
    "semi_online": _rows_semi_online,
}


def format_table(rows: list[tuple[str, str, dict]]) -> str:
    header = ["matrix", "setting", *METRIC_KEYS]
    cells = [header] + [[m, s, *(f"{agg[k]:.4f}" for k in METRIC_KEYS)] for m, s, agg in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_ablation(cfg: dict, matrix: str = "all", out=None) -> str:
    """Run one matrix (or ``all``); writes ``ablation.{csv,json}`` under ``out`` and returns the table."""
    names = MATRICES if matrix == "all" else (matrix,)
    for name in names:
        if name not in _BUILDERS:
            raise ConfigError(f"unknown ablation matrix {name!r}; choose from {MATRICES} or 'all'")
    run = _Runner(cfg)
    base = evaluate_baseline(run.bench, run.bench_cfg, cfg["tracker"]["match_metric"])
    rows = [("baseline", "hungarian", base.aggregate)]
    for name in names:
        rows.extend(_BUILDERS[name](run))
    if out is not None:
        out = Path(out)
        records = [{"matrix": m, "setting": s, **agg} for m, s, agg in rows]
        (out / "ablation.json").write_text(json.dumps(records, sort_keys=True, indent=2) + "\n")
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["matrix", "setting", *METRIC_KEYS], lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        (out / "ablation.csv").write_text(buf.getvalue())
    return format_table(rows)
