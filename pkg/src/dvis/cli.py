"""``dvis`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
failure. Failures print one line ``dvis: error code=<n> kind=<kind>
reason=<text>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigError, DvisError, FormatError
from .synth import SynthConfig, generate_video, read_dataset, write_dataset

log = logging.getLogger("dvis")

EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def worker_count() -> int:
    raw = os.environ.get("DVIS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DVIS_THREADS must be an integer, got {raw!r}") from None


def generate(cfg: SynthConfig) -> list:
    """Generate ``cfg.num_videos`` videos, in parallel when DVIS_THREADS > 1."""
    cfg.validate()
    indices = range(cfg.num_videos)
    workers = worker_count()
    if workers == 1:
        return [generate_video(cfg, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_video(cfg, i), indices))


# --- helpers ----------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(out: Path, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else out / p


def _snapshot(out: Path, cfg: dict, command: str) -> None:
    (out / f"config.{command}.json").write_text(config_mod.dump(cfg))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _dataset(out: Path, path: str | None, synth_cfg: SynthConfig):
    p = _resolve(out, path)
    if p is not None:
        videos, stored = read_dataset(p)
        if stored is not None and (stored.D, stored.C) != (synth_cfg.D, synth_cfg.C):
            raise ConfigError(f"dataset {p} has D={stored.D}, C={stored.C}; config expects D={synth_cfg.D}, C={synth_cfg.C}")
        return videos, stored or synth_cfg
    return generate(synth_cfg), synth_cfg


def _load_model(out: Path, path: str, kind: str):
    from .engine import read_checkpoint

    p = _resolve(out, path)
    if not p.exists():
        raise ConfigError(f"{kind} checkpoint {p} not found")
    got, cfg, params = read_checkpoint(p)
    if got != kind:
        raise ConfigError(f"{p} holds a {got} checkpoint, expected {kind}")
    return params, cfg


# --- commands ---------------------------------------------------------------


def cmd_gen(args, cfg) -> None:
    out = _out_dir(args)
    bench = config_mod.synth_config(cfg)
    write_dataset(out / "bench.dvsy", generate(bench), bench)
    if not args.bench_only:
        train = config_mod.train_synth_config(cfg)
        write_dataset(out / "train.dvsy", generate(train), train)
    _snapshot(out, cfg, "gen")
    print(f"wrote datasets to {out}")


def cmd_train_tracker(args, cfg) -> None:
    from .engine import train_tracker, write_checkpoint

    out = _out_dir(args)
    tc = config_mod.train_config(cfg, "tracker")
    videos, syn = _dataset(out, args.data, config_mod.train_synth_config(cfg))
    _snapshot(out, cfg, "train-tracker")
    result = train_tracker(tc, videos, syn, log_path=out / "metrics_tracker.ndjson")
    write_checkpoint(out / "tracker.dvck", "tracker", tc.tracker, result.params)
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"tracker trained: {tc.max_iter} iterations, final loss {last:.4f}")


def cmd_train_refiner(args, cfg) -> None:
    from .engine import train_refiner, write_checkpoint

    out = _out_dir(args)
    tc = config_mod.train_config(cfg, "refiner")
    tracker, tcfg = _load_model(out, args.tracker, "tracker")
    tc.tracker = tcfg
    videos, syn = _dataset(out, args.data, config_mod.train_synth_config(cfg))
    _snapshot(out, cfg, "train-refiner")
    result = train_refiner(tc, videos, syn, tracker, log_path=out / "metrics_refiner.ndjson")
    write_checkpoint(out / "refiner.dvck", "refiner", tc.refiner, result.params)
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"refiner trained: {tc.max_iter} iterations, final loss {last:.4f}")


def cmd_eval(args, cfg) -> None:
    from .engine import run_tracker
    from .evaluation import InferenceMode, evaluate, evaluate_baseline

    out = _out_dir(args)
    modes = [InferenceMode.parse(m) for m in (args.mode or cfg["eval"]["modes"])]
    videos, syn = _dataset(out, args.data, config_mod.synth_config(cfg))
    tracker = _load_model(out, args.tracker, "tracker")
    refiner = _load_model(out, args.refiner, "refiner") if args.refiner else None
    if refiner is None and any(m.kind != "online" for m in modes):
        raise ConfigError("offline and semi_online modes need --refiner")
    _snapshot(out, cfg, "eval")
    outputs = [run_tracker(v, *tracker) for v in videos]
    reports = [evaluate(videos, tracker, refiner, m, outputs) for m in modes]
    if cfg["eval"]["baseline"]:
        reports.insert(0, evaluate_baseline(videos, syn, tracker[1].match_metric))
    runtime = {}
    for rep in reports:
        stem = "report_" + rep.mode.replace(":", "_")
        (out / f"{stem}.json").write_text(rep.to_json())
        (out / f"{stem}.csv").write_text(rep.to_csv())
        runtime[rep.mode] = rep.runtime
        agg = " ".join(f"{k}={v:.4f}" for k, v in rep.aggregate.items())
        print(f"{rep.mode}: {agg}")
    _write_json(out / "runtime.json", runtime)


def cmd_ablate(args, cfg) -> None:
    from .ablation import run_ablation

    out = _out_dir(args)
    _snapshot(out, cfg, "ablate")
    table = run_ablation(cfg, args.matrix, out)
    print(table, end="")


def cmd_gradcheck(args, cfg) -> None:
    from .gradsuite import run_suite

    out = _out_dir(args)
    results = run_suite(seeds=args.seeds)
    _write_json(out / "gradcheck.json", results)
    worst = max(r["max_error"] for r in results.values())
    for name, r in results.items():
        print(f"{name:28s} max_rel_err={r['max_error']:.3e}")
    if worst >= args.tolerance:
        raise DvisError(f"gradient check failed: worst relative error {worst:.3e} >= {args.tolerance:g}")
    print(f"all {len(results)} checks below {args.tolerance:g}")


def cmd_params(args, cfg) -> None:
    from .evaluation import parameter_report

    out = _out_dir(args)
    report = parameter_report(args.preset)
    _write_json(out / f"params_{args.preset}.json", report)
    for name, r in report.items():
        print(
            f"{name}: {r['params'] / 1e6:.2f}M params (target {r['target'] / 1e6:.2f}M, "
            f"{100 * r['relative_error']:+.1f}%)"
        )


COMMANDS = {
    "gen": cmd_gen,
    "train-tracker": cmd_train_tracker,
    "train-refiner": cmd_train_refiner,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dvis", description="Decoupled video instance tracking at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory (relative paths resolve here)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. train_tracker.max_iter=200")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen", help="generate benchmark and training datasets"))
    p.add_argument("--bench-only", action="store_true")
    p = common(sub.add_parser("train-tracker", help="stage 1: train the referring tracker"))
    p.add_argument("--data", help="training dataset (.dvsy); generated from the config if omitted")
    p = common(sub.add_parser("train-refiner", help="stage 2: train the refiner with a frozen tracker"))
    p.add_argument("--tracker", required=True, help="tracker checkpoint")
    p.add_argument("--data")
    p = common(sub.add_parser("eval", help="evaluate checkpoints on the benchmark"))
    p.add_argument("--tracker", required=True)
    p.add_argument("--refiner")
    p.add_argument("--data", help="benchmark dataset (.dvsy); generated from the config if omitted")
    p.add_argument("--mode", action="append", help="online | offline | semi_online:<clip_len> (repeatable)")
    p = common(sub.add_parser("ablate", help="run an ablation matrix and print a comparison table"))
    p.add_argument("--matrix", choices=["init", "attention", "refiner", "semi_online", "all"], default="all")
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p = common(sub.add_parser("params", help="parameter counts against reference sizes"))
    p.add_argument("--preset", default="paper-r50")
    return parser


def _fail(code: int, kind: str, reason: str) -> int:
    reason = " ".join(str(reason).split())
    print(f"dvis: error code={code} kind={kind} reason={reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_mod.load_config(args.config, args.set, args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except FormatError as exc:
        return _fail(EXIT_RUNTIME, "format", exc)
    except (DvisError, ArithmeticError, ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
