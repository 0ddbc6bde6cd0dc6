import json

import pytest

from dvis import config as config_mod
from dvis.cli import main
from dvis.errors import ConfigError

TINY = {
    "data": {
        "synth": {"num_videos": 3, "T": 6, "N_slots": 4, "N_inst": 3, "D": 24, "C": 2, "grid": [8, 8],
                  "mask_dim": 6, "size_range": [2, 4]},
        "train_videos": 3,
    },
    "tracker": {"D": 24, "C": 2, "num_layers": 1, "num_heads": 2, "ffn_mult": 2},
    "refiner": {"D": 24, "C": 2, "num_layers": 1, "num_heads": 2, "ffn_mult": 2, "kernel_size": 3},
    "train_tracker": {"max_iter": 4, "clip_len": 3},
    "train_refiner": {"max_iter": 4, "clip_len": 4},
    "eval": {"modes": ["online", "offline", "semi_online:2"]},
    "ablate": {"semi_online_clips": [2]},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return lines[-1]


def run_pipeline(cfg, out):
    args = ["--config", str(cfg), "--out", str(out)]
    assert main(["gen", *args]) == 0
    assert main(["train-tracker", *args, "--data", "train.dvsy"]) == 0
    assert main(["train-refiner", *args, "--tracker", "tracker.dvck", "--data", "train.dvsy"]) == 0
    assert main(["eval", *args, "--tracker", "tracker.dvck", "--refiner", "refiner.dvck", "--data", "bench.dvsy"]) == 0


def test_config_defaults_and_overrides():
    cfg = config_mod.load_config(overrides=["train_tracker.max_iter=10", "tracker.init_strategy=zero"], seed=7)
    assert cfg["seed"] == 7 and cfg["train_tracker"]["max_iter"] == 10
    tc = config_mod.train_config(cfg, "tracker")
    assert tc.tracker.init_strategy == "zero" and tc.seed == 7
    assert config_mod.train_synth_config(cfg).seed == cfg["data"]["synth"]["seed"] + 1000
    assert json.loads(config_mod.dump(cfg)) == cfg


@pytest.mark.parametrize("override", [
    "tracker.bogus=1", "nothing=2", "tracker=3", "train_tracker.batch_size=0", "tracker.D=30", "eval.modes=[\"x\"]",
    "novalue",
])
def test_bad_overrides_are_config_errors(override):
    with pytest.raises(ConfigError):
        config_mod.load_config(overrides=[override])


def test_full_pipeline_is_byte_identical(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(tiny_config, a)
    run_pipeline(tiny_config, b)
    produced = sorted(p.name for p in a.iterdir())
    for name in ("bench.dvsy", "train.dvsy", "tracker.dvck", "refiner.dvck", "metrics_tracker.ndjson",
                 "report_offline.json", "report_semi_online_2.csv", "report_baseline.json", "config.eval.json"):
        assert name in produced
    for name in produced:
        if name == "runtime.json":
            continue
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    snap = json.loads((a / "config.train-tracker.json").read_text())
    assert snap["train_tracker"]["max_iter"] == 4


def test_snapshot_reproduces_run(tmp_path, tiny_config):
    a = tmp_path / "a"
    assert main(["train-tracker", "--config", str(tiny_config), "--out", str(a)]) == 0
    b = tmp_path / "b"
    assert main(["train-tracker", "--config", str(a / "config.train-tracker.json"), "--out", str(b)]) == 0
    assert (a / "tracker.dvck").read_bytes() == (b / "tracker.dvck").read_bytes()


def test_seed_flag_changes_training(tmp_path, tiny_config):
    for seed in (0, 1):
        assert main(["train-tracker", "--config", str(tiny_config), "--seed", str(seed), "--out", str(tmp_path / str(seed))]) == 0
    assert (tmp_path / "0" / "tracker.dvck").read_bytes() != (tmp_path / "1" / "tracker.dvck").read_bytes()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen", "--frobnicate"]) == 1
    line = error_line(capsys)
    assert line.startswith("dvis: error code=1 kind=usage reason=")
    assert main([]) == 1
    assert main(["explode"]) == 1


def test_config_errors_exit_2(tmp_path, tiny_config, capsys):
    assert main(["gen", "--config", str(tiny_config), "--set", "tracker.nope=1", "--out", str(tmp_path)]) == 2
    assert "code=2 kind=config" in error_line(capsys)
    assert main(["eval", "--config", str(tiny_config), "--tracker", "missing.dvck", "--out", str(tmp_path)]) == 2
    assert "not found" in error_line(capsys)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_3(tmp_path, tiny_config, capsys):
    (tmp_path / "junk.dvsy").write_bytes(b"garbage!")
    args = ["--config", str(tiny_config), "--out", str(tmp_path)]
    assert main(["train-tracker", *args, "--data", "junk.dvsy"]) == 3
    line = error_line(capsys)
    assert "code=3 kind=format" in line and "\n" not in line


def test_eval_refined_mode_needs_refiner(tmp_path, tiny_config):
    args = ["--config", str(tiny_config), "--out", str(tmp_path)]
    assert main(["train-tracker", *args]) == 0
    assert main(["eval", *args, "--tracker", "tracker.dvck"]) == 2
    assert main(["eval", *args, "--tracker", "tracker.dvck", "--mode", "online"]) == 0
    assert (tmp_path / "report_online.json").exists()


def test_params_command(tmp_path, capsys):
    assert main(["params", "--preset", "paper-r50", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "target 9.68M" in text and "target 14.41M" in text
    report = json.loads((tmp_path / "params_paper-r50.json").read_text())
    assert abs(report["tracker"]["relative_error"]) <= 0.2
    assert main(["params", "--preset", "nope", "--out", str(tmp_path)]) == 2


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["max_error"] < 1e-4 for r in results.values())


def test_ablate_command(tmp_path, tiny_config, capsys):
    args = ["--config", str(tiny_config), "--out", str(tmp_path)]
    assert main(["ablate", *args, "--matrix", "semi_online"]) == 0
    table = capsys.readouterr().out
    assert "hungarian" in table and "offline" in table
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert rows[0]["setting"] == "hungarian" and {r["matrix"] for r in rows} >= {"semi_online"}
    first = (tmp_path / "ablation.csv").read_bytes()
    assert main(["ablate", *args, "--matrix", "semi_online"]) == 0
    assert (tmp_path / "ablation.csv").read_bytes() == first


def test_threaded_generation_matches_serial(tmp_path, tiny_config, monkeypatch):
    args = ["--config", str(tiny_config), "--bench-only"]
    assert main(["gen", *args, "--out", str(tmp_path / "s")]) == 0
    monkeypatch.setenv("DVIS_THREADS", "3")
    assert main(["gen", *args, "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "s" / "bench.dvsy").read_bytes() == (tmp_path / "p" / "bench.dvsy").read_bytes()
    monkeypatch.setenv("DVIS_THREADS", "many")
    assert main(["gen", *args, "--out", str(tmp_path / "x")]) == 2
