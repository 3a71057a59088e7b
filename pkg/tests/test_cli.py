from __future__ import annotations

import argparse
import json
import subprocess
import sys

import pytest

from authpipe.cli import GlobalConfig, dispatch, resolve_config
from authpipe.errors import ValidationError
from conftest import make_dataset
from test_synthetic_tooling import GOLDEN_256, GOLDEN_512


def ns(**kw):
    base = {"config_file": None, "cache_dir": None, "results_dir": None, "master_seed": None, "workers": None}
    return argparse.Namespace(**{**base, **kw})


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "g.json"
    cfg_file.write_text(json.dumps({"cache_dir": "from_file", "master_seed": 7, "worker_count": 3}))
    assert resolve_config(ns(), {}) == GlobalConfig()
    from_file = resolve_config(ns(config_file=str(cfg_file)), {})
    assert (str(from_file.cache_dir), from_file.master_seed, from_file.worker_count) == ("from_file", 7, 3)
    env = resolve_config(ns(config_file=str(cfg_file)), {"AUTHPIPE_CACHE": "from_env"})
    assert str(env.cache_dir) == "from_env"
    flags = resolve_config(ns(config_file=str(cfg_file), cache_dir="from_flag", master_seed=1),
                           {"AUTHPIPE_CACHE": "from_env"})
    assert (str(flags.cache_dir), flags.master_seed, flags.worker_count) == ("from_flag", 1, 3)


def test_config_file_problems(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(ValidationError, match="unknown config keys"):
        resolve_config(ns(config_file=str(bad)), {})
    with pytest.raises(ValidationError):
        resolve_config(ns(workers=0), {})


def test_unknown_subcommand_prints_usage(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage: authpipe" in capsys.readouterr().err


def test_no_subcommand_is_invalid(capsys):
    assert dispatch([]) == 1


@pytest.mark.parametrize("res, golden", [(256, GOLDEN_256), (512, GOLDEN_512)])
def test_stylegan_cmd_stdout(capsys, res, golden):
    assert dispatch(["stylegan-cmd", "--resolution", str(res)]) == 0
    assert capsys.readouterr().out == golden + "\n"


def test_stylegan_cmd_bad_resolution():
    assert dispatch(["stylegan-cmd", "--resolution", "64"]) == 1


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "authpipe.cli", "stylegan-cmd", "--resolution", "256"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == GOLDEN_256


def test_split_is_reproducible(tmp_path):
    manifest = make_dataset(tmp_path, {"authentic": [(20, 20)] * 9, "proxies": [(20, 20)] * 5})
    for name in ("a.json", "b.json"):
        assert dispatch(["split", "--manifest", str(manifest), "--n", "10", "--seed", "42",
                         "--out", str(tmp_path / "out" / name)]) == 0
    assert (tmp_path / "out/a.json").read_bytes() == (tmp_path / "out/b.json").read_bytes()
    doc = json.loads((tmp_path / "out/a.json").read_text())
    assert len(doc) == 10 and doc[0]["master_seed"] == 42
    eff = json.loads((tmp_path / "out/effective_config.json").read_text())
    assert eff["global"]["master_seed"] == 42 and eff["command"] == "split"


def test_ingest_reports_and_checks(tmp_path, capsys):
    manifest = make_dataset(tmp_path, {"authentic": [(600, 600)], "diffusion": [(512, 512)] * 2})
    assert dispatch(["ingest", "--manifest", str(manifest), "--out", str(tmp_path / "c.json")]) == 0
    sets = {s["set"]: s for s in json.loads((tmp_path / "c.json").read_text())["sets"]}
    assert sets["diffusion"] == {"set": "diffusion", "images": 2, "patches": 10}
    assert dispatch(["ingest", "--manifest", str(manifest), "--check-table1", "--reference", "van_gogh"]) == 1
    assert "mismatch: authentic" in capsys.readouterr().err
    assert dispatch(["ingest", "--manifest", str(manifest), "--check-table1"]) == 1  # no such reference


def test_bad_manifest_exit_code(tmp_path):
    assert dispatch(["ingest", "--manifest", str(tmp_path / "nope.json")]) == 1


def test_prompts(tmp_path):
    contents = tmp_path / "contents.txt"
    contents.write_text("a young boy\n\na wheat field\n")
    out = tmp_path / "jobs.json"
    assert dispatch(["prompts", "--artist", "Vincent van Gogh", "--style", "Post-impressionist painting",
                     "--contents", str(contents), "--count", "2", "--out", str(out)]) == 0
    jobs = json.loads(out.read_text())["jobs"]
    assert len(jobs) == 4
    assert jobs[0]["prompt"] == "Post-impressionist painting of a young boy, by Vincent van Gogh"


def test_train_then_eval_single_cell(tmp_path):
    spec = {"authentic": [(300, 300)] * 10, "proxies": [(300, 300)] * 10}
    colours = {"authentic": (210, 30, 30), "proxies": (30, 30, 210)}
    manifest = make_dataset(tmp_path, spec, artist_tag="vg", colors=colours, noise=15)
    cache, results = tmp_path / "cache", tmp_path / "results"
    g = ["--cache-dir", str(cache), "--results-dir", str(results)]
    assert dispatch(g + ["patch", "--manifest", str(manifest), "--target-side", "256"]) == 0
    assert (cache / "256px" / "effective_config.json").is_file()
    assert dispatch(g + ["split", "--manifest", str(manifest), "--n", "2", "--out", str(tmp_path / "s.json")]) == 0
    exp = {"artist_tag": "vg", "contrast": {"name": "no_synthetic", "include_imitations": False},
           "backbone": {"identifier": "toy_linear", "input_side": 256, "pretrained_source": "none"},
           "train": {"learning_rate": 0.05, "max_epochs": 15},
           "split_file": "s.json", "manifest_file": "manifest.json"}
    (tmp_path / "exp.json").write_text(json.dumps(exp))
    cell = ["--config", str(tmp_path / "exp.json"), "--split", "1"]
    assert dispatch([*g, "train", *cell]) == 0
    assert dispatch([*g, "train", *cell]) == 1  # refuses to overwrite
    assert dispatch([*g, "eval", *cell, "--groups", "originals,proxies"]) == 0
    assert dispatch([*g, "eval", *cell]) == 1  # already recorded
    rows = [json.loads(line) for line in (results / "results.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and rows[0]["report"]["per_set_accuracy"]["originals"] == 1.0


def test_report_without_results(tmp_path):
    assert dispatch(["report", "--in", str(tmp_path), "--artist", "vg", "--out", str(tmp_path / "r")]) == 1
    assert dispatch(["summarize", "--in", str(tmp_path)]) == 1
