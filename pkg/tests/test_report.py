from __future__ import annotations

import csv
import io

import pytest

from authpipe.errors import ValidationError
from authpipe.experiment_runner import summarize_matrix
from authpipe.report import ReportSpec, render_bars, render_report, render_table, table_csv, table_markdown
from authpipe.robust_stats import parse_parenthesis


def fake_rows(contrasts=("no_synthetic", "diffusion", "tuned_gans"), backbones=("swin_base", "efficientnet_b0"),
              include=True, splits=10):
    records = []
    for ci, contrast in enumerate(contrasts):
        for bi, backbone in enumerate(backbones):
            cfg = {"artist_tag": "vg", "contrast": {"name": contrast, "include_imitations": include},
                   "backbone": {"identifier": backbone}}
            fp = f"{contrast}-{backbone}-{include}"
            for k in range(splits):
                acc = {
                    "forgeries": 0.6 + 0.1 * ci + 0.01 * (k % 3) - 0.02 * bi,
                    "originals": 0.9 - 0.01 * (k % 2),
                    "diffusion": 0.5 + 0.2 * ci,
                    "tuned_gans": 0.7,
                }
                records.append({"fingerprint": fp, "split_index": k, "status": "ok", "config": cfg,
                                "report": {"per_set_accuracy": acc}})
    return summarize_matrix(records, n_bootstrap=300)


def test_csv_round_trips_the_summaries():
    rows = fake_rows()
    spec = ReportSpec("vg", "forgery_detection_with")
    table = list(csv.DictReader(io.StringIO(table_csv(rows, spec))))
    assert [(r["training_contrast_set"], r["model_architecture"]) for r in table][:3] == [
        ("no synthetic", "Swin Base"), ("no synthetic", "EfficientNet B0"), ("tuned GANs", "Swin Base")]
    by_key = {(r.contrast, r.backbone, r.group): r.summary for r in rows}
    for line in table:
        contrast = {"no synthetic": "no_synthetic", "tuned GANs": "tuned_gans", "diffusion": "diffusion"}[
            line["training_contrast_set"]]
        backbone = {"Swin Base": "swin_base", "EfficientNet B0": "efficientnet_b0"}[line["model_architecture"]]
        median, width = parse_parenthesis(line["forgeries"])
        truth = by_key[(contrast, backbone, "forgeries")]
        assert median == pytest.approx(truth.median, abs=5e-3)
        assert width == pytest.approx(truth.half_width, abs=5e-3)
        assert line["splits"] == "10"
    best = [r for r in table if r["forgeries_best"] == "1"]
    assert [(b["training_contrast_set"], b["model_architecture"]) for b in best] == [("tuned GANs", "Swin Base")]


def test_markdown_bolds_every_tied_best():
    md = table_markdown(fake_rows(), ReportSpec("vg", "forgery_detection_with"))
    # Originals are identical for every config, so every originals cell is bold.
    body = [line for line in md.splitlines() if line.startswith("| ") and "**" in line]
    assert len(body) == 6
    assert md.count("**") // 2 == 6 + 1


def test_incomplete_runs_are_flagged():
    md = table_markdown(fake_rows(splits=4), ReportSpec("vg", "forgery_detection_with"))
    assert "fewer completed splits" in md


def test_rendering_is_deterministic(tmp_path):
    rows = fake_rows()
    spec = ReportSpec("vg", "synthetic_detection")
    a = render_table(rows, spec, tmp_path / "a") + [render_bars(rows, spec, tmp_path / "a")]
    b = render_table(rows, spec, tmp_path / "b") + [render_bars(rows, spec, tmp_path / "b")]
    assert [p.name for p in a] == ["vg_synthetic_detection.csv", "vg_synthetic_detection.md",
                                   "vg_synthetic_detection.svg"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    svg = a[2].read_text()
    assert "stroke-dasharray" in svg  # dotted baselines


def test_missing_baseline_is_an_error(tmp_path):
    rows = fake_rows(contrasts=("diffusion", "tuned_gans"))
    with pytest.raises(ValidationError, match="baseline"):
        render_bars(rows, ReportSpec("vg", "forgery_detection_with"), tmp_path)


def test_spec_validation_and_empty_kinds(tmp_path):
    with pytest.raises(ValidationError):
        ReportSpec("vg", "table9")
    with pytest.raises(ValidationError):
        ReportSpec("vg", "synthetic_detection", ("pdf",))
    rows = fake_rows()
    with pytest.raises(ValidationError, match="no summaries"):
        render_table(rows, ReportSpec("vg", "forgery_detection_without"), tmp_path)
    written = render_report(rows, "vg", ["forgery_detection_with", "forgery_detection_without"],
                            ["csv"], tmp_path)
    assert [p.name for p in written] == ["vg_forgery_detection_with.csv"]
