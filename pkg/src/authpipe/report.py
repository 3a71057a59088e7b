"""Tables and bar charts from summarized matrix results."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib
from matplotlib.figure import Figure

from authpipe.errors import ValidationError
from authpipe.experiment_runner import MatrixRow, config_sort_key
from authpipe.robust_stats import format_parenthesis

log = logging.getLogger(__name__)

OUTPUT_FORMATS = ("csv", "markdown", "svg")

# kind -> (trained with imitations?, [(group, column title)])
TABLE_KINDS: dict[str, tuple[bool, tuple[tuple[str, str], ...]]] = {
    "forgery_detection_with": (True, (("forgeries", "accuracy forgeries"), ("originals", "accuracy originals"))),
    "forgery_detection_without": (False, (("forgeries", "accuracy forgeries"), ("originals", "accuracy originals"))),
    "synthetic_detection": (True, (("diffusion", "accuracy Stable Diffusion"), ("tuned_gans", "accuracy tuned GANs"))),
}

CONTRAST_NAMES = {
    "no_synthetic": "no synthetic",
    "raw_gans": "raw GANs",
    "tuned_gans": "tuned GANs",
    "diffusion": "diffusion",
    "diffusion_plus_gans": "diffusion+GANs",
}
BACKBONE_NAMES = {"swin_base": "Swin Base", "efficientnet_b0": "EfficientNet B0", "toy_linear": "toy linear"}
BAR_COLORS = {"forgeries": "#7b3294", "originals": "#1b9e77", "diffusion": "#d95f02", "tuned_gans": "#386cb0"}


@dataclass(frozen=True)
class ReportSpec:
    artist_tag: str
    table_kind: str
    output_formats: tuple[str, ...] = OUTPUT_FORMATS

    def __post_init__(self) -> None:
        if self.table_kind not in TABLE_KINDS:
            raise ValidationError(f"unknown table kind {self.table_kind!r}")
        bad = [f for f in self.output_formats if f not in OUTPUT_FORMATS]
        if bad:
            raise ValidationError(f"unknown output format(s): {', '.join(bad)}")

    @property
    def columns(self) -> tuple[tuple[str, str], ...]:
        return TABLE_KINDS[self.table_kind][1]

    @property
    def include_imitations(self) -> bool:
        return TABLE_KINDS[self.table_kind][0]


@dataclass
class _Line:
    contrast: str
    backbone: str
    cells: dict[str, MatrixRow]

    @property
    def n_completed(self) -> int:
        return max(r.n_completed for r in self.cells.values())


def _table_lines(rows: Sequence[MatrixRow], spec: ReportSpec) -> list[_Line]:
    groups = {g for g, _ in spec.columns}
    lines: dict[str, _Line] = {}
    order: dict[str, tuple] = {}
    for r in rows:
        if r.config.get("artist_tag") != spec.artist_tag or r.include_imitations != spec.include_imitations:
            continue
        if r.group not in groups:
            continue
        line = lines.setdefault(r.fingerprint, _Line(r.contrast, r.backbone, {}))
        line.cells[r.group] = r
        order[r.fingerprint] = config_sort_key(r.config)
    if not lines:
        raise ValidationError(f"no summaries for {spec.artist_tag}/{spec.table_kind}")
    return [lines[fp] for fp in sorted(lines, key=order.__getitem__)]


def _best(lines: Sequence[_Line], group: str) -> float | None:
    medians = [ln.cells[group].summary.median for ln in lines if group in ln.cells]
    return max(medians) if medians else None


def _cell_text(line: _Line, group: str) -> str:
    row = line.cells.get(group)
    return format_parenthesis(row.summary.median, row.summary.half_width) if row else "n/a"


def table_csv(rows: Sequence[MatrixRow], spec: ReportSpec) -> str:
    lines = _table_lines(rows, spec)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["training_contrast_set", "model_architecture"]
    for group, _ in spec.columns:
        header += [group, f"{group}_best"]
    writer.writerow(header + ["splits"])
    best = {g: _best(lines, g) for g, _ in spec.columns}
    for ln in lines:
        out = [CONTRAST_NAMES.get(ln.contrast, ln.contrast), BACKBONE_NAMES.get(ln.backbone, ln.backbone)]
        for group, _ in spec.columns:
            row = ln.cells.get(group)
            out += [_cell_text(ln, group), int(row is not None and row.summary.median == best[group])]
        writer.writerow(out + [ln.n_completed])
    return buf.getvalue()


def table_markdown(rows: Sequence[MatrixRow], spec: ReportSpec) -> str:
    lines = _table_lines(rows, spec)
    best = {g: _best(lines, g) for g, _ in spec.columns}
    header = ["training contrast set", "model architecture"] + [t for _, t in spec.columns] + ["splits"]
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for ln in lines:
        cells = [CONTRAST_NAMES.get(ln.contrast, ln.contrast), BACKBONE_NAMES.get(ln.backbone, ln.backbone)]
        for group, _ in spec.columns:
            text = _cell_text(ln, group)
            row = ln.cells.get(group)
            if row is not None and row.summary.median == best[group]:
                text = f"**{text}**"
            cells.append(text)
        cells.append(str(ln.n_completed))
        out.append("| " + " | ".join(cells) + " |")
    incomplete = any(r.incomplete for ln in lines for r in ln.cells.values())
    if incomplete:
        out += ["", "Some configurations have fewer completed splits than expected (see `splits`)."]
    return "\n".join(out) + "\n"


def render_table(rows: Sequence[MatrixRow], spec: ReportSpec, out_dir: str | Path) -> list[Path]:
    """Write the csv/markdown tables requested by ``spec``; best medians are marked."""
    if not rows:
        raise ValidationError("no summaries to render")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = f"{spec.artist_tag}_{spec.table_kind}"
    if "csv" in spec.output_formats:
        path = out_dir / f"{stem}.csv"
        path.write_text(table_csv(rows, spec), encoding="utf-8")
        written.append(path)
    if "markdown" in spec.output_formats:
        path = out_dir / f"{stem}.md"
        path.write_text(table_markdown(rows, spec), encoding="utf-8")
        written.append(path)
    return written


def render_bars(rows: Sequence[MatrixRow], spec: ReportSpec, out_dir: str | Path) -> Path:
    """Grouped bars with ±half-width error bars, one panel per backbone.

    A dotted horizontal line per metric marks the no-synthetic baseline.
    """
    if not rows:
        raise ValidationError("no summaries to render")
    lines = _table_lines(rows, spec)
    backbones = list(dict.fromkeys(ln.backbone for ln in lines))
    for b in backbones:
        if not any(ln.backbone == b and ln.contrast == "no_synthetic" for ln in lines):
            raise ValidationError(f"no no_synthetic baseline for backbone {b}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{spec.artist_tag}_{spec.table_kind}.svg"
    groups = [g for g, _ in spec.columns]
    width = 0.8 / len(groups)

    with matplotlib.rc_context({"svg.hashsalt": "authpipe", "svg.fonttype": "path"}):
        fig = Figure(figsize=(5.5 * len(backbones), 4.0))
        axes = fig.subplots(1, len(backbones), squeeze=False)[0]
        for ax, backbone in zip(axes, backbones):
            mine = [ln for ln in lines if ln.backbone == backbone]
            base = next(ln for ln in mine if ln.contrast == "no_synthetic")
            for j, (group, title) in enumerate(spec.columns):
                xs, heights, errs = [], [], []
                for i, ln in enumerate(mine):
                    if group in ln.cells:
                        xs.append(i + (j - (len(groups) - 1) / 2) * width)
                        heights.append(ln.cells[group].summary.median)
                        errs.append(ln.cells[group].summary.half_width)
                color = BAR_COLORS.get(group)
                ax.bar(xs, heights, width, yerr=errs, capsize=3, label=title, color=color)
                if group in base.cells:
                    ax.axhline(base.cells[group].summary.median, linestyle=":", color=color or "k", linewidth=1.2)
            ax.set_xticks(range(len(mine)))
            ax.set_xticklabels([CONTRAST_NAMES.get(ln.contrast, ln.contrast) for ln in mine], rotation=20)
            ax.set_ylim(0, 1.05)
            ax.set_ylabel("accuracy (median over splits)")
            ax.set_title(f"{spec.artist_tag}: {BACKBONE_NAMES.get(backbone, backbone)}")
            ax.legend(loc="lower right", fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def render_report(
    rows: Sequence[MatrixRow], artist_tag: str, kinds: Sequence[str], formats: Sequence[str],
    out_dir: str | Path,
) -> list[Path]:
    written = []
    for kind in kinds:
        spec = ReportSpec(artist_tag, kind, tuple(formats))
        try:
            written += render_table(rows, spec, out_dir)
            if "svg" in formats:
                written.append(render_bars(rows, spec, out_dir))
        except ValidationError as exc:
            if len(kinds) == 1:
                raise
            # "all" tolerates kinds with no data (e.g. no without-forgeries runs).
            log.warning("skipping %s: %s", kind, exc)
    return written
