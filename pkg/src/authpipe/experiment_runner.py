"""The contrast-set × forgery-mode × backbone matrix, run over every split."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from authpipe import __version__
from authpipe.classifier_harness import (
    BackboneSpec,
    LabeledPatch,
    PatchLoader,
    TrainConfig,
    build_model,
    save_model,
    train,
)
from authpipe.errors import TrainingError, ValidationError
from authpipe.evaluator import DEFAULT_GROUPS, GROUP_ORDER, EvalReport, evaluate, write_eval
from authpipe.manifest import DatasetManifest, ImageSetLabel
from authpipe.patcher import PatchRef, load_patch_index, resolve_cache_root
from authpipe.robust_stats import MetricSummary, format_parenthesis, summarize
from authpipe.splitter import SplitPlan, Subset, derive_seed

log = logging.getLogger(__name__)

EXPECTED_SPLITS = 10
RESULTS_FILE = "results.jsonl"
BACKBONE_ORDER = ("swin_base", "efficientnet_b0", "toy_linear")


class ContrastName(str, enum.Enum):
    NO_SYNTHETIC = "no_synthetic"
    RAW_GANS = "raw_gans"
    TUNED_GANS = "tuned_gans"
    DIFFUSION = "diffusion"
    DIFFUSION_PLUS_GANS = "diffusion_plus_gans"


CONTRAST_ORDER = tuple(ContrastName)

SYNTHETIC_SETS: dict[ContrastName, frozenset[ImageSetLabel]] = {
    ContrastName.NO_SYNTHETIC: frozenset(),
    ContrastName.RAW_GANS: frozenset({ImageSetLabel.RAW_GANS}),
    ContrastName.TUNED_GANS: frozenset({ImageSetLabel.TUNED_GANS}),
    ContrastName.DIFFUSION: frozenset({ImageSetLabel.DIFFUSION}),
    ContrastName.DIFFUSION_PLUS_GANS: frozenset({ImageSetLabel.DIFFUSION, ImageSetLabel.TUNED_GANS}),
}

MATRIX_MODES = {
    "with_forgeries": (True,),
    "without_forgeries": (False,),
    "both": (True, False),
}


@dataclass(frozen=True)
class ContrastConfig:
    name: ContrastName
    include_imitations: bool = True

    def contrast_sets(self) -> frozenset[ImageSetLabel]:
        sets = {ImageSetLabel.PROXIES} | SYNTHETIC_SETS[self.name]
        if self.include_imitations:
            sets.add(ImageSetLabel.IMITATIONS)
        return frozenset(sets)

    def training_sets(self) -> frozenset[ImageSetLabel]:
        return self.contrast_sets() | {ImageSetLabel.AUTHENTIC}

    def to_dict(self) -> dict:
        return {"name": self.name.value, "include_imitations": self.include_imitations}

    @classmethod
    def from_dict(cls, d: Mapping) -> ContrastConfig:
        try:
            name = ContrastName(d["name"])
        except ValueError:
            raise ValidationError(f"unknown contrast {d['name']!r}") from None
        return cls(name, bool(d.get("include_imitations", True)))


@dataclass(frozen=True)
class ExperimentConfig:
    artist_tag: str
    contrast: ContrastConfig
    backbone: BackboneSpec
    train_cfg: TrainConfig
    split_file: Path
    manifest_file: Path

    def to_dict(self) -> dict:
        return {
            "artist_tag": self.artist_tag,
            "contrast": self.contrast.to_dict(),
            "backbone": asdict(self.backbone),
            "train": asdict(self.train_cfg),
            "split_file": str(self.split_file),
            "manifest_file": str(self.manifest_file),
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> ExperimentConfig:
        def _path(value: str) -> Path:
            p = Path(value)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        try:
            return cls(
                artist_tag=d["artist_tag"],
                contrast=ContrastConfig.from_dict(d["contrast"]),
                backbone=BackboneSpec(**d["backbone"]),
                train_cfg=TrainConfig(**d.get("train", {})),
                split_file=_path(d["split_file"]),
                manifest_file=_path(d["manifest_file"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed experiment config: {exc}") from None

    def identity(self) -> dict:
        """The fields that define a cell; file locations are replaced by content hashes."""
        return {
            "artist_tag": self.artist_tag,
            "contrast": self.contrast.to_dict(),
            "backbone": asdict(self.backbone),
            "train": asdict(self.train_cfg),
            "splits_sha256": _file_digest(self.split_file),
        }

    def fingerprint(self) -> str:
        canonical = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def label(self) -> str:
        mode = "with" if self.contrast.include_imitations else "without"
        return f"{self.contrast.name.value}/{mode}_forgeries/{self.backbone.identifier}"


def _file_digest(path: Path) -> str | None:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"experiment config not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


def enumerate_matrix(
    artist_tag: str,
    backbones: Sequence[BackboneSpec],
    experiments: str,
    split_file: str | Path,
    manifest_file: str | Path,
    train_cfg: TrainConfig | None = None,
) -> list[ExperimentConfig]:
    if experiments not in MATRIX_MODES:
        raise ValidationError(f"experiments must be one of {', '.join(MATRIX_MODES)}")
    train_cfg = train_cfg or TrainConfig()
    return [
        ExperimentConfig(artist_tag, ContrastConfig(name, include), backbone, train_cfg,
                         Path(split_file), Path(manifest_file))
        for include in MATRIX_MODES[experiments]
        for name in CONTRAST_ORDER
        for backbone in backbones
    ]


def training_image_ids(
    manifest: DatasetManifest, plan: SplitPlan, contrast: ContrastConfig
) -> tuple[set[str], set[str]]:
    """Image ids used for (training, validation) under a contrast configuration."""
    allowed = contrast.training_sets()
    train_ids, val_ids = set(), set()
    for r in manifest.records:
        if r.set_label not in allowed:
            continue
        subset = plan.assignment.get(r.image_id)
        if subset is Subset.TRAIN:
            train_ids.add(r.image_id)
        elif subset is Subset.VALIDATION:
            val_ids.add(r.image_id)
    return train_ids, val_ids


@dataclass
class PreparedCell:
    refs: list[PatchRef]
    train_ids: set[str]
    val_ids: set[str]
    train_patches: list[LabeledPatch]
    val_patches: list[LabeledPatch]
    train_cfg: TrainConfig


def cell_train_seed(cfg: ExperimentConfig, split_index: int) -> int:
    """Per-split shuffle/init seed, derived from the configured training seed."""
    return derive_seed(cfg.train_cfg.seed, split_index) % (2**63)


def prepare_cell(
    cfg: ExperimentConfig, plan: SplitPlan, manifest: DatasetManifest, cache_dir: str | Path
) -> PreparedCell:
    """Load the patch index and assemble labeled training/validation streams."""
    side = cfg.backbone.input_side
    refs = load_patch_index(manifest, resolve_cache_root(cache_dir, side), side)
    train_ids, val_ids = training_image_ids(manifest, plan, cfg.contrast)
    leaked = plan.ids_in(Subset.TEST) & (train_ids | val_ids)
    if leaked:
        raise AssertionError(f"test images leaked into training: {sorted(leaked)[:5]}")
    classes = {r.image_id: r.true_class for r in manifest.records}
    train_patches = [LabeledPatch(p, classes[p.parent_image_id]) for p in refs if p.parent_image_id in train_ids]
    val_patches = [LabeledPatch(p, classes[p.parent_image_id]) for p in refs if p.parent_image_id in val_ids]
    run_cfg = replace(cfg.train_cfg, seed=cell_train_seed(cfg, plan.split_index))
    return PreparedCell(refs, train_ids, val_ids, train_patches, val_patches, run_cfg)


class DuplicateCellError(ValidationError):
    pass


class ResultsStore:
    """JSON-lines record of finished cells, unique on (fingerprint, split)."""

    def __init__(self, location: str | Path) -> None:
        self.location = Path(location)
        self.location.mkdir(parents=True, exist_ok=True)
        self.path = self.location / RESULTS_FILE
        self._lock = threading.Lock()

    def rows(self) -> list[dict]:
        if not self.path.is_file():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def has(self, fingerprint: str, split_index: int) -> bool:
        return any(
            r["fingerprint"] == fingerprint and r["split_index"] == split_index for r in self.rows()
        )

    def add(self, row: Mapping, force: bool = False) -> None:
        key = (row["fingerprint"], row["split_index"])
        with self._lock:
            rows = self.rows()
            clash = [r for r in rows if (r["fingerprint"], r["split_index"]) == key]
            if clash and not force:
                raise DuplicateCellError(
                    f"cell {key[0]} split {key[1]} already recorded in {self.path}; use --force"
                )
            if clash:
                kept = [r for r in rows if (r["fingerprint"], r["split_index"]) != key]
                self.path.write_text(
                    "".join(json.dumps(r, sort_keys=True) + "\n" for r in kept), encoding="utf-8"
                )
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(dict(row), sort_keys=True) + "\n")

    def run_dir(self, fingerprint: str, split_index: int) -> Path:
        return self.location / "runs" / fingerprint / f"split_{split_index:02d}"


def run_cell(
    cfg: ExperimentConfig,
    split_index: int,
    *,
    manifest: DatasetManifest,
    plans: Sequence[SplitPlan],
    cache_dir: str | Path,
    store: ResultsStore,
    loader: PatchLoader | None = None,
    groups: Sequence[str] = DEFAULT_GROUPS,
    rule: str = "mean",
    force: bool = False,
) -> EvalReport:
    """Train on the configured training subset of one split and score its test images.

    A non-finite loss is recorded in the store as a failed cell before the
    :class:`TrainingError` propagates.
    """
    fp = cfg.fingerprint()
    if not force and store.has(fp, split_index):
        raise DuplicateCellError(f"{cfg.label()} split {split_index} already done; use --force")
    plan = next((p for p in plans if p.split_index == split_index), None)
    if plan is None:
        raise ValidationError(f"split {split_index} not found in {cfg.split_file}")

    cell = prepare_cell(cfg, plan, manifest, cache_dir)
    run_cfg = cell.train_cfg
    meta = {
        "code_version": __version__,
        "split_seed": plan.seed,
        "master_seed": plan.master_seed,
        "train_seed": run_cfg.seed,
        "n_train_images": len(cell.train_ids),
        "n_validation_images": len(cell.val_ids),
        "n_train_patches": len(cell.train_patches),
        "n_validation_patches": len(cell.val_patches),
        "train_config": asdict(run_cfg),
    }
    row = {"fingerprint": fp, "split_index": split_index, "config": cfg.identity(),
           "label": cfg.label()}

    model = build_model(cfg.backbone, seed=run_cfg.seed)
    loader = loader or PatchLoader()
    try:
        train(model, cell.train_patches, cell.val_patches, run_cfg, loader=loader)
    except TrainingError as exc:
        store.add({**row, "status": "failed", "error": str(exc), "train_meta": meta}, force=force)
        raise
    meta.update(best_epoch=model.best_epoch, epochs_run=len(model.training_log))

    report = evaluate(model, plan, cell.refs, manifest, groups=groups, rule=rule, loader=loader)
    run_dir = store.run_dir(fp, split_index)
    save_model(model, run_dir)
    write_eval(report, run_dir / "eval.json", metadata={**row, "train_meta": meta})
    store.add(
        {**row, "status": "ok", "report": report.to_dict(with_predictions=False), "train_meta": meta},
        force=force,
    )
    return report


@dataclass
class MatrixOutcome:
    completed: list[tuple[str, int]] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)
    failed: list[tuple[str, int, str]] = field(default_factory=list)


def run_matrix(
    configs: Sequence[ExperimentConfig],
    *,
    manifest: DatasetManifest,
    plans: Sequence[SplitPlan],
    cache_dir: str | Path,
    store: ResultsStore,
    workers: int = 1,
    groups: Sequence[str] = DEFAULT_GROUPS,
    rule: str = "mean",
    force: bool = False,
) -> MatrixOutcome:
    """Run every (config, split) cell; already-recorded cells are skipped unless forced."""
    outcome = MatrixOutcome()
    loader = PatchLoader()
    jobs = []
    for cfg in configs:
        for plan in plans:
            if not force and store.has(cfg.fingerprint(), plan.split_index):
                outcome.skipped.append((cfg.label(), plan.split_index))
                continue
            jobs.append((cfg, plan.split_index))

    def _one(job):
        cfg, k = job
        try:
            run_cell(cfg, k, manifest=manifest, plans=plans, cache_dir=cache_dir, store=store,
                     loader=loader, groups=groups, rule=rule, force=force)
        except TrainingError as exc:
            log.error("%s split %d failed: %s", cfg.label(), k, exc)
            return ("failed", cfg.label(), k, str(exc))
        log.info("%s split %d done", cfg.label(), k)
        return ("ok", cfg.label(), k, "")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for status, label, k, err in pool.map(_one, jobs):
            if status == "ok":
                outcome.completed.append((label, k))
            else:
                outcome.failed.append((label, k, err))
    return outcome


@dataclass(frozen=True)
class MatrixRow:
    fingerprint: str
    config: dict
    group: str
    summary: MetricSummary
    n_completed: int
    incomplete: bool

    @property
    def contrast(self) -> str:
        return self.config["contrast"]["name"]

    @property
    def include_imitations(self) -> bool:
        return self.config["contrast"]["include_imitations"]

    @property
    def backbone(self) -> str:
        return self.config["backbone"]["identifier"]

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "group": self.group,
            "summary": self.summary.to_dict(),
            "formatted": format_parenthesis(self.summary.median, self.summary.half_width),
            "n_completed": self.n_completed,
            "incomplete": self.incomplete,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> MatrixRow:
        return cls(d["fingerprint"], d["config"], d["group"], MetricSummary.from_dict(d["summary"]),
                   d["n_completed"], d["incomplete"])


def config_sort_key(config: Mapping) -> tuple:
    contrast = config["contrast"]
    backbone = config["backbone"]["identifier"]
    return (
        not contrast["include_imitations"],
        CONTRAST_ORDER.index(ContrastName(contrast["name"])),
        BACKBONE_ORDER.index(backbone) if backbone in BACKBONE_ORDER else len(BACKBONE_ORDER),
        backbone,
        config.get("artist_tag", ""),
    )


def summarize_matrix(
    store: ResultsStore | Iterable[Mapping],
    uncertainty: str = "bootstrap",
    n_bootstrap: int = 10_000,
    seed: int = 0,
    expected_splits: int = EXPECTED_SPLITS,
) -> list[MatrixRow]:
    """Per (config, group) summary over completed splits, flagging short configs."""
    rows = store.rows() if isinstance(store, ResultsStore) else list(store)
    cells: dict[str, dict] = {}
    for r in rows:
        if r.get("status") != "ok":
            continue
        cell = cells.setdefault(r["fingerprint"], {"config": r["config"], "splits": {}})
        cell["splits"][r["split_index"]] = r["report"]["per_set_accuracy"]

    out = []
    for fp, cell in sorted(cells.items(), key=lambda kv: config_sort_key(kv[1]["config"])):
        splits = cell["splits"]
        n_done = len(splits)
        for group in GROUP_ORDER:
            values = [splits[k][group] for k in sorted(splits) if group in splits[k]]
            if not values:
                continue
            summary = summarize(values, n_bootstrap=n_bootstrap, seed=seed, method=uncertainty)
            out.append(MatrixRow(fp, cell["config"], group, summary, n_done, n_done < expected_splits))
    return out


def save_summary(rows: Sequence[MatrixRow], path: str | Path, metadata: Mapping | None = None) -> None:
    doc = {"metadata": dict(metadata or {}), "rows": [r.to_dict() for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_summary(path: str | Path) -> list[MatrixRow]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [MatrixRow.from_dict(d) for d in doc["rows"]]


def directional_check(
    rows: Sequence[MatrixRow], backbone: str = "swin_base", include_imitations: bool = True,
    group: str = "forgeries",
) -> tuple[bool, str]:
    """Is the diffusion-augmented median >= the no-synthetic median within combined uncertainty?"""
    pick = {
        r.contrast: r.summary for r in rows
        if r.backbone == backbone and r.include_imitations == include_imitations and r.group == group
    }
    base, aug = pick.get(ContrastName.NO_SYNTHETIC.value), pick.get(ContrastName.DIFFUSION.value)
    if base is None or aug is None:
        return False, f"missing no_synthetic or diffusion summary for {backbone}/{group}"
    slack = base.half_width + aug.half_width
    ok = aug.median >= base.median - slack
    detail = (f"diffusion {aug.median:.3f}±{aug.half_width:.3f} vs "
              f"no_synthetic {base.median:.3f}±{base.half_width:.3f}")
    return ok, detail
