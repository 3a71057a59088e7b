"""Image-level scoring of patch predictions on a split's test partition."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from authpipe.classifier_harness import PatchLoader, TrainedModel, predict_patches
from authpipe.errors import ValidationError
from authpipe.manifest import DatasetManifest, ImageSetLabel
from authpipe.patcher import PatchRecord, PatchRef
from authpipe.splitter import SplitPlan, Subset

GROUP_SETS: dict[str, ImageSetLabel] = {
    "originals": ImageSetLabel.AUTHENTIC,
    "forgeries": ImageSetLabel.IMITATIONS,
    "diffusion": ImageSetLabel.DIFFUSION,
    "tuned_gans": ImageSetLabel.TUNED_GANS,
    "raw_gans": ImageSetLabel.RAW_GANS,
    "proxies": ImageSetLabel.PROXIES,
}
GROUP_ORDER = tuple(GROUP_SETS)
DEFAULT_GROUPS = ("originals", "forgeries", "diffusion", "tuned_gans", "proxies")
AGGREGATION_RULES = ("mean", "majority")


@dataclass(frozen=True)
class ImagePrediction:
    image_id: str
    set_label: ImageSetLabel
    mean_probability: float
    predicted_class: int
    true_class: int

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.true_class


@dataclass
class EvalReport:
    per_set_accuracy: dict[str, float]
    confusion: list[list[int]]  # rows: true class 0/1, columns: predicted class 0/1
    n_images: dict[str, int]
    absent_groups: list[str] = field(default_factory=list)
    predictions: list[ImagePrediction] = field(default_factory=list)

    def to_dict(self, with_predictions: bool = True) -> dict:
        d = {
            "per_set_accuracy": self.per_set_accuracy,
            "confusion": self.confusion,
            "n_images": self.n_images,
            "absent_groups": self.absent_groups,
        }
        if with_predictions:
            d["predictions"] = [
                {**asdict(p), "set_label": p.set_label.value} for p in self.predictions
            ]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        preds = [
            ImagePrediction(p["image_id"], ImageSetLabel(p["set_label"]), p["mean_probability"],
                            p["predicted_class"], p["true_class"])
            for p in d.get("predictions", [])
        ]
        return cls(dict(d["per_set_accuracy"]), [list(r) for r in d["confusion"]],
                   dict(d["n_images"]), list(d.get("absent_groups", [])), preds)


def aggregate_image(patch_probs: Sequence[float], rule: str = "mean") -> tuple[float, int]:
    """Combine one image's patch probabilities into (mean probability, class).

    ``mean``: class 1 iff the mean is >= 0.5. ``majority``: class 1 iff at
    least half the patches individually score >= 0.5.
    """
    probs = np.asarray(patch_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValidationError("cannot aggregate an image with no patch probabilities")
    if np.any((probs < 0) | (probs > 1)):
        raise ValidationError("patch probabilities must lie in [0, 1]")
    mean = float(np.mean(probs))
    if rule == "mean":
        return mean, int(mean >= 0.5)
    if rule == "majority":
        return mean, int(2 * np.count_nonzero(probs >= 0.5) >= probs.size)
    raise ValidationError(f"unknown aggregation rule {rule!r}")


def score_predictions(predictions: Iterable[ImagePrediction], groups: Sequence[str]) -> EvalReport:
    predictions = list(predictions)
    unknown = [g for g in groups if g not in GROUP_SETS]
    if unknown:
        raise ValidationError(f"unknown evaluation group(s): {', '.join(unknown)}")
    accuracy, counts, absent = {}, {}, []
    for group in groups:
        members = [p for p in predictions if p.set_label is GROUP_SETS[group]]
        if not members:
            absent.append(group)
            continue
        counts[group] = len(members)
        accuracy[group] = sum(p.correct for p in members) / len(members)
    confusion = [[0, 0], [0, 0]]
    for p in predictions:
        confusion[p.true_class][p.predicted_class] += 1
    return EvalReport(accuracy, confusion, counts, absent, predictions)


def evaluate(
    model: TrainedModel,
    plan: SplitPlan,
    patches: Iterable[PatchRecord | PatchRef],
    manifest: DatasetManifest,
    groups: Sequence[str] = DEFAULT_GROUPS,
    rule: str = "mean",
    loader: PatchLoader | None = None,
) -> EvalReport:
    """Score every test-partition image belonging to the requested groups.

    Groups with no test images are listed in ``absent_groups`` rather than
    reported with zero accuracy.
    """
    wanted_sets = {GROUP_SETS[g] for g in groups if g in GROUP_SETS}
    records = manifest.by_id()
    test_ids = {
        i for i in plan.ids_in(Subset.TEST)
        if i in records and records[i].set_label in wanted_sets
    }
    by_image: dict[str, list] = defaultdict(list)
    for patch in patches:
        if patch.parent_image_id in test_ids:
            by_image[patch.parent_image_id].append(patch)
    missing = sorted(test_ids - by_image.keys())
    if missing:
        raise ValidationError(f"no patches for test image(s): {', '.join(missing[:5])}")

    ordered = sorted(by_image)
    flat = [p for image_id in ordered for p in by_image[image_id]]
    probs = predict_patches(model, flat, loader=loader)
    predictions, pos = [], 0
    for image_id in ordered:
        n = len(by_image[image_id])
        mean, cls = aggregate_image(probs[pos : pos + n], rule)
        pos += n
        rec = records[image_id]
        predictions.append(ImagePrediction(image_id, rec.set_label, mean, cls, rec.true_class))
    return score_predictions(predictions, groups)


def write_eval(report: EvalReport, path: str | Path, metadata: Mapping | None = None) -> None:
    doc = report.to_dict()
    if metadata:
        doc = {"metadata": dict(metadata), **doc}
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
