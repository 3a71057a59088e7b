"""Dataset manifests: one JSON document per artist listing every image and its set."""

from __future__ import annotations

import enum
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

from PIL import Image, UnidentifiedImageError

from authpipe.errors import ManifestError
from authpipe.patcher import patch_count_for


class ImageSetLabel(str, enum.Enum):
    AUTHENTIC = "authentic"
    IMITATIONS = "imitations"
    PROXIES = "proxies"
    TUNED_GANS = "tuned_gans"
    RAW_GANS = "raw_gans"
    DIFFUSION = "diffusion"

    @property
    def training_class(self) -> int:
        """1 for the artist's own work, 0 for every contrast set."""
        return 1 if self is ImageSetLabel.AUTHENTIC else 0


SET_ORDER: tuple[ImageSetLabel, ...] = tuple(ImageSetLabel)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    set_label: ImageSetLabel
    path: Path
    width: int
    height: int
    artist_tag: str = ""

    @property
    def true_class(self) -> int:
        return self.set_label.training_class


@dataclass(frozen=True)
class DatasetManifest:
    artist_tag: str
    records: tuple[ImageRecord, ...]
    counts: Mapping[ImageSetLabel, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        tally = Counter(r.set_label for r in self.records)
        counts = {label: tally.get(label, 0) for label in SET_ORDER}
        object.__setattr__(self, "counts", MappingProxyType(counts))

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def of_set(self, label: ImageSetLabel) -> list[ImageRecord]:
        return [r for r in self.records if r.set_label is label]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SetSummary:
    set_label: ImageSetLabel
    image_count: int
    expected_patch_count: int


# Image/patch counts per set as published for the three artist datasets.
REFERENCE_COMPOSITIONS: dict[str, dict[ImageSetLabel, tuple[int, int]]] = {
    "van_gogh": {
        ImageSetLabel.AUTHENTIC: (126, 2582),
        ImageSetLabel.IMITATIONS: (19, 271),
        ImageSetLabel.PROXIES: (212, 4208),
        ImageSetLabel.TUNED_GANS: (30, 150),
        ImageSetLabel.RAW_GANS: (30, 150),
        ImageSetLabel.DIFFUSION: (30, 150),
    },
    "modigliani": {
        ImageSetLabel.AUTHENTIC: (100, 1812),
        ImageSetLabel.IMITATIONS: (21, 269),
        ImageSetLabel.PROXIES: (58, 1160),
        ImageSetLabel.TUNED_GANS: (30, 150),
        ImageSetLabel.RAW_GANS: (30, 150),
        ImageSetLabel.DIFFUSION: (30, 150),
    },
    "raphael": {
        ImageSetLabel.AUTHENTIC: (206, 2756),
        ImageSetLabel.IMITATIONS: (99, 1293),
        ImageSetLabel.PROXIES: (96, 1296),
        ImageSetLabel.TUNED_GANS: (30, 150),
        ImageSetLabel.RAW_GANS: (30, 150),
        ImageSetLabel.DIFFUSION: (30, 150),
    },
}


def parse_label(value: Any) -> ImageSetLabel:
    try:
        return ImageSetLabel(value)
    except ValueError:
        allowed = ", ".join(label.value for label in SET_ORDER)
        raise ManifestError(f"unknown set {value!r}; expected one of: {allowed}") from None


def _read_dimensions(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            img.load()
            return img.size
    except FileNotFoundError:
        raise ManifestError(f"image file not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ManifestError(f"cannot decode image {path}: {exc}") from None


def _positive_int(entry: Mapping[str, Any], key: str, image_id: str) -> int | None:
    value = entry.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ManifestError(f"image {image_id!r}: {key} must be a positive integer, got {value!r}")
    return value


def ingest_manifest(manifest_file: str | Path, workers: int = 4) -> DatasetManifest:
    """Load and validate a manifest, opening every image once.

    Image paths are resolved relative to the manifest's directory. Declared
    ``width``/``height`` are optional but must match the decoded raster.
    """
    manifest_file = Path(manifest_file)
    if not manifest_file.is_file():
        raise ManifestError(f"manifest not found: {manifest_file}")
    try:
        data = json.loads(manifest_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_file}: invalid JSON ({exc})") from None

    if not isinstance(data, dict):
        raise ManifestError(f"{manifest_file}: top level must be an object")
    artist_tag = data.get("artist_tag")
    if not isinstance(artist_tag, str) or not artist_tag:
        raise ManifestError(f"{manifest_file}: 'artist_tag' must be a non-empty string")
    images = data.get("images", [])
    if not isinstance(images, list):
        raise ManifestError(f"{manifest_file}: 'images' must be an array")

    root = manifest_file.parent
    seen: set[str] = set()
    pending = []
    for i, entry in enumerate(images):
        if not isinstance(entry, dict):
            raise ManifestError(f"images[{i}] must be an object")
        image_id, rel = entry.get("id"), entry.get("path")
        if not isinstance(image_id, str) or not image_id:
            raise ManifestError(f"images[{i}]: 'id' must be a non-empty string")
        if image_id in seen:
            raise ManifestError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        if not isinstance(rel, str) or not rel:
            raise ManifestError(f"image {image_id!r}: 'path' must be a non-empty string")
        label = parse_label(entry.get("set"))
        declared = (_positive_int(entry, "width", image_id), _positive_int(entry, "height", image_id))
        pending.append((image_id, label, (root / rel), declared))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sizes = list(pool.map(lambda item: _read_dimensions(item[2]), pending))

    records = []
    for (image_id, label, path, (dw, dh)), (w, h) in zip(pending, sizes):
        if (dw is not None and dw != w) or (dh is not None and dh != h):
            raise ManifestError(
                f"image {image_id!r}: declared {dw}x{dh} but file is {w}x{h}"
            )
        records.append(ImageRecord(image_id, label, path, w, h, artist_tag))
    return DatasetManifest(artist_tag, tuple(records))


def manifest_to_dict(m: DatasetManifest, relative_to: Path | None = None) -> dict[str, Any]:
    images = []
    for r in m.records:
        path = r.path
        if relative_to is not None:
            try:
                path = path.relative_to(relative_to)
            except ValueError:
                pass
        images.append(
            {"id": r.image_id, "set": r.set_label.value, "path": path.as_posix(),
             "width": r.width, "height": r.height}
        )
    return {"artist_tag": m.artist_tag, "images": images}


def summarize_manifest(m: DatasetManifest) -> list[SetSummary]:
    """Image and expected patch counts per set, in canonical set order."""
    patches: Counter[ImageSetLabel] = Counter()
    for r in m.records:
        patches[r.set_label] += patch_count_for(r.width, r.height)
    return [SetSummary(label, m.counts[label], patches[label]) for label in SET_ORDER]


def compare_to_reference(
    summary: list[SetSummary], reference: Mapping[ImageSetLabel, tuple[int, int]]
) -> list[str]:
    """Return human-readable mismatches between a summary and a reference table."""
    problems = []
    for row in summary:
        want_images, want_patches = reference.get(row.set_label, (0, 0))
        if (row.image_count, row.expected_patch_count) != (want_images, want_patches):
            problems.append(
                f"{row.set_label.value}: got {row.image_count} images/"
                f"{row.expected_patch_count} patches, reference {want_images}/{want_patches}"
            )
    return problems
