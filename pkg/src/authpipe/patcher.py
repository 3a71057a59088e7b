"""Hierarchical tiling of paintings into fixed-size, unit-scaled patches.

An image whose shorter side ``s`` satisfies ``s > 1024`` is cut at levels 1
and 2 (4 + 16 tiles), ``512 <= s <= 1024`` at level 1 only (4 tiles), and
smaller images yield no tiles. Every image additionally contributes one
centered square crop, recorded as level 0. Each crop is resampled with cubic
convolution to the classifier's input side.
"""

from __future__ import annotations

import functools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import sparse

from authpipe.errors import CacheMissingError, PatchError, ValidationError

if TYPE_CHECKING:
    from authpipe.manifest import DatasetManifest, ImageRecord

TARGET_SIDES = (224, 256)
CUBIC_A = -0.5
INDEX_NAME = "patches.json"


@dataclass(frozen=True)
class TileSpec:
    level: int
    row: int
    col: int
    x0: int
    y0: int
    width: int
    height: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x0 + self.width, self.y0 + self.height)


@dataclass(frozen=True)
class PatchPlan:
    p_max: int
    tile_specs: tuple[TileSpec, ...]

    @property
    def total(self) -> int:
        return len(self.tile_specs)

    @property
    def center_crop(self) -> TileSpec:
        return self.tile_specs[-1]


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    parent_image_id: str
    level: int
    row: int
    col: int
    pixels: np.ndarray  # (side, side, 3) float32 in [0, 1]


@dataclass(frozen=True)
class PatchRef:
    """A cached patch on disk; cheap to pass around instead of pixels."""

    patch_id: str
    parent_image_id: str
    level: int
    row: int
    col: int
    path: Path


def _check_dims(width: int, height: int) -> None:
    if width < 1 or height < 1:
        raise ValidationError(f"image dimensions must be positive, got {width}x{height}")


def resolution_exponent(width: int, height: int) -> int:
    _check_dims(width, height)
    s = min(width, height)
    if s > 1024:
        return 2
    if s >= 512:
        return 1
    return 0


def patch_count_for(width: int, height: int) -> int:
    p = resolution_exponent(width, height)
    return 1 + sum(4**level for level in range(1, p + 1))


def plan_patches(width: int, height: int) -> PatchPlan:
    p_max = resolution_exponent(width, height)
    specs = []
    for level in range(1, p_max + 1):
        n = 2**level
        tw, th = width // n, height // n
        for row in range(n):
            for col in range(n):
                specs.append(TileSpec(level, row, col, col * tw, row * th, tw, th))
    side = min(width, height)
    specs.append(TileSpec(0, 0, 0, (width - side) // 2, (height - side) // 2, side, side))
    return PatchPlan(p_max, tuple(specs))


def to_unit(u8: np.ndarray) -> np.ndarray:
    """Scale 8-bit channel values to [0, 1] as float32."""
    return (u8.astype(np.float64) / 255.0).astype(np.float32)


def _keys_kernel(d: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    d = np.abs(d)
    d2, d3 = d * d, d * d * d
    near = (a + 2.0) * d3 - (a + 3.0) * d2 + 1.0
    far = a * d3 - 5.0 * a * d2 + 8.0 * a * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamped source indices and kernel weights, both shaped (n_out, 4)."""
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(x)
    t = x - base
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None].astype(np.int64) + offsets, 0, n_in - 1)
    weights = _keys_kernel(t[:, None] - offsets)
    return idx, weights


@functools.lru_cache(maxsize=128)
def _weight_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Banded (n_out, n_in) resampling matrix; taps clamped onto the same edge pixel add up."""
    idx, w = _axis_taps(n_in, n_out)
    rows = np.repeat(np.arange(n_out), 4)
    return sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n_out, n_in))


def resize_bicubic(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Cubic-convolution resize of an (H, W, C) array to float64 (height, width, C)."""
    out = np.asarray(arr, dtype=np.float64)
    in_h, in_w, channels = out.shape
    if in_h != height:
        out = (_weight_matrix(in_h, height) @ out.reshape(in_h, -1)).reshape(height, in_w, channels)
    if in_w != width:
        cols = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(in_w, -1)
        out = (_weight_matrix(in_w, width) @ cols).reshape(width, height, channels).transpose(1, 0, 2)
    return out


def load_rgb(path: str | Path) -> np.ndarray:
    """Decode any PIL-readable raster to an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                # RGBA loses alpha, L/P are expanded to three channels.
                img = img.convert("RGB")
            return np.asarray(img, dtype=np.uint8).copy()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise PatchError(f"cannot decode {path}: {exc}") from None


def patch_id_for(parent_image_id: str, level: int, row: int, col: int) -> str:
    return f"{parent_image_id}/{level}_{row}_{col}"


def crop_and_resize(u8: np.ndarray, spec: TileSpec, target_side: int) -> np.ndarray:
    crop = u8[spec.y0 : spec.y0 + spec.height, spec.x0 : spec.x0 + spec.width]
    out = resize_bicubic(crop, target_side, target_side)
    np.clip(out, 0.0, 255.0, out=out)
    return (out / 255.0).astype(np.float32)


def patches_from_array(
    u8: np.ndarray, parent_image_id: str, target_side: int
) -> list[PatchRecord]:
    if target_side not in TARGET_SIDES:
        raise ValidationError(f"target side must be one of {TARGET_SIDES}, got {target_side}")
    height, width = u8.shape[:2]
    plan = plan_patches(width, height)
    return [
        PatchRecord(
            patch_id_for(parent_image_id, s.level, s.row, s.col),
            parent_image_id, s.level, s.row, s.col,
            crop_and_resize(u8, s, target_side),
        )
        for s in plan.tile_specs
    ]


def extract_patches(img: ImageRecord, target_side: int) -> list[PatchRecord]:
    return patches_from_array(load_rgb(img.path), img.image_id, target_side)


def patch_to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _image_dir(cache: Path, artist_tag: str, image_id: str) -> Path:
    return cache / artist_tag / image_id


def _write_image_patches(record: ImageRecord, target_side: int, cache: Path) -> int:
    u8 = load_rgb(record.path)
    height, width = u8.shape[:2]
    patches = patches_from_array(u8, record.image_id, target_side)
    out_dir = _image_dir(cache, record.artist_tag, record.image_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = plan_patches(width, height)
    entries = []
    for spec, patch in zip(plan.tile_specs, patches):
        name = f"{patch.level}_{patch.row}_{patch.col}.png"
        Image.fromarray(patch_to_u8(patch.pixels), mode="RGB").save(out_dir / name)
        entries.append(
            {"patch_id": patch.patch_id, "level": patch.level, "row": patch.row,
             "col": patch.col, "file": name, "box": list(spec.box)}
        )
    index = {
        "image_id": record.image_id,
        "set": record.set_label.value,
        "target_side": target_side,
        "source_size": [width, height],
        "patches": entries,
    }
    (out_dir / INDEX_NAME).write_text(json.dumps(index, indent=2), encoding="utf-8")
    return len(entries)


def build_patch_cache(
    manifest: DatasetManifest, target_side: int, cache: str | Path, workers: int = 1
) -> int:
    """Extract and store patches for every image; returns the number written."""
    if target_side not in TARGET_SIDES:
        raise ValidationError(f"target side must be one of {TARGET_SIDES}, got {target_side}")
    cache = Path(cache)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        counts = pool.map(lambda r: _write_image_patches(r, target_side, cache), manifest.records)
        return sum(counts)


def load_patch_index(
    manifest: DatasetManifest, cache: str | Path, target_side: int,
    image_ids: Iterable[str] | None = None,
) -> list[PatchRef]:
    """Read the cached patch index for the given images (default: all)."""
    cache = Path(cache)
    wanted = set(image_ids) if image_ids is not None else None
    refs = []
    for record in manifest.records:
        if wanted is not None and record.image_id not in wanted:
            continue
        image_dir = _image_dir(cache, manifest.artist_tag, record.image_id)
        index_file = image_dir / INDEX_NAME
        if not index_file.is_file():
            raise CacheMissingError(f"no cached patches for {record.image_id!r} under {cache}")
        index = json.loads(index_file.read_text(encoding="utf-8"))
        if index["target_side"] != target_side:
            raise CacheMissingError(
                f"cache for {record.image_id!r} has side {index['target_side']}, need {target_side}"
            )
        for e in index["patches"]:
            refs.append(
                PatchRef(e["patch_id"], record.image_id, e["level"], e["row"], e["col"],
                         image_dir / e["file"])
            )
    return refs


def resolve_cache_root(cache_dir: str | Path, target_side: int) -> Path:
    """Prefer a per-side subdirectory (``<cache>/<side>px``) when one exists."""
    cache_dir = Path(cache_dir)
    per_side = cache_dir / f"{target_side}px"
    return per_side if per_side.is_dir() else cache_dir
