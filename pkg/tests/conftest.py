from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))


def write_image(path: Path, width: int, height: int, color=(255, 255, 255), mode: str = "RGB",
                noise: float = 0.0, rng: np.random.Generator | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if noise and rng is not None:
        base = np.array(color, dtype=np.float64)
        arr = np.clip(base + rng.normal(0, noise, (height, width, 3)), 0, 255).astype(np.uint8)
        img = Image.fromarray(arr, mode="RGB")
    else:
        img = Image.new("RGB", (width, height), color)
    if mode != "RGB":
        img = img.convert(mode)
    img.save(path)
    return path


def write_manifest(path: Path, artist_tag: str, images: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"artist_tag": artist_tag, "images": images}), encoding="utf-8")
    return path


def make_dataset(root: Path, spec: dict[str, list[tuple[int, int]]], artist_tag: str = "test_artist",
                 colors: dict[str, tuple] | None = None, noise: float = 0.0, seed: int = 0) -> Path:
    """Write images per set with the given (width, height) list and return the manifest path."""
    rng = np.random.default_rng(seed)
    colors = colors or {}
    images = []
    for set_name, sizes in spec.items():
        for i, (w, h) in enumerate(sizes):
            rel = f"img/{set_name}_{i:03d}.png"
            write_image(root / rel, w, h, colors.get(set_name, (255, 255, 255)), noise=noise, rng=rng)
            images.append({"id": f"{set_name}_{i:03d}", "set": set_name, "path": rel})
    return write_manifest(root / "manifest.json", artist_tag, images)


TOY_COUNTS = {"authentic": 60, "imitations": 15, "proxies": 15, "diffusion": 10, "tuned_gans": 10, "raw_gans": 10}


def make_toy_dataset(root: Path, side: int = 512, counts: dict[str, int] | None = None) -> Path:
    """Red-dominant authentic images against blue-dominant contrast images, with pixel noise."""
    counts = counts or TOY_COUNTS
    rng = np.random.default_rng(1234)
    images = []
    for set_name, n in counts.items():
        for i in range(n):
            lo, hi = rng.uniform(120, 200), rng.uniform(20, 90)
            color = (lo, 60, hi) if set_name == "authentic" else (hi, 60, lo)
            arr = np.clip(np.array(color) + rng.normal(0, 25, (side, side, 3)), 0, 255).astype(np.uint8)
            rel = f"img/{set_name}_{i:03d}.png"
            (root / "img").mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr, mode="RGB").save(root / rel)
            images.append({"id": f"{set_name}_{i:03d}", "set": set_name, "path": rel,
                           "width": side, "height": side})
    return write_manifest(root / "manifest.json", "toy", images)


@pytest.fixture(scope="session")
def toy_manifest_path(tmp_path_factory) -> Path:
    return make_toy_dataset(tmp_path_factory.mktemp("toy"))


# Acceptance reporting: one line per criterion, printed after the run.
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and not (report.skipped or report.failed):
        return
    name = report.nodeid.split("::")[-1]
    number = int(name.split("_")[2])
    title = " ".join(name.split("_")[3:])
    status = "SKIP" if report.skipped else "FAIL" if report.failed else "PASS"
    if number in _CRITERIA and _CRITERIA[number][0] == "FAIL":
        return
    _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
