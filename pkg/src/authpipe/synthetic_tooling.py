"""Job files and commands for the external image generators.

Nothing here runs a generator. Diffusion jobs are JSON records any backend
can consume; their output file names import straight into a manifest as the
``diffusion`` set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from authpipe.errors import ValidationError

DIFFUSION_MODEL_TAG = "stable-diffusion-2.1"
DIFFUSION_CHECKPOINT = "v2-1_768-ema-pruned.ckpt"


@dataclass(frozen=True)
class PromptSpec:
    style: str
    content: str
    artist: str

    def __post_init__(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name).strip():
                raise ValidationError(f"prompt {f.name} must be non-empty")


def build_prompt(spec: PromptSpec) -> str:
    return f"{spec.style} of {spec.content}, by {spec.artist}"


@dataclass(frozen=True)
class DiffusionJob:
    prompt: str
    output_name: str
    seed: int
    inference_steps: int = 60
    guidance_scale: float = 8.0
    width: int = 512
    height: int = 512
    model_tag: str = DIFFUSION_MODEL_TAG
    checkpoint: str = DIFFUSION_CHECKPOINT
    count: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> DiffusionJob:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def emit_diffusion_jobs(
    specs: Sequence[PromptSpec], count_per_prompt: int, seed: int = 0
) -> list[DiffusionJob]:
    """One single-image job per (prompt, repetition), numbered consecutively."""
    if count_per_prompt < 1:
        raise ValidationError("count_per_prompt must be >= 1")
    jobs = []
    for spec in specs:
        prompt = build_prompt(spec)
        for _ in range(count_per_prompt):
            n = len(jobs)
            jobs.append(DiffusionJob(prompt, f"diffusion_{n:04d}.png", seed + n))
    return jobs


def write_jobs(jobs: Iterable[DiffusionJob], path: str | Path) -> None:
    doc = {"generator": DIFFUSION_MODEL_TAG, "jobs": [j.to_dict() for j in jobs]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_jobs(path: str | Path) -> list[DiffusionJob]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [DiffusionJob.from_dict(d) for d in doc["jobs"]]


def jobs_to_manifest_entries(jobs: Iterable[DiffusionJob], image_dir: str) -> list[dict]:
    """Manifest ``images`` entries for the files a backend writes for these jobs."""
    return [
        {"id": Path(j.output_name).stem, "set": "diffusion",
         "path": f"{image_dir.rstrip('/')}/{j.output_name}", "width": j.width, "height": j.height}
        for j in jobs
    ]


@dataclass(frozen=True)
class GanTrainCommand:
    resolution: int
    batch: int
    gamma: float
    cbase: int | None
    glr: float
    dlr: float
    mbstd_group: int
    kimg: int = 5000
    cfg_flag: str = "stylegan2"
    snap: int = 50
    tick: int = 1
    metrics: str = "kid50k_full,fid50k_full"

    def render(self) -> str:
        parts = [
            "python train.py",
            f"--cfg={self.cfg_flag}",
            f"--kimg={self.kimg}",
            f"--batch={self.batch}",
            f"--gamma={self.gamma:g}",
        ]
        if self.cbase is not None:
            parts.append(f"--cbase={self.cbase}")
        parts += [
            f"--glr={self.glr:g}",
            f"--dlr={self.dlr:g}",
            f"--mbstd-group={self.mbstd_group}",
            f"--snap={self.snap}",
            f"--tick={self.tick}",
            f"--metrics={self.metrics}",
        ]
        return " ".join(parts)


STYLEGAN_HYPERPARAMETERS: dict[int, GanTrainCommand] = {
    256: GanTrainCommand(256, batch=16, gamma=1, cbase=16384, glr=0.001, dlr=0.001, mbstd_group=4),
    512: GanTrainCommand(512, batch=12, gamma=5, cbase=None, glr=0.001, dlr=0.001, mbstd_group=3),
}


def emit_stylegan_command(resolution: int) -> str:
    try:
        return STYLEGAN_HYPERPARAMETERS[resolution].render()
    except KeyError:
        known = ", ".join(str(r) for r in STYLEGAN_HYPERPARAMETERS)
        raise ValidationError(f"no hyperparameters for resolution {resolution}; known: {known}") from None
