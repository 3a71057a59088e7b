"""Image-level train/validation/test re-partitions, stratified by image set."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Protocol, Sequence, TypeVar

import numpy as np

from authpipe.errors import SplitError
from authpipe.manifest import SET_ORDER, DatasetManifest

log = logging.getLogger(__name__)

RNG_NAME = "numpy.random.PCG64 seeded by SeedSequence(master_seed, spawn_key=(split_index,))"
SPLIT_PERCENT = (72, 11, 17)
MAX_SEED = 2**64


class Subset(str, enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class SplitPlan:
    split_index: int
    seed: int
    assignment: Mapping[str, Subset]
    warnings: tuple[str, ...] = ()
    master_seed: int | None = None
    rng: str = RNG_NAME

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment", MappingProxyType(dict(self.assignment)))

    def ids_in(self, subset: Subset) -> set[str]:
        return {i for i, s in self.assignment.items() if s is subset}

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "seed": self.seed,
            "master_seed": self.master_seed,
            "rng": self.rng,
            "warnings": list(self.warnings),
            "assignment": {k: self.assignment[k].value for k in sorted(self.assignment)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SplitPlan:
        return cls(
            split_index=int(d["split_index"]),
            seed=int(d["seed"]),
            assignment={k: Subset(v) for k, v in d["assignment"].items()},
            warnings=tuple(d.get("warnings", ())),
            master_seed=d.get("master_seed"),
            rng=d.get("rng", RNG_NAME),
        )


def split_sizes(n: int, percent: Sequence[int] = SPLIT_PERCENT) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items to the given percentages.

    Integer arithmetic only. Ties in the remainder go to the earlier subset
    (train before validation before test).
    """
    if sum(percent) != 100:
        raise ValueError("percentages must sum to 100")
    floors = [p * n // 100 for p in percent]
    remainders = [p * n % 100 for p in percent]
    leftover = n - sum(floors)
    order = sorted(range(len(percent)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        floors[i] += 1
    return tuple(floors)


def derive_seed(master_seed: int, split_index: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(split_index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_splits(
    m: DatasetManifest, n_splits: int = 10, master_seed: int = 0
) -> list[SplitPlan]:
    if len(m) == 0:
        raise SplitError("cannot split an empty manifest")
    if n_splits < 1:
        raise SplitError(f"n_splits must be >= 1, got {n_splits}")
    if not 0 <= master_seed < MAX_SEED:
        raise SplitError("master_seed must be an unsigned 64-bit integer")

    plans = []
    for k in range(n_splits):
        seed = derive_seed(master_seed, k)
        rng = np.random.Generator(np.random.PCG64(seed))
        assignment: dict[str, Subset] = {}
        warnings = []
        for label in SET_ORDER:
            ids = sorted(r.image_id for r in m.of_set(label))
            if not ids:
                continue
            sizes = split_sizes(len(ids))
            n_train, n_val, _ = sizes
            for rank, j in enumerate(rng.permutation(len(ids))):
                if rank < n_train:
                    assignment[ids[j]] = Subset.TRAIN
                elif rank < n_train + n_val:
                    assignment[ids[j]] = Subset.VALIDATION
                else:
                    assignment[ids[j]] = Subset.TEST
            if 0 in sizes:
                empty = [s.value for s, c in zip(Subset, sizes) if c == 0]
                msg = f"{label.value}: {len(ids)} image(s), empty {'/'.join(empty)} subset"
                warnings.append(msg)
        for msg in warnings:
            log.warning("split %d: %s", k, msg)
        plans.append(SplitPlan(k, seed, assignment, tuple(warnings), master_seed))
    return plans


class _HasParent(Protocol):
    parent_image_id: str


P = TypeVar("P", bound=_HasParent)


def subset_patches(plan: SplitPlan, patch_index: Iterable[P]) -> tuple[list[P], list[P], list[P]]:
    """Route patches to (train, validation, test) by their parent image."""
    routed: dict[Subset, list[P]] = {s: [] for s in Subset}
    for patch in patch_index:
        subset = plan.assignment.get(patch.parent_image_id)
        if subset is None:
            raise SplitError(f"patch parent {patch.parent_image_id!r} is not in split {plan.split_index}")
        routed[subset].append(patch)
    return routed[Subset.TRAIN], routed[Subset.VALIDATION], routed[Subset.TEST]


def save_splits(plans: Sequence[SplitPlan], path: str | Path) -> None:
    doc = [p.to_dict() for p in plans]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_splits(path: str | Path) -> list[SplitPlan]:
    path = Path(path)
    if not path.is_file():
        raise SplitError(f"split file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SplitError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, list):
        raise SplitError(f"{path}: expected a JSON array of splits")
    return [SplitPlan.from_dict(d) for d in doc]

