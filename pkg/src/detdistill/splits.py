"""Deterministic subsets of sample ids.

Fraction subsets are prefixes of a single seeded shuffle, so an eighth is always
contained in the quarter, which is contained in the half, and every complement is
computed against an explicit universe.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import CorruptionError, InputError


def ids_checksum(ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    for i in ids:
        h.update(i.encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class SplitManifest:
    name: str
    ids: tuple
    parent: Optional[str] = None
    seed: int = 0
    checksum: str = field(default="")

    def __post_init__(self):
        ids = tuple(self.ids)
        object.__setattr__(self, "ids", ids)
        if len(set(ids)) != len(ids):
            raise InputError(f"manifest {self.name!r} has duplicate ids")
        digest = ids_checksum(ids)
        if self.checksum and self.checksum != digest:
            raise CorruptionError(f"manifest {self.name!r}: checksum mismatch")
        object.__setattr__(self, "checksum", digest)

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class TaskPartition:
    det_ids: tuple
    seg_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "det_ids", tuple(self.det_ids))
        object.__setattr__(self, "seg_ids", tuple(self.seg_ids))
        if set(self.det_ids) & set(self.seg_ids):
            raise InputError("detection and segmentation ids must be disjoint")


def parse_fraction(text) -> Fraction:
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError):
        raise InputError(f"not a fraction: {text!r}") from None


def _check_unique(ids: Sequence[str]):
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise InputError(f"duplicate id {dup!r}")


def prefix_length(fraction, n: int) -> int:
    # round half up, so 16,551/2 -> 8,276 regardless of banker's rounding
    f = Fraction(fraction) * n
    return int(f + Fraction(1, 2)) if f.denominator != 1 else int(f)


def _shuffled(ids: Sequence[str], seed: int) -> list:
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order]


def _fraction_name(f: Fraction) -> str:
    return "full" if f == 1 else f"{f.numerator}of{f.denominator}"


def make_prefix_fractions(ids: Sequence[str], fractions: Sequence, seed: int = 0,
                          name: str = "train") -> list:
    ids = list(ids)
    if not ids:
        raise InputError("ids must be non-empty")
    _check_unique(ids)
    fracs = [parse_fraction(f) if not isinstance(f, Fraction) else f for f in fractions]
    for f in fracs:
        if not 0 < f <= 1:
            raise InputError(f"fraction {f} outside (0, 1]")
    order = _shuffled(ids, seed)
    return [
        SplitManifest(f"{name}_{_fraction_name(f)}", order[:prefix_length(f, len(ids))],
                      parent=name, seed=seed)
        for f in fracs
    ]


def complement(split: SplitManifest, universe: Sequence[str], name: Optional[str] = None) -> SplitManifest:
    universe = list(universe)
    _check_unique(universe)
    taken = set(split.ids)
    missing = taken - set(universe)
    if missing:
        raise InputError(f"split {split.name!r} is not a subset of the universe "
                         f"({len(missing)} foreign ids, e.g. {sorted(missing)[0]!r})")
    rest = [i for i in universe if i not in taken]
    return SplitManifest(name or f"not_{split.name}", rest, parent=split.parent, seed=split.seed)


def make_task_partition(ids: Sequence[str], det_fraction, seed: int = 0) -> TaskPartition:
    ids = list(ids)
    _check_unique(ids)
    f = parse_fraction(det_fraction) if not isinstance(det_fraction, Fraction) else det_fraction
    if not 0 < f < 1:
        raise InputError(f"det_fraction must lie in (0, 1), got {f}")
    order = _shuffled(ids, seed)
    k = prefix_length(f, len(ids))
    return TaskPartition(order[:k], order[k:])


def both_task_filter(samples) -> list:
    """Keep samples that carry both detection and segmentation annotations (validation rule)."""
    return [s for s in samples if len(s.task_flags) == 2]


def save_manifest(split: SplitManifest, path) -> Path:
    path = Path(path)
    lines = [
        f"name={split.name}",
        f"seed={split.seed}",
        f"parent={split.parent or ''}",
        f"checksum={split.checksum}",
        *split.ids,
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> SplitManifest:
    header, ids = {}, []
    for line in Path(path).read_text().splitlines():
        if not ids and "=" in line and line.split("=", 1)[0] in ("name", "seed", "parent", "checksum"):
            k, v = line.split("=", 1)
            header[k] = v
        elif line.strip():
            ids.append(line.strip())
    if "checksum" not in header:
        raise CorruptionError(f"{path}: missing checksum header")
    if ids_checksum(ids) != header["checksum"]:
        raise CorruptionError(f"{path}: checksum mismatch, file was modified")
    return SplitManifest(
        name=header.get("name", Path(path).stem),
        ids=ids,
        parent=header.get("parent") or None,
        seed=int(header.get("seed", 0)),
        checksum=header["checksum"],
    )
