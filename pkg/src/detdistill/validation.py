"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import DETECTION, SEGMENTATION, ClassCatalog, ImageSample, check_sample
from .exceptions import ConfigurationError, InputError


def check_samples(samples, catalog: Optional[ClassCatalog] = None, require: Iterable[str] = (),
                  allow_empty: bool = False, name: str = "X") -> list:
    """Materialise ``samples`` as a list of ImageSample and validate each one.

    ``require`` lists task flags every sample must carry.
    """
    if isinstance(samples, ImageSample):
        raise InputError(f"{name} must be a sequence of ImageSample, not a single sample")
    try:
        out = list(samples)
    except TypeError as exc:
        raise InputError(f"{name} must be an iterable of ImageSample") from exc
    if not out and not allow_empty:
        raise InputError(f"{name} is empty")
    require = tuple(require)
    seen = set()
    for s in out:
        if not isinstance(s, ImageSample):
            raise InputError(f"{name} contains {type(s).__name__}, expected ImageSample")
        if s.id in seen:
            raise InputError(f"{name} contains duplicate id {s.id!r}")
        seen.add(s.id)
        for flag in require:
            if flag not in s.task_flags:
                raise InputError(f"sample {s.id!r} in {name} lacks {flag} annotations")
        if catalog is not None:
            check_sample(s, catalog)
    return out


def check_images(images, name: str = "X") -> list:
    """Accept ImageSamples or raw ``HxWx3`` uint8 arrays; returns ImageSamples."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    out = []
    for i, x in enumerate(images):
        if isinstance(x, ImageSample):
            out.append(x)
            continue
        arr = np.asarray(x)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"{name}[{i}] must be HxWx3, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise InputError(f"{name}[{i}] values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        out.append(ImageSample(f"{name}{i:06d}", arr))
    if not out:
        raise InputError(f"{name} is empty")
    return out


def split_by_task(samples: Sequence[ImageSample], both: str = DETECTION):
    """Partition samples into (detection, segmentation) lists by their task flags.

    Samples carrying both annotations go to the split named by ``both`` with the
    other annotation stripped, so the two lists never share an id.
    """
    if both not in (DETECTION, SEGMENTATION):
        raise ConfigurationError(f"both must be {DETECTION!r} or {SEGMENTATION!r}, got {both!r}")
    det, seg = [], []
    for s in samples:
        flags = s.task_flags
        if flags == {DETECTION, SEGMENTATION}:
            if both == DETECTION:
                det.append(s.detection_only())
            else:
                seg.append(s.segmentation_only())
        elif DETECTION in flags:
            det.append(s)
        elif SEGMENTATION in flags:
            seg.append(s)
        else:
            raise InputError(f"sample {s.id!r} carries no annotations")
    return det, seg


def check_fraction(value) -> Fraction:
    try:
        f = Fraction(str(value))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"invalid fraction {value!r}") from exc
    if not 0 < f <= 1:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {value!r}")
    return f


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_choice(value, choices: Sequence, name: str):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
