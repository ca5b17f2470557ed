"""Partially annotated image samples, VOC ingestion and the synthetic shapes set.

Every loader returns a list of :class:`ImageSample`. A sample carries detection
boxes, a segmentation mask, or both; ``task_flags`` always mirrors which of the
two are present, so downstream code can strip one annotation type to simulate
single-task labelling.
"""
from __future__ import annotations

import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .exceptions import (
    CatalogError,
    ConsistencyError,
    GenerationError,
    InputError,
    LoadError,
    ParseError,
)

logger = logging.getLogger(__name__)

DETECTION = "detection"
SEGMENTATION = "segmentation"
IGNORE_INDEX = 255

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)
SHAPE_TYPES = ("rectangle", "circle", "triangle")


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise InputError("class catalog must not be empty")
        if any(not n for n in names):
            raise InputError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise InputError("class names must be unique")

    @property
    def C(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CatalogError(f"unknown class name {name!r}") from None

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    @classmethod
    def voc(cls) -> "ClassCatalog":
        return cls(VOC_CLASSES)

    @classmethod
    def shapes(cls, shape_types: Sequence[str] = SHAPE_TYPES) -> "ClassCatalog":
        return cls(tuple(shape_types))


@dataclass(frozen=True)
class DetAnnotation:
    class_id: int
    box: tuple
    difficult: bool = False

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        object.__setattr__(self, "box", box)
        if len(box) != 4:
            raise InputError(f"box must have 4 coordinates, got {box}")
        if not (box[0] < box[2] and box[1] < box[3]):
            raise InputError(f"malformed box {box}: need xmin<xmax and ymin<ymax")
        if self.class_id < 0:
            raise InputError(f"negative class id {self.class_id}")


def _frozen(arr: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if arr is None:
        return None
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image with optional boxes and/or an optional semantic mask."""

    id: str
    pixels: np.ndarray
    det_annotations: Optional[tuple] = None
    seg_mask: Optional[np.ndarray] = None
    task_flags: frozenset = field(default=frozenset())

    def __post_init__(self):
        pixels = _frozen(np.asarray(self.pixels, dtype=np.uint8))
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InputError(f"{self.id}: pixels must be HxWx3, got {pixels.shape}")
        object.__setattr__(self, "pixels", pixels)
        if self.det_annotations is not None:
            object.__setattr__(self, "det_annotations", tuple(self.det_annotations))
        if self.seg_mask is not None:
            mask = _frozen(np.asarray(self.seg_mask, dtype=np.uint8))
            if mask.shape != pixels.shape[:2]:
                raise ConsistencyError(
                    f"{self.id}: mask shape {mask.shape} != image shape {pixels.shape[:2]}"
                )
            object.__setattr__(self, "seg_mask", mask)
        flags = set()
        if self.det_annotations is not None:
            flags.add(DETECTION)
        if self.seg_mask is not None:
            flags.add(SEGMENTATION)
        object.__setattr__(self, "task_flags", frozenset(flags))
        for ann in self.det_annotations or ():
            x0, y0, x1, y1 = ann.box
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise InputError(f"{self.id}: box {ann.box} outside {self.width}x{self.height}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def boxes(self) -> np.ndarray:
        anns = self.det_annotations or ()
        return np.array([a.box for a in anns], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        return np.array([a.class_id for a in self.det_annotations or ()], dtype=np.int64)

    def difficult(self) -> np.ndarray:
        return np.array([a.difficult for a in self.det_annotations or ()], dtype=bool)

    def detection_only(self) -> "ImageSample":
        return replace(self, seg_mask=None)

    def segmentation_only(self) -> "ImageSample":
        return replace(self, det_annotations=None)

    def unlabeled(self) -> "ImageSample":
        return replace(self, det_annotations=None, seg_mask=None)

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.pixels, other.pixels)
            and self.det_annotations == other.det_annotations
            and _mask_equal(self.seg_mask, other.seg_mask)
        )

    __hash__ = None


def _mask_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return np.array_equal(a, b)


def check_sample(sample: ImageSample, catalog: ClassCatalog, n_seg_classes: Optional[int] = None):
    """Assert box containment, class validity and mask label validity for one sample."""
    for ann in sample.det_annotations or ():
        if not 0 <= ann.class_id < catalog.C:
            raise CatalogError(f"{sample.id}: class id {ann.class_id} not in catalog")
        x0, y0, x1, y1 = ann.box
        if not (0 <= x0 < x1 <= sample.width and 0 <= y0 < y1 <= sample.height):
            raise InputError(f"{sample.id}: box {ann.box} not inside image")
    if sample.seg_mask is not None:
        n = n_seg_classes if n_seg_classes is not None else catalog.C + 1
        vals = np.unique(sample.seg_mask)
        bad = vals[(vals >= n) & (vals != IGNORE_INDEX)]
        if bad.size:
            raise InputError(f"{sample.id}: invalid mask labels {bad.tolist()}")


# --------------------------------------------------------------------------- VOC

def _read_split(root: Path, subdir: str, split_name: str) -> list:
    path = root / "ImageSets" / subdir / f"{split_name}.txt"
    if not path.exists():
        raise LoadError(f"split file not found: {path}")
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            ids.append(line.split()[0])
    return ids


def _load_image(root: Path, sample_id: str) -> np.ndarray:
    folder = root / "JPEGImages"
    for ext in (".jpg", ".jpeg", ".png"):
        path = folder / f"{sample_id}{ext}"
        if path.exists():
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise LoadError(f"image for id {sample_id!r} not found in {folder}")


def parse_voc_xml(path: Path, catalog: ClassCatalog) -> tuple:
    """Parse one VOC annotation file into ``(width, height, [DetAnnotation])``.

    Coordinates are kept exactly as written (VOC's 1-based pixel indices are not shifted).
    """
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"{path}: malformed XML at line {line}, column {col}: {exc}") from None
    node = tree.getroot()
    size = node.find("size")
    width = height = None
    if size is not None:
        width = int(float(size.findtext("width", "0")))
        height = int(float(size.findtext("height", "0")))
    anns = []
    for obj in node.iter("object"):
        name = (obj.findtext("name") or "").strip()
        cls = catalog.index(name)
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        bb = obj.find("bndbox")
        if bb is None:
            raise ParseError(f"{path}: object {name!r} has no bndbox")
        try:
            box = tuple(float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
        except (TypeError, ValueError):
            raise ParseError(f"{path}: object {name!r} has a non-numeric bndbox") from None
        anns.append(DetAnnotation(cls, box, difficult))
    return width, height, anns


def load_voc_detection(root, split_name: str, catalog: ClassCatalog) -> list:
    root = Path(root)
    samples = []
    for sid in _read_split(root, "Main", split_name):
        xml_path = root / "Annotations" / f"{sid}.xml"
        if not xml_path.exists():
            raise LoadError(f"annotation for id {sid!r} not found: {xml_path}")
        _, _, anns = parse_voc_xml(xml_path, catalog)
        pixels = _load_image(root, sid)
        samples.append(ImageSample(sid, pixels, det_annotations=tuple(anns)))
    return samples


def load_voc_segmentation(root, split_name: str, catalog: ClassCatalog,
                          mask_dir: str = "SegmentationClass") -> list:
    root = Path(root)
    samples = []
    for sid in _read_split(root, "Segmentation", split_name):
        mask_path = root / mask_dir / f"{sid}.png"
        if not mask_path.exists():
            raise LoadError(f"mask for id {sid!r} not found: {mask_path}")
        with Image.open(mask_path) as im:
            # palette PNGs decode to their index plane; never convert to RGB
            mask = np.asarray(im, dtype=np.uint8)
        if mask.ndim != 2:
            raise ConsistencyError(f"{sid}: mask must be single-channel indexed, got {mask.shape}")
        pixels = _load_image(root, sid)
        if mask.shape != pixels.shape[:2]:
            raise ConsistencyError(f"{sid}: mask {mask.shape} vs image {pixels.shape[:2]}")
        samples.append(ImageSample(sid, pixels, seg_mask=mask))
    return samples


def voc_palette() -> list:
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


def export_voc(samples: Iterable[ImageSample], root, split_name: str,
               catalog: ClassCatalog) -> Path:
    """Write samples in VOC layout (JPEG-free: images are stored as PNG to stay lossless)."""
    root = Path(root)
    for sub in ("Annotations", "JPEGImages", "SegmentationClass",
                "ImageSets/Main", "ImageSets/Segmentation"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    det_ids, seg_ids = [], []
    for s in samples:
        Image.fromarray(np.asarray(s.pixels)).save(root / "JPEGImages" / f"{s.id}.png")
        if s.det_annotations is not None:
            det_ids.append(s.id)
            (root / "Annotations" / f"{s.id}.xml").write_text(_voc_xml(s, catalog))
        if s.seg_mask is not None:
            seg_ids.append(s.id)
            im = Image.fromarray(np.asarray(s.seg_mask), mode="P")
            im.putpalette(voc_palette())
            im.save(root / "SegmentationClass" / f"{s.id}.png")
    (root / "ImageSets/Main" / f"{split_name}.txt").write_text("".join(f"{i}\n" for i in det_ids))
    (root / "ImageSets/Segmentation" / f"{split_name}.txt").write_text(
        "".join(f"{i}\n" for i in seg_ids))
    return root


def _voc_xml(s: ImageSample, catalog: ClassCatalog) -> str:
    ann = ET.Element("annotation")
    ET.SubElement(ann, "filename").text = f"{s.id}.png"
    size = ET.SubElement(ann, "size")
    ET.SubElement(size, "width").text = str(s.width)
    ET.SubElement(size, "height").text = str(s.height)
    ET.SubElement(size, "depth").text = "3"
    for a in s.det_annotations or ():
        obj = ET.SubElement(ann, "object")
        ET.SubElement(obj, "name").text = catalog.names[a.class_id]
        ET.SubElement(obj, "difficult").text = "1" if a.difficult else "0"
        bb = ET.SubElement(obj, "bndbox")
        for k, v in zip(("xmin", "ymin", "xmax", "ymax"), a.box):
            ET.SubElement(bb, k).text = repr(float(v))
    ET.indent(ann)
    return ET.tostring(ann, encoding="unicode") + "\n"


# ------------------------------------------------------------------ synthetic shapes

@dataclass(frozen=True)
class ShapesConfig:
    n_images: int = 200
    image_size: int = 128
    shapes_per_image: tuple = (1, 3)
    shape_types: tuple = SHAPE_TYPES
    seed: int = 0
    size_range: tuple = (0.15, 0.45)
    noise: float = 12.0
    max_retries: int = 200
    id_prefix: str = "shape"

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "shape_types", tuple(self.shape_types))
        if self.n_images <= 0:
            raise InputError("n_images must be positive")
        lo, hi = self.shapes_per_image
        if lo < 0 or lo > hi:
            raise InputError(f"shapes_per_image must satisfy 0 <= min <= max, got {self.shapes_per_image}")
        if self.image_size < 64:
            raise InputError("image_size must be at least 64")
        if not self.shape_types or not set(self.shape_types) <= set(SHAPE_TYPES):
            raise InputError(f"shape_types must be a non-empty subset of {SHAPE_TYPES}")


def _render(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "circle":
        cy, cx = (h - 1) / 2, (w - 1) / 2
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    # isosceles triangle: apex on the top row, base on the bottom row
    apex = rng.uniform(0.25, 0.75) * (w - 1)
    t = yy / max(h - 1, 1)
    left = apex * (1 - t)
    right = apex + (w - 1 - apex) * t
    return (xx >= np.floor(left)) & (xx <= np.ceil(right))


def tight_bbox(region: np.ndarray) -> tuple:
    """Tight (xmin, ymin, xmax, ymax) of a boolean region in half-open pixel coordinates."""
    ys, xs = np.nonzero(region)
    if ys.size == 0:
        raise InputError("empty region has no bounding box")
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_shapes(config: ShapesConfig, catalog: ClassCatalog) -> list:
    """Render ``config.n_images`` images of non-overlapping coloured shapes.

    Detection class ``k`` is ``catalog.names[k]``; the segmentation label of that
    class is ``k + 1`` and 0 is background.
    """
    if tuple(catalog.names) != tuple(config.shape_types):
        raise InputError(
            f"catalog {catalog.names} must list the shape types {config.shape_types} in order")
    rng = np.random.default_rng(config.seed)
    S = config.image_size
    lo_px = max(6, int(round(config.size_range[0] * S)))
    hi_px = max(lo_px + 1, int(round(config.size_range[1] * S)))
    out = []
    for i in range(config.n_images):
        bg = rng.uniform(40, 215, size=3)
        img = np.broadcast_to(bg, (S, S, 3)).astype(np.float64).copy()
        img += rng.normal(0, config.noise, size=(S, S, 3))
        mask = np.zeros((S, S), dtype=np.uint8)
        occupied = np.zeros((S, S), dtype=bool)
        anns = []
        n = int(rng.integers(config.shapes_per_image[0], config.shapes_per_image[1] + 1))
        for _ in range(n):
            cls = int(rng.integers(len(config.shape_types)))
            kind = config.shape_types[cls]
            for _attempt in range(config.max_retries):
                h = int(rng.integers(lo_px, hi_px + 1))
                w = int(rng.integers(lo_px, hi_px + 1))
                y0 = int(rng.integers(0, S - h + 1))
                x0 = int(rng.integers(0, S - w + 1))
                # one-pixel margin keeps shapes from touching
                if occupied[max(0, y0 - 1):y0 + h + 1, max(0, x0 - 1):x0 + w + 1].any():
                    continue
                break
            else:
                raise GenerationError(
                    f"image {i}: could not place {n} shapes after {config.max_retries} retries")
            region = _render(kind, h, w, rng)
            full = np.zeros((S, S), dtype=bool)
            full[y0:y0 + h, x0:x0 + w] = region
            colour = rng.uniform(0, 255, size=3)
            while np.abs(colour - bg).max() < 60:
                colour = rng.uniform(0, 255, size=3)
            img[full] = colour + rng.normal(0, config.noise, size=(int(full.sum()), 3))
            mask[full] = cls + 1
            occupied[y0:y0 + h, x0:x0 + w] = True
            anns.append(DetAnnotation(cls, tight_bbox(full)))
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.append(ImageSample(f"{config.id_prefix}{i:06d}", pixels,
                               det_annotations=tuple(anns), seg_mask=mask))
    return out


def sample_ids(samples: Sequence[ImageSample]) -> list:
    return [s.id for s in samples]


def select(samples: Sequence[ImageSample], ids: Iterable[str]) -> list:
    """Pick samples by id, in the order of ``ids``."""
    by_id = {s.id: s for s in samples}
    try:
        return [by_id[i] for i in ids]
    except KeyError as exc:
        raise InputError(f"unknown sample id {exc.args[0]!r}") from None


def data_root(default=None) -> Optional[Path]:
    """Data root from ``DETDISTILL_DATA`` (overrides any configured path)."""
    env = os.environ.get("DETDISTILL_DATA")
    if env:
        return Path(env)
    return Path(default) if default else None
