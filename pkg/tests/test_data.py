import textwrap

import numpy as np
import pytest
from PIL import Image

from detdistill.data import (
    IGNORE_INDEX,
    ClassCatalog,
    DetAnnotation,
    ImageSample,
    ShapesConfig,
    check_sample,
    export_voc,
    generate_shapes,
    load_voc_detection,
    load_voc_segmentation,
    tight_bbox,
)
from detdistill.exceptions import (
    CatalogError,
    ConsistencyError,
    GenerationError,
    InputError,
    LoadError,
    ParseError,
)
from detdistill.assign import iou_matrix
from scipy import ndimage

CAT = ClassCatalog(("cat", "dog", "person"))

XML_A = """\
<annotation>
  <filename>a.jpg</filename>
  <size><width>40</width><height>30</height><depth>3</depth></size>
  <object>
    <name>dog</name><pose>Left</pose><truncated>0</truncated><difficult>0</difficult>
    <bndbox><xmin>3</xmin><ymin>4</ymin><xmax>20</xmax><ymax>25</ymax></bndbox>
  </object>
  <object>
    <name>person</name><difficult>1</difficult>
    <bndbox><xmin>21.5</xmin><ymin>1</ymin><xmax>39</xmax><ymax>29</ymax></bndbox>
  </object>
</annotation>
"""
XML_B = """\
<annotation>
  <size><width>40</width><height>30</height><depth>3</depth></size>
  <object>
    <name>cat</name>
    <bndbox><xmin>10</xmin><ymin>10</ymin><xmax>30</xmax><ymax>20</ymax></bndbox>
  </object>
</annotation>
"""


def _voc_root(tmp_path, xmls, split="trainval"):
    root = tmp_path / "VOC"
    (root / "Annotations").mkdir(parents=True)
    (root / "JPEGImages").mkdir()
    (root / "ImageSets" / "Main").mkdir(parents=True)
    for sid, xml in xmls.items():
        (root / "Annotations" / f"{sid}.xml").write_text(xml)
        Image.fromarray(np.full((30, 40, 3), 128, np.uint8)).save(root / "JPEGImages" / f"{sid}.jpg")
    (root / "ImageSets" / "Main" / f"{split}.txt").write_text("".join(f"{s}\n" for s in xmls))
    return root


def test_load_voc_detection_fixture(tmp_path):
    root = _voc_root(tmp_path, {"b": XML_B, "a": XML_A})
    samples = load_voc_detection(root, "trainval", CAT)
    assert [s.id for s in samples] == ["b", "a"]
    a = samples[1]
    assert a.task_flags == {"detection"}
    assert a.det_annotations == (
        DetAnnotation(1, (3, 4, 20, 25), False),
        DetAnnotation(2, (21.5, 1, 39, 29), True),
    )
    assert samples[0].det_annotations == (DetAnnotation(0, (10, 10, 30, 20)),)
    assert a.pixels.shape == (30, 40, 3)


def test_empty_split(tmp_path):
    root = _voc_root(tmp_path, {})
    assert load_voc_detection(root, "trainval", CAT) == []


def test_missing_annotation_names_id(tmp_path):
    root = _voc_root(tmp_path, {"a": XML_A})
    (root / "ImageSets" / "Main" / "trainval.txt").write_text("a\nghost\n")
    with pytest.raises(LoadError, match="ghost"):
        load_voc_detection(root, "trainval", CAT)


def test_malformed_xml_has_line_context(tmp_path):
    root = _voc_root(tmp_path, {"a": "<annotation>\n  <object>\n</annotation>\n"})
    with pytest.raises(ParseError, match="line 3"):
        load_voc_detection(root, "trainval", CAT)


def test_unknown_class(tmp_path):
    root = _voc_root(tmp_path, {"a": XML_A.replace("dog", "unicorn")})
    with pytest.raises(CatalogError, match="unicorn"):
        load_voc_detection(root, "trainval", CAT)


def _seg_root(tmp_path, masks, image_shape=None):
    root = tmp_path / "SEG"
    for sub in ("JPEGImages", "SegmentationClass", "ImageSets/Segmentation"):
        (root / sub).mkdir(parents=True)
    for sid, m in masks.items():
        shape = image_shape or m.shape
        Image.fromarray(np.zeros((*shape, 3), np.uint8)).save(root / "JPEGImages" / f"{sid}.jpg")
        im = Image.fromarray(m.astype(np.uint8), mode="P")
        im.putpalette([0] * 768)
        im.save(root / "SegmentationClass" / f"{sid}.png")
    (root / "ImageSets/Segmentation/val.txt").write_text("".join(f"{s}\n" for s in masks))
    return root


def test_segmentation_background_only(tmp_path):
    root = _seg_root(tmp_path, {"x": np.zeros((8, 8))})
    [s] = load_voc_segmentation(root, "val", CAT)
    assert s.task_flags == {"segmentation"}
    assert not s.seg_mask.any()


def test_segmentation_keeps_ignore_label(tmp_path):
    m = np.zeros((8, 8))
    m[0] = 255
    m[4:, 4:] = 2
    root = _seg_root(tmp_path, {"x": m})
    [s] = load_voc_segmentation(root, "val", CAT)
    assert (s.seg_mask[0] == IGNORE_INDEX).all()
    assert set(np.unique(s.seg_mask)) - {IGNORE_INDEX} == {0, 2}


def test_segmentation_three_classes(tmp_path):
    m = np.zeros((6, 6))
    m[0:2] = 1
    m[2:4] = 2
    m[4:] = 3
    m[5, 5] = 255
    root = _seg_root(tmp_path, {"x": m})
    [s] = load_voc_segmentation(root, "val", CAT)
    assert len(set(np.unique(s.seg_mask)) - {IGNORE_INDEX}) == 3


def test_segmentation_size_mismatch(tmp_path):
    root = _seg_root(tmp_path, {"x": np.zeros((8, 8))}, image_shape=(9, 8))
    with pytest.raises(ConsistencyError):
        load_voc_segmentation(root, "val", CAT)


def test_segmentation_missing_mask(tmp_path):
    root = _seg_root(tmp_path, {"x": np.zeros((8, 8))})
    (root / "SegmentationClass" / "x.png").unlink()
    with pytest.raises(LoadError, match="x"):
        load_voc_segmentation(root, "val", CAT)


def test_task_flags_follow_annotations():
    px = np.zeros((10, 10, 3), np.uint8)
    s = ImageSample("a", px, det_annotations=(DetAnnotation(0, (1, 1, 5, 5)),), seg_mask=np.zeros((10, 10)))
    assert s.task_flags == {"detection", "segmentation"}
    assert s.detection_only().task_flags == {"detection"}
    assert s.segmentation_only().task_flags == {"segmentation"}
    assert s.unlabeled().task_flags == frozenset()
    with pytest.raises(InputError):
        ImageSample("b", px, det_annotations=(DetAnnotation(0, (1, 1, 11, 5)),))
    with pytest.raises(InputError):
        DetAnnotation(0, (5, 1, 5, 4))


def test_catalog_validation():
    assert CAT.C == 3
    with pytest.raises(InputError):
        ClassCatalog(("a", "a"))
    with pytest.raises(InputError):
        ClassCatalog(())


def test_shapes_deterministic(shapes_catalog):
    cfg = ShapesConfig(n_images=6, image_size=64, seed=11)
    a, b = generate_shapes(cfg, shapes_catalog), generate_shapes(cfg, shapes_catalog)
    assert a == b
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))


def test_shapes_one_per_image(shapes_catalog):
    samples = generate_shapes(ShapesConfig(n_images=10, image_size=64, shapes_per_image=(1, 1)),
                              shapes_catalog)
    assert all(len(s.det_annotations) == 1 for s in samples)


def test_shapes_box_is_tight_bbox_of_mask_component(shapes_catalog):
    samples = generate_shapes(ShapesConfig(n_images=30, image_size=64, seed=5), shapes_catalog)
    for s in samples:
        check_sample(s, shapes_catalog)
        assert s.task_flags == {"detection", "segmentation"}
        comps, n = ndimage.label(s.seg_mask > 0)
        assert n == len(s.det_annotations)
        # recompute every component's bbox by scanning rows and columns
        scanned = []
        for k in range(1, n + 1):
            region = comps == k
            rows = [y for y in range(region.shape[0]) if region[y].any()]
            cols = [x for x in range(region.shape[1]) if region[:, x].any()]
            scanned.append(((min(cols), min(rows), max(cols) + 1, max(rows) + 1),
                            int(s.seg_mask[region][0]) - 1))
        for ann in s.det_annotations:
            match = [b for b, c in scanned if c == ann.class_id and
                     iou_matrix([b], [ann.box])[0, 0] == 1.0]
            assert len(match) == 1


def test_shapes_generation_error(shapes_catalog):
    with pytest.raises(GenerationError):
        generate_shapes(ShapesConfig(n_images=1, image_size=64, shapes_per_image=(30, 30),
                                     size_range=(0.4, 0.45), max_retries=5), shapes_catalog)


def test_shapes_config_validation():
    with pytest.raises(InputError):
        ShapesConfig(n_images=0)
    with pytest.raises(InputError):
        ShapesConfig(shapes_per_image=(3, 1))
    with pytest.raises(InputError):
        ShapesConfig(image_size=32)


def test_tight_bbox():
    r = np.zeros((5, 6), bool)
    r[1:3, 2:5] = True
    assert tight_bbox(r) == (2.0, 1.0, 5.0, 3.0)


def test_voc_round_trip(tmp_path, toy_samples, shapes_catalog):
    root = export_voc(toy_samples[:5], tmp_path / "toy", "train", shapes_catalog)
    det = load_voc_detection(root, "train", shapes_catalog)
    seg = load_voc_segmentation(root, "train", shapes_catalog)
    for orig, d, s in zip(toy_samples[:5], det, seg):
        assert d.det_annotations == orig.det_annotations
        assert np.array_equal(d.pixels, orig.pixels)
        assert np.array_equal(s.seg_mask, orig.seg_mask)
