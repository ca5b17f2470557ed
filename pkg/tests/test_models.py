import numpy as np
import pytest
import torch
from torch import nn

from detdistill.data import ClassCatalog
from detdistill.exceptions import ConfigurationError, InputError
from detdistill.models import (
    AnchorConfig,
    ContextEnhancement,
    ModelSpec,
    build_model,
    count_parameters,
    generate_anchors,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def voc():
    return ClassCatalog.voc()


@pytest.fixture(scope="module")
def desk_multitask(voc):
    spec = ModelSpec.student(heads=("detection", "segmentation"), profile="desk")
    return build_model(spec, voc, seed=0).eval()


def test_detection_shape_contract(voc):
    anchors = AnchorConfig()
    model = build_model(ModelSpec.student(profile="desk"), voc, anchors, seed=0).eval()
    out = model(torch.zeros(2, 3, 128, 128))
    assert out.segmentation is None
    det = out.detection
    assert len(det.cls_logits) == 5
    for lvl, (c, r, p, stride) in enumerate(zip(det.cls_logits, det.reg_deltas, out.pyramid.levels,
                                               anchors.strides)):
        side = 128 // stride
        assert c.shape == (2, anchors.A * 20, side, side)
        assert r.shape == (2, anchors.A * 4, side, side)
        assert p.shape[-2:] == (side, side)
    n = sum(len(a) for a in generate_anchors(anchors, 128))
    assert det.flat_cls().shape == (2, n, 20)
    assert det.flat_reg().shape == (2, n, 4)


def test_segmentation_shape_contract(voc):
    model = build_model(ModelSpec.student(heads=("segmentation",), profile="desk"), voc, seed=0).eval()
    out = model(torch.zeros(1, 3, 128, 128))
    assert out.detection is None
    assert out.segmentation.logits.shape == (1, 21, 128, 128)


def test_pyramid_channels_uniform_and_halving(desk_multitask):
    out = desk_multitask(torch.zeros(1, 3, 128, 128))
    levels = out.pyramid.levels
    assert len({p.shape[1] for p in levels}) == 1
    assert levels[0].shape[1] == 256
    for a, b in zip(levels, levels[1:]):
        assert b.shape[-1] * 2 == a.shape[-1]


def test_multitask_outputs_share_pyramid(desk_multitask):
    out = desk_multitask(torch.zeros(1, 3, 128, 128))
    assert out.detection.pyramid is out.pyramid
    assert out.segmentation.pyramid is out.pyramid


def test_anchor_count_single_level():
    a = generate_anchors(AnchorConfig(strides=(8, 16, 32), scales=(4.0,), aspect_ratios=(1.0,)), 128)
    assert len(a[0]) == 256
    np.testing.assert_allclose((a[0][0, :2] + a[0][0, 2:]) / 2, [4.0, 4.0])
    np.testing.assert_allclose(a[0][0, 2:] - a[0][0, :2], [32.0, 32.0])


def test_anchor_order_and_config_checks():
    cfg = AnchorConfig(strides=(8, 16, 32), scales=(1.0, 2.0), aspect_ratios=(0.5, 1.0, 2.0))
    assert cfg.A == 6
    lvl = generate_anchors(cfg, 64)[0]
    # second cell along the row follows the A anchors of the first
    np.testing.assert_allclose((lvl[6, :2] + lvl[6, 2:]) / 2, [12.0, 4.0])
    with pytest.raises(ConfigurationError):
        AnchorConfig(strides=(4, 8))
    with pytest.raises(InputError):
        generate_anchors(cfg, 60)


def test_teacher_student_anchors_equal(voc):
    cfg = AnchorConfig()
    t = build_model(ModelSpec.teacher(profile="desk"), voc, cfg, seed=0)
    s = build_model(ModelSpec.student(profile="desk"), voc, cfg, seed=0)
    t_out = t(torch.zeros(1, 3, 128, 128))
    s_out = s(torch.zeros(1, 3, 128, 128))
    for a, b in zip(t_out.pyramid.levels, s_out.pyramid.levels):
        assert a.shape[-2:] == b.shape[-2:]
    assert t_out.detection.flat_cls().shape == s_out.detection.flat_cls().shape


def test_count_parameters_single_conv():
    assert count_parameters(nn.Conv2d(2, 4, 3)) == 76


def test_count_parameters_frozen(voc):
    m = build_model(ModelSpec.student(profile="desk"), voc, seed=0)
    total = count_parameters(m)
    for p in m.backbone.parameters():
        p.requires_grad_(False)
    assert count_parameters(m) < total
    assert count_parameters(m, trainable_only=False) == total


def test_paper_profile_parameter_ratio(voc):
    t = build_model(ModelSpec.teacher(), voc)
    s = build_model(ModelSpec.student(), voc)
    ratio = count_parameters(t) / count_parameters(s)
    assert 1.61 * 0.9 <= ratio <= 1.61 * 1.1


def test_structural_facts(voc):
    for spec in (ModelSpec.teacher(), ModelSpec.student(profile="desk")):
        m = build_model(spec, voc)
        assert isinstance(m.backbone.maxpool, nn.Identity)
        assert not any(isinstance(x, nn.MaxPool2d) for x in m.backbone.modules())
        assert any(isinstance(x, ContextEnhancement) for x in m.modules())


def test_unknown_spec_values():
    with pytest.raises(ConfigurationError):
        ModelSpec(backbone="huge")
    with pytest.raises(ConfigurationError):
        ModelSpec(neck="bifpn")
    with pytest.raises(ConfigurationError):
        ModelSpec(heads=frozenset({"keypoints"}))


def test_duplicate_images_identical_outputs(desk_multitask):
    x = torch.randn(1, 3, 128, 128, generator=torch.Generator().manual_seed(0))
    out = desk_multitask(torch.cat([x, x]))
    for c in out.detection.cls_logits:
        assert torch.equal(c[0], c[1])
    assert torch.equal(out.segmentation.logits[0], out.segmentation.logits[1])


def test_inference_bitwise_deterministic(desk_multitask):
    x = torch.randn(2, 3, 128, 128, generator=torch.Generator().manual_seed(1))
    a, b = desk_multitask(x), desk_multitask(x)
    assert all(torch.equal(p, q) for p, q in zip(a.detection.cls_logits, b.detection.cls_logits))
    assert torch.equal(a.segmentation.logits, b.segmentation.logits)


def test_seeded_build_is_reproducible(voc):
    spec = ModelSpec.student(profile="desk")
    assert parameter_hash(build_model(spec, voc, seed=3)) == parameter_hash(build_model(spec, voc, seed=3))
    assert parameter_hash(build_model(spec, voc, seed=3)) != parameter_hash(build_model(spec, voc, seed=4))


def test_segmentation_softmax_sums_to_one(desk_multitask):
    x = torch.randn(1, 3, 128, 128, generator=torch.Generator().manual_seed(2))
    probs = desk_multitask(x, heads=("segmentation",)).segmentation.logits.softmax(1)
    torch.testing.assert_close(probs.sum(1), torch.ones(1, 128, 128), atol=1e-5, rtol=0)


def test_indivisible_input_rejected(desk_multitask):
    with pytest.raises(InputError):
        desk_multitask(torch.zeros(1, 3, 100, 100))


def test_missing_head_rejected(voc):
    m = build_model(ModelSpec.student(profile="desk"), voc, seed=0)
    with pytest.raises(ConfigurationError):
        m(torch.zeros(1, 3, 128, 128), heads=("segmentation",))


def test_checkpoint_roundtrip(tmp_path, voc, desk_multitask):
    path = save_checkpoint(desk_multitask, tmp_path / "m.pt", {"note": "x"})
    back = load_checkpoint(path)
    assert parameter_hash(back) == parameter_hash(desk_multitask)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, catalog=ClassCatalog.shapes())
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, spec=ModelSpec.teacher(profile="desk"))
