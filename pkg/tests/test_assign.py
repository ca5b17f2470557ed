import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from detdistill.assign import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    decode_boxes,
    encode_boxes,
    iou_matrix,
    make_soft_targets,
    match_iou,
    match_mutual_guide,
)
from detdistill.exceptions import ConfigurationError, InputError
from detdistill.models import DetectionOutput


def random_boxes(rng, n, lo=0, hi=100, min_size=1.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(min_size, 40, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_iou_half_overlap():
    assert iou_matrix([[0, 0, 10, 10]], [[5, 0, 15, 10]])[0, 0] == pytest.approx(1 / 3)


def test_iou_identity_and_disjoint():
    b = np.array([[0, 0, 4, 4], [10, 10, 12, 15]], float)
    m = iou_matrix(b, b)
    np.testing.assert_allclose(np.diag(m), 1.0)
    assert m[0, 1] == 0.0


def test_iou_rejects_degenerate():
    with pytest.raises(InputError):
        iou_matrix([[0, 0, 0, 5]], [[0, 0, 1, 1]])


def test_encode_center_offset():
    d = encode_boxes(np.array([[5.0, 5.0, 15.0, 15.0]]), np.array([[0.0, 0.0, 10.0, 10.0]]))
    np.testing.assert_allclose(d, [[0.5, 0.5, 0.0, 0.0]])


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    boxes = random_boxes(rng, 10_000)
    anchors = random_boxes(rng, 10_000, min_size=4)
    back = decode_boxes(encode_boxes(boxes, anchors), anchors)
    np.testing.assert_allclose(back, boxes, atol=1e-5)


def test_encode_decode_torch_matches_numpy():
    rng = np.random.default_rng(1)
    boxes, anchors = random_boxes(rng, 50), random_boxes(rng, 50, min_size=4)
    d_np = encode_boxes(boxes, anchors)
    d_t = encode_boxes(torch.from_numpy(boxes), torch.from_numpy(anchors))
    np.testing.assert_allclose(d_t.numpy(), d_np, atol=1e-12)


def test_encode_rejects_empty_box():
    with pytest.raises(InputError):
        encode_boxes(np.array([[1.0, 1.0, 1.0, 4.0]]), np.array([[0.0, 0.0, 4.0, 4.0]]))


def brute_force_match(anchors, gts, pos, neg):
    iou = iou_matrix(anchors, gts)
    labels, matched = [], []
    for i in range(len(anchors)):
        best = max(range(len(gts)), key=lambda g: (iou[i, g], -g))
        if iou[i, best] >= pos:
            labels.append(POSITIVE)
            matched.append(best)
        elif iou[i, best] < neg:
            labels.append(NEGATIVE)
            matched.append(-1)
        else:
            labels.append(IGNORE)
            matched.append(-1)
    for g in reversed(range(len(gts))):
        i = max(range(len(anchors)), key=lambda a: (iou[a, g], -a))
        if iou[i, g] > 0:
            labels[i] = POSITIVE
            matched[i] = g
    return np.array(labels), np.array(matched)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 5))
def test_match_iou_equals_brute_force(seed, n_anchors, n_gts):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, n_anchors)
    gts = random_boxes(rng, n_gts)
    m = match_iou(anchors, gts, 0.5, 0.4)
    labels, matched = brute_force_match(anchors, gts, 0.5, 0.4)
    np.testing.assert_array_equal(m.labels, labels)
    np.testing.assert_array_equal(m.matched_gt, matched)


def test_match_iou_tie_goes_to_lower_gt():
    anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60]], float)
    gts = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], float)
    m = match_iou(anchors, gts)
    assert m.labels[0] == POSITIVE and m.matched_gt[0] == 0


def test_match_iou_forces_best_anchor():
    anchors = np.array([[0, 0, 10, 10], [0, 0, 30, 30]], float)
    gts = np.array([[0, 0, 20, 20]], float)  # IoU 0.25 and 0.444, neither >= 0.5
    m = match_iou(anchors, gts)
    assert m.labels.tolist() == [NEGATIVE, POSITIVE]


def test_match_iou_no_gts():
    m = match_iou(np.array([[0, 0, 5, 5]], float), np.zeros((0, 4)))
    assert m.labels.tolist() == [NEGATIVE]


def test_mutual_guide_hand_fixture():
    gts = np.array([[0, 0, 10, 10]], float)
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 20], [0, 0, 20, 20], [40, 40, 50, 50]], float)
    anchor_iou = np.array([1.0, 0.5, 0.25, 0.0])
    cls = np.array([0.1, 0.9, 0.8, 0.99])
    reg = np.zeros((4, 4))
    reg[1] = [0.0, -0.25, 0.0, np.log(0.5)]  # decodes exactly onto the gt
    pred_iou = np.array([1.0, 1.0, 0.25, 0.0])
    expected = anchor_iou * (1 + pred_iou) * (1 + cls)
    np.testing.assert_allclose(expected, [2.2, 1.9, 0.5625, 0.0])
    m = match_mutual_guide(anchors, gts, cls, reg, k=2)
    assert m.positive.tolist() == [0, 1]
    assert m.labels[2] == NEGATIVE and m.labels[3] == NEGATIVE
    m3 = match_mutual_guide(anchors, gts, cls, reg, k=3)
    assert m3.positive.tolist() == [0, 1, 2]


def test_mutual_guide_prediction_reorders():
    gts = np.array([[0, 0, 10, 10]], float)
    anchors = np.array([[0, 0, 10, 12], [0, 0, 12, 10]], float)  # equal anchor IoU
    cls = np.array([0.1, 0.9])
    m = match_mutual_guide(anchors, gts, cls, np.zeros((2, 4)), k=1)
    assert m.positive.tolist() == [1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 4), st.integers(1, 9))
def test_mutual_guide_uniform_predictions_equal_iou_topk(seed, n, g, k):
    rng = np.random.default_rng(seed)
    anchors, gts = random_boxes(rng, n), random_boxes(rng, g)
    iou = iou_matrix(anchors, gts)
    m = match_mutual_guide(anchors, gts, np.full(n, 0.5), np.full((n, 4), 50.0), k=k)
    expected = np.full(n, -1)
    best = np.full(n, -1.0)
    for j in range(g):
        for a in np.argsort(-iou[:, j], kind="stable")[:k]:
            if iou[a, j] > 0 and iou[a, j] > best[a]:
                best[a], expected[a] = iou[a, j], j
    np.testing.assert_array_equal(m.matched_gt, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 3.0]))
def test_mutual_guide_scale_equivariant(seed, s):
    rng = np.random.default_rng(seed)
    anchors, gts = random_boxes(rng, 20), random_boxes(rng, 3)
    cls = rng.uniform(size=(20, 4))
    labels = rng.integers(0, 4, size=3)
    reg = rng.normal(scale=0.2, size=(20, 4))
    a = match_mutual_guide(anchors, gts, cls, reg, labels=labels, k=4)
    b = match_mutual_guide(anchors * s, gts * s, cls, reg, labels=labels, k=4)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.matched_gt, b.matched_gt)


def test_mutual_guide_needs_labels_for_class_axis():
    with pytest.raises(InputError):
        match_mutual_guide(np.array([[0, 0, 4, 4]], float), np.array([[0, 0, 4, 4]], float),
                           np.ones((1, 3)), np.zeros((1, 4)))


def fake_output(logit_levels, reg_levels, C, A):
    return DetectionOutput(logit_levels, reg_levels, None, C, A)


def test_soft_targets_are_sigmoid_and_raw_deltas():
    C, A = 2, 1
    logits = torch.tensor([0.0, 2.0, -1.0, 0.5]).view(1, A * C, 1, 2)
    reg = torch.arange(8.0).view(1, A * 4, 1, 2)
    soft = make_soft_targets(fake_output([logits], [reg], C, A))
    assert soft.cls_scores.shape == (1, 2, 2)
    flat = soft.cls_scores.flatten().sort().values
    np.testing.assert_allclose(flat.numpy(), torch.sigmoid(torch.tensor([-1.0, 0.0, 0.5, 2.0])).numpy(),
                               rtol=1e-6)
    assert soft.reg_deltas.shape == (1, 2, 4)
    assert sorted(soft.reg_deltas.flatten().tolist()) == list(range(8))
    assert not soft.cls_scores.requires_grad


def test_soft_targets_anchor_mismatch():
    out = fake_output([torch.zeros(1, 2, 2, 2)], [torch.zeros(1, 4, 2, 2)], 2, 1)
    with pytest.raises(ConfigurationError):
        make_soft_targets(out, num_anchors=5)
