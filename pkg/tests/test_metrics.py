import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from detdistill.data import DetAnnotation
from detdistill.exceptions import InputError
from detdistill.metrics import (
    COCO_THRESHOLDS,
    Detection,
    MetricReport,
    ap_at_iou,
    class_mean_ap,
    evaluate_detections,
    format_table,
    map_over_thresholds,
    postprocess,
    seg_iou,
)
from detdistill.models import DetectionOutput


def gt(*boxes, cls=0, difficult=False):
    return [DetAnnotation(cls, b, difficult) for b in boxes]


def test_ap_single_perfect_detection():
    gts = {"a": gt((0, 0, 10, 10))}
    assert ap_at_iou([Detection("a", 0, (0, 0, 10, 10), 0.9)], gts, 0.5, 0) == 1.0


def test_ap_half_recall():
    gts = {"a": gt((0, 0, 10, 10), (20, 20, 30, 30))}
    assert ap_at_iou([Detection("a", 0, (0, 0, 10, 10), 0.9)], gts, 0.5, 0) == pytest.approx(0.5)


def test_ap_difficult_match_is_ignored():
    gts = {"a": gt((0, 0, 10, 10)) + gt((20, 20, 30, 30), difficult=True)}
    dets = [Detection("a", 0, (20, 20, 30, 30), 0.95), Detection("a", 0, (0, 0, 10, 10), 0.5)]
    assert ap_at_iou(dets, gts, 0.5, 0) == 1.0


def test_ap_duplicate_is_false_positive():
    gts = {"a": gt((0, 0, 10, 10))}
    dets = [Detection("a", 0, (0, 0, 10, 10), 0.9), Detection("a", 0, (0, 0, 10, 10), 0.8)]
    assert ap_at_iou(dets, gts, 0.5, 0) == 1.0
    dets = [Detection("a", 0, (0, 0, 10, 10), 0.7), Detection("a", 0, (0, 0, 10, 10), 0.8)]
    assert ap_at_iou(dets, gts, 0.5, 0) == 1.0
    # a false positive ranked first halves precision at full recall
    fp_first = [Detection("a", 0, (50, 50, 60, 60), 0.9), Detection("a", 0, (0, 0, 10, 10), 0.8)]
    assert ap_at_iou(fp_first, gts, 0.5, 0) == pytest.approx(0.5)


def test_ap_rejects_bad_threshold():
    with pytest.raises(InputError):
        ap_at_iou([], {"a": gt((0, 0, 1, 1))}, 1.0, 0)


def test_ap_no_positives_is_zero():
    assert ap_at_iou([Detection("a", 0, (0, 0, 1, 1), 0.5)], {"a": []}, 0.5, 0) == 0.0


def test_eleven_point_metric():
    gts = {"a": gt((0, 0, 10, 10), (20, 20, 30, 30))}
    dets = [Detection("a", 0, (0, 0, 10, 10), 0.9)]
    # precision 1 up to recall 0.5: points 0.0..0.5 -> 6 of 11
    assert ap_at_iou(dets, gts, 0.5, 0, use_07_metric=True) == pytest.approx(6 / 11)


def iou1(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


def oracle_ap(dets, gts, thr):
    """Independent reference: greedy matching, then the area under the monotone precision envelope."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    used = {k: [False] * len(v) for k, v in gts.items()}
    npos = sum(not a.difficult for v in gts.values() for a in v)
    flags = []
    for i in order:
        d = dets[i]
        anns = gts.get(d.image_id, [])
        ious = [iou1(d.box, a.box) for a in anns]
        cands = [j for j, a in enumerate(anns) if not a.difficult and not used[d.image_id][j] and ious[j] >= thr]
        if cands:
            j = max(cands, key=lambda j: (ious[j], -j))
            used[d.image_id][j] = True
            flags.append(1)
        elif any(a.difficult and ious[j] >= thr for j, a in enumerate(anns)):
            continue
        else:
            flags.append(0)
    if npos == 0:
        return 0.0
    prec, rec = [], []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        prec.append(tp / k)
        rec.append(tp / npos)
    ap, prev_r = 0.0, 0.0
    for k in range(len(flags)):
        if rec[k] > prev_r:
            ap += (rec[k] - prev_r) * max(prec[k:])
            prev_r = rec[k]
    return ap


def random_scene(seed, n_img=3, n_gt=4, n_det=8, jitter=4.0):
    rng = np.random.default_rng(seed)
    gts, dets = {}, []
    for i in range(n_img):
        anns = []
        for _ in range(rng.integers(0, n_gt + 1)):
            x, y = rng.uniform(0, 60, 2)
            w, h = rng.uniform(5, 30, 2)
            anns.append(DetAnnotation(0, (x, y, x + w, y + h), bool(rng.random() < 0.15)))
        gts[f"im{i}"] = anns
        for _ in range(rng.integers(0, n_det + 1)):
            if anns and rng.random() < 0.7:
                b = np.array(anns[rng.integers(len(anns))].box) + rng.normal(0, jitter, 4)
            else:
                x, y = rng.uniform(0, 60, 2)
                b = np.array([x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)])
            if b[2] - b[0] > 0.5 and b[3] - b[1] > 0.5:
                dets.append(Detection(f"im{i}", 0, tuple(b), float(np.round(rng.random(), 2))))
    return dets, gts


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.3, 0.5, 0.75]))
def test_ap_matches_oracle(seed, thr):
    dets, gts = random_scene(seed)
    assert ap_at_iou(dets, gts, thr, 0) == pytest.approx(oracle_ap(dets, gts, thr), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.5, 2.0, 7.0]))
def test_ap_scale_invariant(seed, s):
    dets, gts = random_scene(seed)
    sd = [Detection(d.image_id, d.class_id, tuple(np.array(d.box) * s), d.score) for d in dets]
    sg = {k: [DetAnnotation(a.class_id, tuple(np.array(a.box) * s), a.difficult) for a in v]
          for k, v in gts.items()}
    assert ap_at_iou(sd, sg, 0.5, 0) == pytest.approx(ap_at_iou(dets, gts, 0.5, 0), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_ap_non_increasing_in_threshold(seed):
    dets, gts = random_scene(seed)
    aps = [ap_at_iou(dets, gts, t, 0) for t in COCO_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
    assert all(0.0 <= a <= 1.0 for a in aps)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_ap_grows_with_a_top_ranked_true_positive(seed):
    dets, gts = random_scene(seed)
    free = [(k, a) for k, v in gts.items() for a in v if not a.difficult]
    if not free:
        return
    # a perfect detection for every gt, ranked above everything, gives AP 1
    top = [Detection(k, 0, a.box, 2.0) for k, a in free]
    assert ap_at_iou(top + dets, gts, 0.5, 0) == pytest.approx(1.0)


def test_map_identities():
    dets, gts = random_scene(7, n_img=6)
    rep = evaluate_detections(dets, gts)
    assert map_over_thresholds(dets, gts, [0.5]) == pytest.approx(rep.ap50)
    assert rep.map == pytest.approx(map_over_thresholds(dets, gts))
    assert rep.ap10 >= rep.ap25 >= rep.ap50 >= rep.ap75 - 1e-12
    assert rep.map == pytest.approx(np.mean([class_mean_ap(dets, gts, t) for t in COCO_THRESHOLDS]))


def test_map_averages_over_classes_with_gt():
    gts = {"a": gt((0, 0, 10, 10), cls=0) + gt((20, 20, 30, 30), cls=2)}
    dets = [Detection("a", 0, (0, 0, 10, 10), 0.9)]
    assert class_mean_ap(dets, gts, 0.5) == pytest.approx(0.5)


def test_report_json_roundtrip():
    dets, gts = random_scene(3)
    rep = evaluate_detections(dets, gts)
    rep.seg_miou = 0.25
    back = MetricReport.from_dict(__import__("json").loads(rep.to_json()))
    assert back.close_to(rep, 1e-12)


def test_seg_iou_hand_fixture():
    pred = np.array([[0, 1, 1, 0]])
    gt_ = np.array([[0, 0, 1, 1]])
    per_class, mean = seg_iou([pred], [gt_], 2)
    np.testing.assert_allclose(per_class, [1 / 3, 1 / 3])
    assert mean == pytest.approx(1 / 3)


def test_seg_iou_ignores_255_and_absent_classes():
    pred = np.array([[0, 1, 2]])
    gt_ = np.array([[0, 1, 255]])
    per_class, mean = seg_iou([pred], [gt_], 4)
    assert per_class[0] == 1.0 and per_class[1] == 1.0
    assert np.isnan(per_class[3])
    assert mean == 1.0


def test_seg_iou_permutation_invariant():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 3, (5, 5)) for _ in range(6)]
    gts = [rng.integers(0, 3, (5, 5)) for _ in range(6)]
    perm = rng.permutation(6)
    a = seg_iou(preds, gts, 3)[1]
    b = seg_iou([preds[i] for i in perm], [gts[i] for i in perm], 3)[1]
    assert a == pytest.approx(b)


def test_postprocess_nms_and_cap():
    C, A = 2, 1
    logits = torch.full((1, A * C, 2, 2), -10.0)
    logits[0, 0] = 5.0  # class 0 everywhere
    reg = torch.zeros(1, 4, 2, 2)
    out = DetectionOutput([logits], [reg], None, C, A)
    anchors = np.array([[0, 0, 10, 10], [1, 0, 11, 10], [20, 20, 30, 30], [40, 40, 50, 50]], float)
    dets = postprocess(out, anchors, ["x"])
    assert len(dets) == 3  # the two overlapping anchors collapse
    assert all(d.class_id == 0 for d in dets)
    assert len(postprocess(out, anchors, ["x"], max_dets=2)) == 2


def test_format_table():
    s = format_table([("Supervised", "1/2", {"AP50": 0.5, "mAP": None})], ["AP50", "mAP"], "Results")
    assert "50.00" in s and "Supervised" in s and "-" in s
