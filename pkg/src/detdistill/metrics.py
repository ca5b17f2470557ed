"""Detection AP / mAP and segmentation IoU."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from torchvision.ops import batched_nms

from .assign import decode_boxes, iou_matrix
from .data import IGNORE_INDEX, DetAnnotation, ImageSample
from .exceptions import InputError

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        object.__setattr__(self, "box", box)
        if not (box[0] < box[2] and box[1] < box[3]):
            raise InputError(f"malformed detection box {box}")
        if not np.isfinite(self.score):
            raise InputError("detection score must be finite")


def ground_truth_index(gts) -> dict:
    """Normalise ground truth to ``{image_id: [DetAnnotation, ...]}``."""
    if isinstance(gts, Mapping):
        return {k: list(v) for k, v in gts.items()}
    out = {}
    for s in gts:
        if isinstance(s, ImageSample):
            out[s.id] = list(s.det_annotations or ())
        else:
            image_id, ann = s
            out.setdefault(image_id, []).append(ann)
    return out


def _sorted_dets(dets: Sequence[Detection]) -> list:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    return [dets[i] for i in order]


def _prepare_matching(dets, gts, class_id: int) -> tuple:
    """Sorted detections of one class with their IoU rows, shared by every threshold."""
    gt_idx = ground_truth_index(gts)
    per_image = {}
    npos = 0
    for image_id, anns in gt_idx.items():
        cls_anns = [a for a in anns if a.class_id == class_id]
        boxes = np.array([a.box for a in cls_anns], dtype=np.float64).reshape(-1, 4)
        difficult = [bool(a.difficult) for a in cls_anns]
        npos += difficult.count(False)
        per_image[image_id] = (boxes, difficult)
    dets = _sorted_dets([d for d in dets if d.class_id == class_id])
    # one IoU matrix per image instead of one call per detection
    rows = {}
    for i, d in enumerate(dets):
        rows.setdefault(d.image_id, []).append(i)
    ious = [None] * len(dets)
    for image_id, idx in rows.items():
        boxes = per_image.get(image_id, (np.zeros((0, 4)),))[0]
        if len(boxes):
            m = iou_matrix(np.array([dets[i].box for i in idx]), boxes)
            for i, row in zip(idx, m.tolist()):
                ious[i] = row
    return dets, per_image, ious, npos


def _greedy(prepared, iou_thr: float):
    dets, per_image, ious, npos = prepared
    used = {k: [False] * len(v[1]) for k, v in per_image.items()}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        iou = ious[i]
        if iou is None:
            fp[i] = 1
            continue
        difficult, taken = per_image[d.image_id][1], used[d.image_id]
        best, hit_difficult = -1, False
        for j, v in enumerate(iou):
            if v < iou_thr:
                continue
            if difficult[j]:
                hit_difficult = True
            elif not taken[j] and (best < 0 or v > iou[best]):
                best = j
        if best >= 0:
            taken[best] = True
            tp[i] = 1
        elif not hit_difficult:
            fp[i] = 1
    return tp, fp, npos


def _check_threshold(iou_thr):
    if not 0 < iou_thr < 1:
        raise InputError(f"IoU threshold must lie in (0, 1), got {iou_thr}")


def match_detections(dets, gts, iou_thr: float, class_id: int):
    """Greedy VOC matching. Returns ``(tp, fp, npos)``; ignored detections get neither flag."""
    _check_threshold(iou_thr)
    return _greedy(_prepare_matching(dets, gts, class_id), iou_thr)


def average_precision(recall: np.ndarray, precision: np.ndarray, use_07_metric: bool = False) -> float:
    if use_07_metric:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            p = precision[recall >= t].max() if np.any(recall >= t) else 0.0
            ap += p / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def ap_at_iou(dets, gts, iou_thr: float, class_id: int, use_07_metric: bool = False) -> float:
    return _ap_from_flags(*match_detections(dets, gts, iou_thr, class_id), use_07_metric)


def _ap_from_flags(tp, fp, npos, use_07_metric=False) -> float:
    if npos == 0:
        return 0.0
    keep = (tp + fp) > 0
    tp, fp = np.cumsum(tp[keep]), np.cumsum(fp[keep])
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return average_precision(recall, precision, use_07_metric)


def classes_with_gt(gts, num_classes: Optional[int] = None) -> list:
    present = set()
    for anns in ground_truth_index(gts).values():
        present.update(a.class_id for a in anns if not a.difficult)
    return sorted(c for c in present if num_classes is None or c < num_classes)


def class_mean_ap(dets, gts, iou_thr: float, classes=None, use_07_metric: bool = False) -> float:
    classes = classes_with_gt(gts) if classes is None else classes
    if not classes:
        return 0.0
    return float(np.mean([ap_at_iou(dets, gts, iou_thr, c, use_07_metric) for c in classes]))


def map_over_thresholds(dets, gts, thresholds: Sequence[float] = COCO_THRESHOLDS,
                        use_07_metric: bool = False) -> float:
    if len(thresholds) == 0:
        raise InputError("need at least one threshold")
    gts = ground_truth_index(gts)
    classes = classes_with_gt(gts)
    return float(np.mean([class_mean_ap(dets, gts, t, classes, use_07_metric) for t in thresholds]))


def seg_iou(pred_masks, gt_masks, C: int, ignore: int = IGNORE_INDEX):
    """Dataset-level per-class IoU (NaN for classes absent from both) and mean over gt classes."""
    pred_masks, gt_masks = list(pred_masks), list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise InputError("need one prediction per ground-truth mask")
    inter = np.zeros(C, dtype=np.int64)
    union = np.zeros(C, dtype=np.int64)
    in_gt = np.zeros(C, dtype=bool)
    for p, g in zip(pred_masks, gt_masks):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise InputError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
        valid = g != ignore
        p, g = p[valid], g[valid]
        for c in range(C):
            pc, gc = p == c, g == c
            inter[c] += int((pc & gc).sum())
            union[c] += int((pc | gc).sum())
            in_gt[c] |= bool(gc.any())
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    mean = float(np.mean(per_class[in_gt])) if in_gt.any() else 0.0
    return per_class, mean


# ------------------------------------------------------------------ post-processing

def postprocess(det_output, anchors: np.ndarray, image_ids: Sequence[str], score_thr: float = 0.05,
                nms_iou: float = 0.5, max_dets: int = 300, pre_nms: int = 1000,
                image_size=None) -> list:
    """Decode a detection output into per-image detections after class-wise NMS."""
    scores_all = torch.sigmoid(det_output.flat_cls()).detach()
    deltas_all = det_output.flat_reg().detach()
    anchors_t = torch.as_tensor(anchors, dtype=deltas_all.dtype)
    out = []
    for b, image_id in enumerate(image_ids):
        scores = scores_all[b]
        boxes = decode_boxes(deltas_all[b], anchors_t)
        if image_size is not None:
            h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
            boxes = torch.stack([boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h),
                                 boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], -1)
        flat = scores.flatten()
        cand = torch.nonzero(flat > score_thr).squeeze(1)
        if cand.numel() > pre_nms:
            cand = cand[flat[cand].topk(pre_nms).indices]
        a_idx, c_idx = cand // scores.shape[1], cand % scores.shape[1]
        bx, sc = boxes[a_idx], flat[cand]
        ok = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
        bx, sc, c_idx = bx[ok], sc[ok], c_idx[ok]
        keep = batched_nms(bx.float(), sc.float(), c_idx, nms_iou)[:max_dets]
        out.extend(Detection(image_id, int(c_idx[k]), tuple(bx[k].tolist()), float(sc[k]))
                   for k in keep.tolist())
    return out


# ------------------------------------------------------------------ reports

@dataclass
class MetricReport:
    per_class_ap: dict = field(default_factory=dict)
    ap50: float = 0.0
    ap75: float = 0.0
    map: float = 0.0
    ap10: Optional[float] = None
    ap25: Optional[float] = None
    seg_miou: Optional[float] = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_class_ap"] = {str(k): list(v) for k, v in d.get("per_class_ap", {}).items()}
        return cls(**d)

    def close_to(self, other: "MetricReport", tol: float = 1e-6) -> bool:
        a, b = self.to_dict(), other.to_dict()
        return _close(a, b, tol)


def _close(a, b, tol):
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_close(x, y, tol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return a is b
        return abs(a - b) <= tol or (np.isnan(a) and np.isnan(b))
    return a == b


def evaluate_detections(dets, gts, thresholds: Sequence[float] = COCO_THRESHOLDS,
                        extra_thresholds: Sequence[float] = (0.1, 0.25),
                        use_07_metric: bool = False) -> MetricReport:
    gts = ground_truth_index(gts)
    classes = classes_with_gt(gts)
    levels = sorted(set(thresholds) | {0.5, 0.75} | set(extra_thresholds))
    for t in levels:
        _check_threshold(t)
    prepared = [_prepare_matching(dets, gts, c) for c in classes]
    per_class = {f"{t:.2f}": [_ap_from_flags(*_greedy(p, t), use_07_metric) for p in prepared]
                 for t in levels}

    def cmean(t):
        v = per_class[f"{t:.2f}"]
        return float(np.mean(v)) if v else 0.0

    rep = MetricReport(
        per_class_ap=per_class,
        ap50=cmean(0.5),
        ap75=cmean(0.75),
        map=float(np.mean([cmean(t) for t in thresholds])),
        counts={"images": len(gts), "gts": sum(len(v) for v in gts.values()), "dets": len(dets)},
    )
    if 0.1 in extra_thresholds:
        rep.ap10 = cmean(0.1)
    if 0.25 in extra_thresholds:
        rep.ap25 = cmean(0.25)
    return rep


def format_table(rows: Iterable[tuple], columns: Sequence[str], title: str = "") -> str:
    """Aligned text table; ``rows`` are ``(label, subset, {column: value})``."""
    rows = list(rows)
    head = ["Model", "Data", *columns]
    body = []
    for label, subset, values in rows:
        cells = [label, subset or ""]
        for c in columns:
            v = values.get(c)
            cells.append("-" if v is None else f"{100 * v:.2f}")
        body.append(cells)
    widths = [max(len(str(r[i])) for r in [head, *body]) for i in range(len(head))]

    def line(cells):
        return "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths)))

    rule = "-" * len(line(head))
    out = ([title] if title else []) + [rule, line(head), rule, *map(line, body), rule]
    return "\n".join(out)
