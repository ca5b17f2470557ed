"""Anchor-to-ground-truth assignment, box delta coding and dense soft targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigurationError, InputError

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class MatchResult:
    """``labels[i]`` is POSITIVE / NEGATIVE / IGNORE; ``matched_gt[i]`` is -1 unless positive."""

    labels: np.ndarray
    matched_gt: np.ndarray

    def __post_init__(self):
        pos = self.labels == POSITIVE
        if np.any(self.matched_gt[pos] < 0) or np.any(self.matched_gt[~pos] >= 0):
            raise InputError("matched_gt must be set exactly for positive anchors")

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


@dataclass
class SoftTargets:
    cls_scores: torch.Tensor  # (B, N, C) in [0, 1]
    reg_deltas: torch.Tensor  # (B, N, 4)

    @property
    def num_anchors(self) -> int:
        return self.cls_scores.shape[1]


def _as_boxes(b, name):
    arr = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return arr


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a, b = _as_boxes(boxes_a, "a"), _as_boxes(boxes_b, "b")
    for arr, name in ((a, "boxes_a"), (b, "boxes_b")):
        if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
            raise InputError(f"{name} contains a degenerate (zero-area) box")
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def box_iou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-aligned IoU of two ``(N, 4)`` tensors; degenerate predictions give 0."""
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter).clamp(min=1e-9)


def match_iou(anchors, gts, pos_thr: float = 0.5, neg_thr: float = 0.4) -> MatchResult:
    anchors = _as_boxes(anchors, "anchors")
    gts = _as_boxes(gts, "gts")
    if pos_thr < neg_thr:
        raise InputError(f"pos_thr {pos_thr} < neg_thr {neg_thr}")
    n = len(anchors)
    if n == 0:
        raise InputError("no anchors to match")
    if len(gts) == 0:
        return MatchResult(np.full(n, NEGATIVE), np.full(n, -1))
    iou = iou_matrix(anchors, gts)
    best_gt = iou.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    best_iou = iou[np.arange(n), best_gt]
    labels = np.full(n, IGNORE)
    labels[best_iou < neg_thr] = NEGATIVE
    labels[best_iou >= pos_thr] = POSITIVE
    matched = np.where(labels == POSITIVE, best_gt, -1)
    # every gt keeps at least its best anchor; the lower gt index wins a contested anchor
    for g in reversed(range(len(gts))):
        a = int(iou[:, g].argmax())
        if iou[a, g] > 0:
            labels[a] = POSITIVE
            matched[a] = g
    return MatchResult(labels, matched)


def match_mutual_guide(anchors, gts, cls_preds, reg_preds, labels=None, k: int = 9,
                       neg_thr: float = 0.4) -> MatchResult:
    """Top-k assignment per gt under a cross-task quality score.

    ``cls_preds`` are per-anchor class probabilities ``(N, C)`` (or ``(N,)`` already
    gathered for the gt class) and ``reg_preds`` the predicted deltas ``(N, 4)``.
    Anchors are ranked for each gt by ``anchor_iou * (1 + pred_iou) * (1 + score)``:
    the localization quality of the decoded prediction promotes anchors for
    classification and the classification confidence promotes them for regression.
    With uninformative predictions the ranking is the plain anchor-IoU ranking.
    Anchors picked by several gts go to the gt with the higher combined score.
    Anchors not selected are negative when their anchor IoU is below ``neg_thr``
    with every gt and ignored otherwise.
    """
    anchors = _as_boxes(anchors, "anchors")
    gts = _as_boxes(gts, "gts")
    n = len(anchors)
    if n == 0:
        raise InputError("no anchors to match")
    if len(gts) == 0:
        return MatchResult(np.full(n, NEGATIVE), np.full(n, -1))
    cls_preds = np.asarray(cls_preds, dtype=np.float64)
    reg_preds = np.asarray(reg_preds, dtype=np.float64).reshape(n, 4)
    if cls_preds.shape[0] != n:
        raise InputError("predictions must be aligned with anchors")
    anchor_iou = iou_matrix(anchors, gts)
    decoded = decode_boxes(reg_preds, anchors)
    pred_iou = _iou_loose(decoded, gts)
    if cls_preds.ndim == 1:
        score = np.repeat(cls_preds[:, None], len(gts), axis=1)
    else:
        if labels is None:
            raise InputError("labels are required when cls_preds has a class axis")
        score = cls_preds[:, np.asarray(labels, dtype=np.int64)]
    combined = anchor_iou * (1.0 + pred_iou) * (1.0 + score)
    kk = min(k, n)
    best = np.full(n, -1.0)
    matched = np.full(n, -1)
    for g in range(len(gts)):
        # stable sort: ties go to the lowest anchor index
        order = np.argsort(-combined[:, g], kind="stable")[:kk]
        for a in order:
            if combined[a, g] <= 0:
                continue
            if combined[a, g] > best[a]:
                best[a] = combined[a, g]
                matched[a] = g
    labels_out = np.where(anchor_iou.max(axis=1) < neg_thr, NEGATIVE, IGNORE)
    labels_out[matched >= 0] = POSITIVE
    return MatchResult(labels_out, matched)


def _iou_loose(a, b):
    """IoU that tolerates degenerate predicted boxes (treated as zero area)."""
    a = np.asarray(a, dtype=np.float64)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    return inter / np.maximum(area_a[:, None] + area_b[None] - inter, 1e-12)


def _lib(x):
    return torch if isinstance(x, torch.Tensor) else np


def encode_boxes(boxes, anchors):
    """(dx, dy, dw, dh): center offset over anchor size, log size ratio."""
    xp = _lib(boxes)
    bw, bh = boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    if bool((bw <= 0).any()) or bool((bh <= 0).any()) or bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise InputError("boxes and anchors must have positive width and height")
    bx, by = boxes[..., 0] + bw / 2, boxes[..., 1] + bh / 2
    ax, ay = anchors[..., 0] + aw / 2, anchors[..., 1] + ah / 2
    return xp.stack([(bx - ax) / aw, (by - ay) / ah, xp.log(bw / aw), xp.log(bh / ah)], -1)


def decode_boxes(deltas, anchors, clip: float = 4.135):
    """Inverse of :func:`encode_boxes`; size deltas are clipped at ``clip`` (~ log 1000/16)."""
    xp = _lib(deltas)
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise InputError("anchors must have positive width and height")
    ax, ay = anchors[..., 0] + aw / 2, anchors[..., 1] + ah / 2
    if xp is torch:
        dw, dh = deltas[..., 2].clamp(max=clip), deltas[..., 3].clamp(max=clip)
    else:
        dw, dh = np.minimum(deltas[..., 2], clip), np.minimum(deltas[..., 3], clip)
    cx, cy = ax + deltas[..., 0] * aw, ay + deltas[..., 1] * ah
    w, h = aw * xp.exp(dw), ah * xp.exp(dh)
    return xp.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def make_soft_targets(teacher_output, num_anchors: int | None = None) -> SoftTargets:
    """Dense targets from a teacher: sigmoid scores and raw deltas for every anchor."""
    with torch.no_grad():
        cls = torch.sigmoid(teacher_output.flat_cls()).detach()
        reg = teacher_output.flat_reg().detach()
    if num_anchors is not None and cls.shape[1] != num_anchors:
        raise ConfigurationError(
            f"teacher produces {cls.shape[1]} anchors, student expects {num_anchors}")
    return SoftTargets(cls, reg)
