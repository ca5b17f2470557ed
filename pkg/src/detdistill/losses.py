"""Training objectives: detection, soft self-training, segmentation and feature imitation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, InputError

SOFT_CLS_WEIGHT = 5e3
KD_METHODS = ("none", "mse", "pdf", "defeat")
PDF_EPS = 1e-6


class AllIgnoredWarning(UserWarning):
    """Every pixel of a segmentation batch carries the ignore label."""


@dataclass(frozen=True)
class KDConfig:
    method: str = "none"
    fg_weight: float = 2.0
    bg_weight: float = 0.5
    weight: float = 1.0

    def __post_init__(self):
        if self.method not in KD_METHODS:
            raise ConfigurationError(f"kd.method must be one of {KD_METHODS}, got {self.method!r}")
        if min(self.fg_weight, self.bg_weight, self.weight) < 0:
            raise ConfigurationError("KD weights must be non-negative")


@dataclass
class LossBundle:
    components: dict
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.components.items():
            if _scalar(v) < 0:
                raise InputError(f"loss component {k!r} is negative: {_scalar(v)}")

    @property
    def total(self) -> torch.Tensor:
        terms = [self.weights.get(k, 1.0) * v for k, v in self.components.items()]
        return sum(terms[1:], terms[0]) if terms else torch.zeros(())

    def items(self) -> dict:
        out = {k: _scalar(v) for k, v in self.components.items()}
        out["total"] = _scalar(self.total)
        return out


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


class FeatureProjector(nn.Module):
    """One 1x1 conv per pyramid level mapping student channels to teacher channels."""

    def __init__(self, student_channels: int, teacher_channels: int, num_levels: int):
        super().__init__()
        self.maps = nn.ModuleList(
            nn.Conv2d(student_channels, teacher_channels, 1) for _ in range(num_levels))

    def forward(self, levels):
        return [m(x) for m, x in zip(self.maps, levels)]


def _levels(p):
    return list(p.levels) if hasattr(p, "levels") else list(p)


def _project(student, projector):
    s = _levels(student)
    return s if projector is None else projector(s)


def _pairs(teacher_pyr, student_pyr, projector):
    t = [x.detach() for x in _levels(teacher_pyr)]
    s = _project(student_pyr, projector)
    if len(t) != len(s):
        raise ConfigurationError(f"teacher has {len(t)} levels, student {len(s)}")
    for a, b in zip(t, s):
        if a.shape != b.shape:
            raise ConfigurationError(f"feature shape mismatch: teacher {tuple(a.shape)} vs "
                                     f"projected student {tuple(b.shape)}")
    return t, s


# ------------------------------------------------------------------- detection

def balanced_l1(pred, target, alpha: float = 0.5, gamma: float = 1.5) -> torch.Tensor:
    if alpha <= 0 or gamma <= 0:
        raise ConfigurationError("balanced L1 needs alpha > 0 and gamma > 0")
    if pred.shape != target.shape:
        raise InputError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.numel() == 0:
        return pred.sum()
    x = (pred - target).abs()
    b = math.exp(gamma / alpha) - 1
    c = gamma / b - alpha
    inner = alpha / b * (b * x + 1) * torch.log(b * x + 1) - alpha * x
    outer = gamma * x + c
    return torch.where(x < 1, inner, outer).mean()


def _check_targets(y):
    if bool((y < 0).any()) or bool((y > 1).any()):
        raise InputError("targets must lie in [0, 1]")


def _focal_terms(logits, y, beta):
    sigma = torch.sigmoid(logits)
    bce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    return (y - sigma).abs().pow(beta) * bce


def quality_focal(pred_logits, quality_targets, beta: float = 2.0,
                  num_pos: Optional[float] = None) -> torch.Tensor:
    """Sum of ``|y - sigmoid|^beta * BCE`` over all elements, divided by the positive count.

    ``num_pos`` defaults to the number of elements with a non-zero target.
    """
    y = quality_targets.to(pred_logits.dtype)
    _check_targets(y)
    if num_pos is None:
        num_pos = float((y > 0).sum())
    return _focal_terms(pred_logits, y, beta).sum() / max(float(num_pos), 1.0)


def soft_focal(pred_logits, soft_targets, gamma: float = 2.0,
               weight: float = SOFT_CLS_WEIGHT) -> torch.Tensor:
    """Focal-modulated BCE against continuous teacher scores, averaged, times ``weight``."""
    y = soft_targets.to(pred_logits.dtype)
    _check_targets(y)
    return weight * _focal_terms(pred_logits, y, gamma).mean()


def seg_cross_entropy(logits, mask, ignore: int = 255) -> torch.Tensor:
    mask = mask.long()
    if bool((mask != ignore).any()):
        return F.cross_entropy(logits, mask, ignore_index=ignore)
    warnings.warn("all pixels carry the ignore label; segmentation loss set to 0", AllIgnoredWarning)
    return logits.sum() * 0.0


# ------------------------------------------------------------------- feature imitation

def kd_mse(teacher_pyr, student_pyr, projector=None) -> torch.Tensor:
    t, s = _pairs(teacher_pyr, student_pyr, projector)
    return sum(F.mse_loss(b, a) for a, b in zip(t, s)) / len(t)


def foreground_masks(gt_boxes: Sequence, shapes, strides) -> list:
    """Per level ``(B, H, W)`` boolean masks of cells whose centers lie inside a gt box."""
    masks = []
    for (h, w), stride in zip(shapes, strides):
        cy = (torch.arange(h, dtype=torch.float64) + 0.5) * stride
        cx = (torch.arange(w, dtype=torch.float64) + 0.5) * stride
        per_img = []
        for boxes in gt_boxes:
            m = torch.zeros(h, w, dtype=torch.bool)
            for x0, y0, x1, y1 in torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4).tolist():
                m |= ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
            per_img.append(m)
        masks.append(torch.stack(per_img))
    return masks


def defeat_terms(teacher_pyr, student_pyr, projector, gt_boxes, strides) -> list:
    """Per level ``(fg_sum, fg_cells, bg_sum, bg_cells, channels)`` of squared feature error."""
    t, s = _pairs(teacher_pyr, student_pyr, projector)
    masks = foreground_masks(gt_boxes, [x.shape[-2:] for x in t], strides)
    out = []
    for a, b, m in zip(t, s, masks):
        err = (b - a).pow(2).sum(dim=1)
        fg = m.to(err.device)
        out.append((err[fg].sum(), int(fg.sum()), err[~fg].sum(), int((~fg).sum()), a.shape[1]))
    return out


def kd_defeat(teacher_pyr, student_pyr, projector, gt_boxes, fg_weight: float = 2.0,
              bg_weight: float = 0.5, strides: Optional[Sequence[int]] = None) -> torch.Tensor:
    if strides is None:
        strides = getattr(teacher_pyr, "strides", None)
        if strides is None:
            raise ConfigurationError("strides are required when plain feature lists are passed")
    if len(gt_boxes) != _levels(teacher_pyr)[0].shape[0]:
        raise InputError("need one gt box array per image")
    total = None
    terms = defeat_terms(teacher_pyr, student_pyr, projector, gt_boxes, strides)
    for fg_sum, n_fg, bg_sum, n_bg, ch in terms:
        level = fg_sum * 0.0
        if n_fg:
            level = level + fg_weight * fg_sum / (n_fg * ch)
        if n_bg:
            level = level + bg_weight * bg_sum / (n_bg * ch)
        total = level if total is None else total + level
    return total / len(terms)


def disagreement_maps(teacher_det, student_det, eps: float = PDF_EPS) -> list:
    """Per level ``(B, H, W)`` weights summing to 1 over cells of each image."""
    maps = []
    A, C = teacher_det.num_anchors, teacher_det.num_classes
    for lt, ls in zip(teacher_det.cls_logits, student_det.cls_logits):
        if lt.shape != ls.shape:
            raise ConfigurationError("teacher and student detection outputs are not anchor-aligned")
        b, _, h, w = lt.shape
        d = (torch.sigmoid(lt) - torch.sigmoid(ls)).abs().detach()
        d = d.view(b, A * C, h, w).mean(dim=1) + eps
        maps.append(d / d.sum(dim=(1, 2), keepdim=True))
    return maps


def kd_pdf(teacher_pyr, student_pyr, projector, teacher_det, student_det) -> torch.Tensor:
    """Feature imitation weighted by where teacher and student predictions disagree."""
    if teacher_det is None:
        raise ConfigurationError(
            "PDF distillation needs a teacher with a detection head; it cannot be used cross-task")
    if student_det is None:
        raise ConfigurationError("PDF distillation needs the student's detection output")
    t, s = _pairs(teacher_pyr, student_pyr, projector)
    weights = disagreement_maps(teacher_det, student_det)
    total = None
    for a, b, d in zip(t, s, weights):
        err = (b - a).pow(2).mean(dim=1)
        level = (d.to(err.dtype) * err).sum(dim=(1, 2)).mean()
        total = level if total is None else total + level
    return total / len(t)


# ------------------------------------------------------------------- composition

MODE_COMPONENTS = {
    "supervised": ("loc", "cls"),
    "self_train": ("loc", "cls"),
    "segmentation": ("seg",),
    "crosstask_kd": ("loc", "cls"),
}


def assemble(components: dict, mode: str, kd: KDConfig = KDConfig(),
             soft_cls_weight: float = SOFT_CLS_WEIGHT) -> LossBundle:
    """Weighted bundle for a training mode; ``components`` carries unweighted values."""
    if mode not in MODE_COMPONENTS:
        raise ConfigurationError(f"unknown loss mode {mode!r}")
    if mode == "crosstask_kd" and kd.method == "pdf":
        raise ConfigurationError("PDF distillation cannot be applied with a segmentation teacher")
    required = list(MODE_COMPONENTS[mode])
    if kd.method != "none":
        required.append("kd")
    missing = [k for k in required if k not in components]
    if missing:
        raise ConfigurationError(f"mode {mode!r} is missing loss component(s) {missing}")
    comps = {k: components[k] for k in required}
    weights = {k: 1.0 for k in required}
    if mode == "self_train":
        weights["cls"] = soft_cls_weight
    if "kd" in weights:
        weights["kd"] = kd.weight
    return LossBundle(comps, weights)
