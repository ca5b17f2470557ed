"""Training loops for every mode: supervised, self-training, cross-task KD and multi-task.

All loops share one contract: deterministic given ``TrainConfig.seed``, validation
after every epoch, early stopping on the validation metric and the best-epoch weights
restored into the returned model.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .assign import (
    IGNORE,
    POSITIVE,
    box_iou_torch,
    decode_boxes,
    encode_boxes,
    make_soft_targets,
    match_iou,
    match_mutual_guide,
)
from .data import DETECTION, IGNORE_INDEX, SEGMENTATION, ImageSample
from .exceptions import ConfigurationError, DataError
from .metrics import MetricReport, evaluate_detections, postprocess, seg_iou
from .models import (
    DetSegNet,
    generate_anchors,
    images_to_tensor,
    load_checkpoint,
    parameter_hash,
)

logger = logging.getLogger(__name__)

MODES = ("supervised", "self_train", "crosstask_kd", "multitask", "multitask_selftrain")
MATCHERS = ("iou", "mutual_guide")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    warmup_steps: int = 0
    reference_batch: int = 16

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigurationError(f"optimizer kind must be 'sgd' or 'adamw', got {self.kind!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    epochs: int = 70
    early_stop_patience: int = 10
    batch_size: int = 16
    optimizer: OptimConfig = OptimConfig()
    seed: int = 0
    kd: L.KDConfig = L.KDConfig()
    pretrain_from: Optional[str] = None
    matcher: str = "iou"
    augment: bool = True
    image_size: Optional[int] = None
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    topk: int = 9
    soft_cls_weight: float = L.SOFT_CLS_WEIGHT
    loc_weight: float = 1.0
    eval_batch_size: int = 32
    min_epochs: int = 1

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimConfig(**self.optimizer))
        if isinstance(self.kd, dict):
            object.__setattr__(self, "kd", L.KDConfig(**self.kd))
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.matcher not in MATCHERS:
            raise ConfigurationError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.early_stop_patience < self.epochs:
            raise ConfigurationError("early_stop_patience must be smaller than epochs")
        if self.mode == "crosstask_kd" and self.kd.method == "pdf":
            raise ConfigurationError("PDF distillation cannot be applied with a segmentation teacher")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_metric: float = -math.inf
    best_tiebreak: float = -math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    best_snapshot: Optional[dict] = None


@dataclass
class TrainResult:
    model: DetSegNet
    history: list
    state: TrainState
    telemetry: dict = field(default_factory=dict)
    checkpoint: Optional[Path] = None

    @property
    def best_metric(self) -> float:
        return self.state.best_val_metric


def early_stop(state: TrainState, val_metric: float, patience: int, max_epochs: int = 70,
               tiebreak: float = -math.inf) -> str:
    """Record one epoch's validation metric and decide whether to keep training.

    Improvement means a strictly larger metric, or an equal metric with a larger
    tie-break value. Training stops once ``patience`` epochs pass without one, or at
    ``max_epochs``.
    """
    state.epoch += 1
    improved = val_metric > state.best_val_metric or (
        val_metric == state.best_val_metric and tiebreak > state.best_tiebreak)
    if improved:
        state.best_val_metric = val_metric
        state.best_tiebreak = tiebreak
        state.best_epoch = state.epoch
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
    if state.epochs_since_best >= patience or state.epoch >= max_epochs:
        return "stop"
    return "continue"


# ------------------------------------------------------------------ data pipeline

class Batch:
    """Images of one mini-batch; annotations are only reachable through counted accessors."""

    def __init__(self, pipeline, samples, images, transforms):
        self._pipeline = pipeline
        self._samples = samples
        self.images = images
        self._transforms = transforms
        self.ids = [s.id for s in samples]

    def __len__(self):
        return len(self._samples)

    def det_targets(self):
        self._pipeline.det_reads += 1
        boxes, labels = [], []
        for s, tf in zip(self._samples, self._transforms):
            if s.det_annotations is None:
                raise DataError(f"sample {s.id!r} has no detection annotations")
            b, keep = tf.boxes(s.boxes())
            boxes.append(b)
            labels.append(s.labels()[keep])
        return boxes, labels

    def seg_targets(self) -> torch.Tensor:
        self._pipeline.seg_reads += 1
        masks = []
        for s, tf in zip(self._samples, self._transforms):
            if s.seg_mask is None:
                raise DataError(f"sample {s.id!r} has no segmentation mask")
            masks.append(tf.mask(s.seg_mask))
        return torch.from_numpy(np.stack(masks)).long()


class _Transform:
    """Resize to the working size, optional horizontal flip and scale jitter (crop/pad)."""

    def __init__(self, src_hw, out_hw, flip=False, jitter=1.0):
        self.src_hw, self.out_hw, self.flip, self.jitter = src_hw, out_hw, flip, jitter
        self.sy = out_hw[0] / src_hw[0] * jitter
        self.sx = out_hw[1] / src_hw[1] * jitter
        self.inner = (int(round(src_hw[0] * self.sy)), int(round(src_hw[1] * self.sx)))

    def image(self, pixels: np.ndarray) -> torch.Tensor:
        t = images_to_tensor([pixels])
        if self.inner != tuple(pixels.shape[:2]):
            t = F.interpolate(t, size=self.inner, mode="bilinear", align_corners=False)
        if self.flip:
            t = t.flip(-1)
        return self._fit(t, 0.0)[0]

    def mask(self, mask: np.ndarray) -> np.ndarray:
        t = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
        if self.inner != tuple(mask.shape):
            t = F.interpolate(t, size=self.inner, mode="nearest")
        if self.flip:
            t = t.flip(-1)
        return self._fit(t, float(IGNORE_INDEX))[0, 0].numpy().astype(np.uint8)

    def _fit(self, t, fill):
        H, W = self.out_hw
        t = t[..., :H, :W]
        ph, pw = H - t.shape[-2], W - t.shape[-1]
        if ph or pw:
            t = F.pad(t, (0, pw, 0, ph), value=fill)
        return t

    def boxes(self, boxes: np.ndarray):
        b = boxes.astype(np.float64).copy()
        b[:, [0, 2]] *= self.sx
        b[:, [1, 3]] *= self.sy
        if self.flip:
            w = self.inner[1]
            b[:, [0, 2]] = w - b[:, [2, 0]]
        H, W = self.out_hw
        b[:, [0, 2]] = b[:, [0, 2]].clip(0, W)
        b[:, [1, 3]] = b[:, [1, 3]].clip(0, H)
        keep = ((b[:, 2] - b[:, 0]) >= 2) & ((b[:, 3] - b[:, 1]) >= 2)
        return b[keep], keep

    def unmap_box(self, box):
        """Map a box from network coordinates back to source image coordinates."""
        x0, y0, x1, y1 = box
        return (x0 / self.sx, y0 / self.sy, x1 / self.sx, y1 / self.sy)


class SamplePipeline:
    def __init__(self, samples: Sequence[ImageSample], batch_size: int, seed: int = 0,
                 augment: bool = False, image_size: Optional[int] = None, shuffle: bool = True,
                 jitter: tuple = (0.8, 1.2)):
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.shuffle = shuffle
        self.jitter = jitter
        if image_size is None and self.samples:
            shapes = {s.pixels.shape[:2] for s in self.samples}
            if len(shapes) != 1:
                raise ConfigurationError("samples differ in resolution; set TrainConfig.image_size")
            self.out_hw = shapes.pop()
        else:
            self.out_hw = (image_size, image_size) if image_size else None
        self.det_reads = 0
        self.seg_reads = 0

    def __len__(self):
        return math.ceil(len(self.samples) / self.batch_size)

    def transform_for(self, sample, rng=None) -> _Transform:
        flip, jitter = False, 1.0
        if rng is not None:
            flip = bool(rng.random() < 0.5)
            jitter = float(rng.uniform(*self.jitter))
        return _Transform(sample.pixels.shape[:2], self.out_hw, flip, jitter)

    def epoch(self, epoch: int):
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.samples)) if self.shuffle else np.arange(len(self.samples))
        for start in range(0, len(order), self.batch_size):
            chunk = [self.samples[i] for i in order[start:start + self.batch_size]]
            tfs = [self.transform_for(s, rng if self.augment else None) for s in chunk]
            images = torch.stack([tf.image(s.pixels) for s, tf in zip(chunk, tfs)])
            yield Batch(self, chunk, images, tfs)

    def cycle(self):
        """Endless stream of batches, reshuffled on every pass."""
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


# ------------------------------------------------------------------ losses per batch

class _AnchorCache:
    def __init__(self, model: DetSegNet):
        self.config = model.anchor_config
        self._cache = {}

    def get(self, hw):
        if hw not in self._cache:
            a = np.concatenate(generate_anchors(self.config, hw))
            self._cache[hw] = (a, torch.from_numpy(a).float())
        return self._cache[hw]


def detection_loss(det_out, batch: Batch, anchors: _AnchorCache, cfg: TrainConfig,
                   telemetry: dict) -> dict:
    """Hard-label losses: balanced L1 on positives and quality focal on non-ignored anchors."""
    cls = det_out.flat_cls()
    reg = det_out.flat_reg()
    a_np, a_t = anchors.get(tuple(batch.images.shape[-2:]))
    boxes, labels = batch.det_targets()
    B, N, C = cls.shape
    y = torch.zeros(B, N, C)
    valid = torch.ones(B, N, dtype=torch.bool)
    pos_pred, pos_target = [], []
    probs = torch.sigmoid(cls.detach())
    for b in range(B):
        if cfg.matcher == "mutual_guide" and len(boxes[b]):
            m = match_mutual_guide(a_np, boxes[b], probs[b].numpy(), reg[b].detach().numpy(),
                                   labels=labels[b], k=cfg.topk, neg_thr=cfg.neg_iou)
            telemetry["mutual_guide_assignments"] = telemetry.get("mutual_guide_assignments", 0) + m.num_positive
        else:
            m = match_iou(a_np, boxes[b], cfg.pos_iou, cfg.neg_iou)
        telemetry["positives"] = telemetry.get("positives", 0) + m.num_positive
        valid[b] = torch.from_numpy(m.labels != IGNORE)
        pos = m.positive
        if len(pos) == 0:
            continue
        gt = torch.from_numpy(boxes[b][m.matched_gt[pos]]).float()
        anc = a_t[pos]
        pred_boxes = decode_boxes(reg[b, pos].detach(), anc)
        quality = box_iou_torch(pred_boxes, gt).clamp(0, 1)
        y[b, pos, torch.from_numpy(labels[b][m.matched_gt[pos]])] = quality
        pos_pred.append(reg[b, pos])
        pos_target.append(encode_boxes(gt, anc))
    num_pos = sum(len(p) for p in pos_pred)
    cls_loss = L.quality_focal(cls[valid], y[valid], num_pos=max(num_pos, 1))
    if pos_pred:
        loc = L.balanced_l1(torch.cat(pos_pred), torch.cat(pos_target))
    else:
        loc = reg.sum() * 0.0
    return {"loc": cfg.loc_weight * loc, "cls": cls_loss}


def soft_detection_loss(det_out, soft: "L.SoftTargets", cfg: TrainConfig) -> dict:
    cls = det_out.flat_cls()
    reg = det_out.flat_reg()
    if cls.shape[1] != soft.num_anchors:
        raise ConfigurationError("teacher and student anchor counts differ")
    return {
        "loc": cfg.loc_weight * L.balanced_l1(reg, soft.reg_deltas),
        "cls": L.soft_focal(cls, soft.cls_scores, weight=1.0),
    }


def kd_loss(cfg: TrainConfig, teacher_out, student_out, projector, gt_boxes=None):
    method = cfg.kd.method
    if method == "mse":
        return L.kd_mse(teacher_out.pyramid, student_out.pyramid, projector)
    if method == "defeat":
        if gt_boxes is None:
            raise ConfigurationError("DeFeat distillation needs ground-truth boxes")
        return L.kd_defeat(teacher_out.pyramid, student_out.pyramid, projector, gt_boxes,
                           cfg.kd.fg_weight, cfg.kd.bg_weight, strides=teacher_out.pyramid.strides)
    if method == "pdf":
        return L.kd_pdf(teacher_out.pyramid, student_out.pyramid, projector,
                        teacher_out.detection, student_out.detection)
    raise ConfigurationError(f"unexpected KD method {method!r}")


# ------------------------------------------------------------------ evaluation

@torch.no_grad()
def predict_detections(model: DetSegNet, samples: Sequence[ImageSample], batch_size: int = 32,
                       image_size: Optional[int] = None, score_thr: float = 0.05) -> list:
    was_training = model.training
    model.eval()
    pipe = SamplePipeline(samples, batch_size, image_size=image_size, shuffle=False)
    anchors = _AnchorCache(model)
    dets = []
    try:
        for batch in pipe.epoch(0):
            out = model(batch.images, heads=("detection",))
            hw = tuple(batch.images.shape[-2:])
            raw = postprocess(out.detection, anchors.get(hw)[0], batch.ids, score_thr=score_thr,
                              image_size=hw)
            tfs = {i: tf for i, tf in zip(batch.ids, batch._transforms)}
            for d in raw:
                tf = tfs[d.image_id]
                box = tf.unmap_box(d.box)
                if box[2] > box[0] and box[3] > box[1]:
                    dets.append(type(d)(d.image_id, d.class_id, box, d.score))
    finally:
        model.train(was_training)
    return dets


@torch.no_grad()
def predict_masks(model: DetSegNet, samples: Sequence[ImageSample], batch_size: int = 32,
                  image_size: Optional[int] = None) -> list:
    was_training = model.training
    model.eval()
    pipe = SamplePipeline(samples, batch_size, image_size=image_size, shuffle=False)
    masks = []
    try:
        for batch in pipe.epoch(0):
            logits = model(batch.images, heads=("segmentation",)).segmentation.logits
            for s, lg in zip(batch._samples, logits):
                if lg.shape[-2:] != s.pixels.shape[:2]:
                    lg = F.interpolate(lg[None], size=s.pixels.shape[:2], mode="bilinear",
                                       align_corners=False)[0]
                masks.append(lg.argmax(0).numpy().astype(np.uint8))
    finally:
        model.train(was_training)
    return masks


def evaluate(model: DetSegNet, samples: Sequence[ImageSample], batch_size: int = 32,
             image_size: Optional[int] = None) -> MetricReport:
    """Detection metrics on samples carrying boxes, mIoU on samples carrying masks."""
    det_samples = [s for s in samples if DETECTION in s.task_flags]
    seg_samples = [s for s in samples if SEGMENTATION in s.task_flags]
    if "detection" in model.spec.heads and det_samples:
        dets = predict_detections(model, det_samples, batch_size, image_size)
        report = evaluate_detections(dets, det_samples)
    else:
        report = MetricReport(counts={"images": 0, "gts": 0, "dets": 0})
    if "segmentation" in model.spec.heads and seg_samples:
        preds = predict_masks(model, seg_samples, batch_size, image_size)
        _, miou = seg_iou(preds, [s.seg_mask for s in seg_samples], model.num_seg_classes)
        report.seg_miou = miou
    return report


def _selection_metric(model, report: MetricReport):
    if "detection" in model.spec.heads and report.counts.get("gts"):
        return report.map, (report.seg_miou if report.seg_miou is not None else -math.inf)
    return (report.seg_miou or 0.0), -math.inf


# ------------------------------------------------------------------ the loop

def _make_optimizer(params, cfg: TrainConfig, total_steps: int):
    o = cfg.optimizer
    lr = o.lr * cfg.batch_size / o.reference_batch
    if o.kind == "sgd":
        opt = torch.optim.SGD(params, lr=lr, momentum=o.momentum, weight_decay=o.weight_decay)
    else:
        opt = torch.optim.AdamW(params, lr=lr, weight_decay=o.weight_decay)

    def factor(step):
        warm = min(1.0, (step + 1) / o.warmup_steps) if o.warmup_steps else 1.0
        if o.schedule == "constant":
            return warm
        return warm * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def _freeze(teacher: Optional[DetSegNet]):
    if teacher is None:
        return None
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    return teacher


def _check_aligned(teacher: DetSegNet, student: DetSegNet):
    if teacher.anchor_config != student.anchor_config:
        raise ConfigurationError("teacher and student must share one anchor configuration")


def _load_pretrained(model: DetSegNet, path):
    src = load_checkpoint(path)
    own = model.state_dict()
    loaded = {k: v for k, v in src.state_dict().items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(loaded, strict=False)
    return parameter_hash(model)


class _Trainer:
    """Shared epoch loop; ``step_fn(iteration)`` runs one optimisation step and returns losses."""

    def __init__(self, model, cfg: TrainConfig, val_samples, extra_params=(), log_path=None,
                 teacher=None):
        self.model, self.cfg, self.val_samples = model, cfg, val_samples
        self.extra_params = list(extra_params)
        self.log_path = Path(log_path) if log_path else None
        self.teacher = teacher
        self.telemetry = {}

    def run(self, steps_per_epoch: int, step_fn: Callable[[], dict]) -> TrainResult:
        cfg, model = self.cfg, self.model
        params = [p for p in model.parameters() if p.requires_grad] + self.extra_params
        opt, sched = _make_optimizer(params, cfg, cfg.epochs * steps_per_epoch)
        self.optimizer = opt
        state = TrainState()
        history = []
        teacher_hash = parameter_hash(self.teacher) if self.teacher is not None else None
        self.telemetry["start_hash"] = parameter_hash(model)
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")
        model.train()
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            sums, n = {}, 0
            for _ in range(steps_per_epoch):
                opt.zero_grad(set_to_none=True)
                comps = step_fn()
                opt.step()
                sched.step()
                state.step += 1
                n += 1
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v
            record = {"epoch": epoch + 1, "losses": {k: v / max(n, 1) for k, v in sums.items()}}
            if self.val_samples:
                rep = evaluate(model, self.val_samples, cfg.eval_batch_size, cfg.image_size)
                record["val"] = {"ap50": rep.ap50, "ap75": rep.ap75, "map": rep.map,
                                 "seg_miou": rep.seg_miou}
                metric, tiebreak = _selection_metric(model, rep)
            else:
                metric, tiebreak = -record["losses"].get("total", 0.0), -math.inf
            prev_best = state.best_epoch
            decision = early_stop(state, metric, cfg.early_stop_patience, cfg.epochs, tiebreak)
            if state.best_epoch != prev_best:
                state.best_snapshot = copy.deepcopy(model.state_dict())
            record["wall_time"] = time.perf_counter() - t0
            history.append(record)
            if self.log_path:
                with self.log_path.open("a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("epoch %d %s", epoch + 1, record)
            if not all(math.isfinite(v) for v in record["losses"].values()):
                raise DataError(f"non-finite loss at epoch {epoch + 1}: {record['losses']}")
            if decision == "stop" and epoch + 1 >= cfg.min_epochs:
                break
        if state.best_snapshot is not None:
            model.load_state_dict(state.best_snapshot)
        model.eval()
        if teacher_hash is not None:
            self.telemetry["teacher_hash_start"] = teacher_hash
            self.telemetry["teacher_hash_end"] = parameter_hash(self.teacher)
        return TrainResult(model, history, state, self.telemetry)


def _bundle_values(bundle: L.LossBundle) -> dict:
    return bundle.items()


def _seeded(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % (2 ** 32))


def _require(samples, flag, what):
    for s in samples:
        if flag not in s.task_flags:
            raise DataError(f"{what}: sample {s.id!r} has no {flag} annotations")


def train_supervised(model: DetSegNet, train_samples, cfg: TrainConfig, val_samples=(),
                     log_path=None, teacher: Optional[DetSegNet] = None) -> TrainResult:
    """Hard-label detection training; with ``teacher`` and ``cfg.kd`` adds feature imitation."""
    if "detection" not in model.spec.heads:
        raise ConfigurationError("supervised detection training needs a detection head")
    _require(train_samples, DETECTION, "supervised training")
    _seeded(cfg)
    if cfg.pretrain_from:
        _load_pretrained(model, cfg.pretrain_from)
    use_kd = cfg.kd.method != "none" and teacher is not None
    if cfg.kd.method != "none" and teacher is None:
        raise ConfigurationError(f"KD method {cfg.kd.method!r} needs a teacher")
    projector = None
    if use_kd:
        _freeze(teacher)
        if cfg.kd.method == "pdf" and "detection" not in teacher.spec.heads:
            raise ConfigurationError("PDF distillation cannot be applied with a segmentation teacher")
        projector = L.FeatureProjector(model.feature_channels, teacher.feature_channels,
                                       len(model.strides))
    pipe = SamplePipeline(train_samples, cfg.batch_size, cfg.seed, cfg.augment, cfg.image_size)
    anchors = _AnchorCache(model)
    mode = "crosstask_kd" if use_kd and "detection" not in teacher.spec.heads else "supervised"
    trainer = _Trainer(model, cfg, list(val_samples), projector.parameters() if projector else (),
                       log_path, teacher if use_kd else None)
    stream = pipe.cycle()

    def step():
        batch = next(stream)
        heads = ("detection",)
        out = model(batch.images, heads=heads)
        comps = detection_loss(out.detection, batch, anchors, cfg, trainer.telemetry)
        if use_kd:
            with torch.no_grad():
                t_heads = ("detection",) if "detection" in teacher.spec.heads else ("segmentation",)
                t_out = teacher(batch.images, heads=t_heads if cfg.kd.method == "pdf" else ())
            gt = batch.det_targets()[0] if cfg.kd.method == "defeat" else None
            comps["kd"] = kd_loss(cfg, t_out, out, projector, gt)
        bundle = L.assemble(comps, mode, cfg.kd if use_kd else L.KDConfig())
        bundle.total.backward()
        return _bundle_values(bundle)

    result = trainer.run(len(pipe), step)
    result.telemetry["annotation_reads"] = pipe.det_reads
    return result


def train_teacher(model: DetSegNet, train_samples, cfg: TrainConfig, val_samples=(),
                  log_path=None) -> TrainResult:
    cfg = _replace(cfg, matcher="mutual_guide")
    return train_supervised(model, train_samples, cfg, val_samples, log_path)


def train_segmentation(model: DetSegNet, train_samples, cfg: TrainConfig, val_samples=(),
                       log_path=None) -> TrainResult:
    """Semantic segmentation with softmax cross-entropy (segmentation teachers)."""
    if "segmentation" not in model.spec.heads:
        raise ConfigurationError("segmentation training needs a segmentation head")
    _require(train_samples, SEGMENTATION, "segmentation training")
    _seeded(cfg)
    if cfg.pretrain_from:
        _load_pretrained(model, cfg.pretrain_from)
    pipe = SamplePipeline(train_samples, cfg.batch_size, cfg.seed, cfg.augment, cfg.image_size)
    trainer = _Trainer(model, cfg, list(val_samples), (), log_path)
    stream = pipe.cycle()

    def step():
        batch = next(stream)
        out = model(batch.images, heads=("segmentation",))
        bundle = L.assemble({"seg": L.seg_cross_entropy(out.segmentation.logits, batch.seg_targets())},
                            "segmentation")
        bundle.total.backward()
        return _bundle_values(bundle)

    return trainer.run(len(pipe), step)


def _soft_step(model, teacher, batch, cfg, projector):
    with torch.no_grad():
        t_out = teacher(batch.images, heads=("detection",))
    out = model(batch.images, heads=("detection",))
    soft = make_soft_targets(t_out.detection, out.detection.flat_cls().shape[1])
    comps = soft_detection_loss(out.detection, soft, cfg)
    if cfg.kd.method != "none":
        if cfg.kd.method == "defeat":
            # no ground truth in self-training: foreground comes from confident teacher boxes
            comps["kd"] = L.kd_defeat(t_out.pyramid, out.pyramid, projector,
                                      _teacher_boxes(teacher, t_out, batch), cfg.kd.fg_weight,
                                      cfg.kd.bg_weight, strides=t_out.pyramid.strides)
        else:
            comps["kd"] = kd_loss(cfg, t_out, out, projector)
    return L.assemble(comps, "self_train", cfg.kd, cfg.soft_cls_weight)


def _teacher_boxes(teacher, t_out, batch, thr=0.5):
    hw = tuple(batch.images.shape[-2:])
    anchors = np.concatenate(generate_anchors(teacher.anchor_config, hw))
    dets = postprocess(t_out.detection, anchors, [str(i) for i in range(len(batch))],
                       score_thr=thr, image_size=hw)
    boxes = [[] for _ in range(len(batch))]
    for d in dets:
        boxes[int(d.image_id)].append(d.box)
    return [np.array(b, dtype=np.float64).reshape(-1, 4) for b in boxes]


def _replace(cfg: TrainConfig, **kw) -> TrainConfig:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d.update(kw)
    return TrainConfig(**d)


def train_self(model: DetSegNet, teacher: DetSegNet, unlabeled_samples, cfg: TrainConfig,
               val_samples=(), log_path=None) -> TrainResult:
    """Student trained only on a frozen teacher's dense predictions; no annotations are read."""
    if teacher is None or "detection" not in teacher.spec.heads:
        raise ConfigurationError("self-training needs a teacher with a detection head")
    _check_aligned(teacher, model)
    _seeded(cfg)
    if cfg.pretrain_from:
        _load_pretrained(model, cfg.pretrain_from)
    _freeze(teacher)
    projector = None
    if cfg.kd.method != "none":
        projector = L.FeatureProjector(model.feature_channels, teacher.feature_channels,
                                       len(model.strides))
    pipe = SamplePipeline(unlabeled_samples, cfg.batch_size, cfg.seed, cfg.augment, cfg.image_size)
    trainer = _Trainer(model, cfg, list(val_samples), projector.parameters() if projector else (),
                       log_path, teacher)
    stream = pipe.cycle()
    grad_norms = trainer.telemetry.setdefault("teacher_grad_norm_max", 0.0)

    def step():
        bundle = _soft_step(model, teacher, next(stream), cfg, projector)
        bundle.total.backward()
        trainer.telemetry["teacher_grad_norm_max"] = max(trainer.telemetry["teacher_grad_norm_max"],
                                                         _grad_norm(teacher))
        return _bundle_values(bundle)

    result = trainer.run(len(pipe), step)
    result.telemetry["annotation_reads"] = pipe.det_reads + pipe.seg_reads
    return result


def _grad_norm(model) -> float:
    sq = [float(p.grad.pow(2).sum()) for p in model.parameters() if p.grad is not None]
    return math.sqrt(sum(sq)) if sq else 0.0


def train_crosstask_kd(model: DetSegNet, seg_teacher: Optional[DetSegNet], det_samples,
                       cfg: TrainConfig, val_samples=(), log_path=None) -> TrainResult:
    """Hard-label detection with neck-feature imitation of a segmentation teacher."""
    if cfg.kd.method == "pdf":
        raise ConfigurationError("PDF distillation cannot be applied with a segmentation teacher")
    if cfg.kd.method == "none":
        return train_supervised(model, det_samples, cfg, val_samples, log_path)
    if seg_teacher is None or "segmentation" not in seg_teacher.spec.heads:
        raise ConfigurationError("cross-task distillation needs a segmentation teacher")
    _check_aligned(seg_teacher, model)
    return train_supervised(model, det_samples, cfg, val_samples, log_path, teacher=seg_teacher)


def train_multitask(model: DetSegNet, det_samples, seg_samples, cfg: TrainConfig, val_samples=(),
                    log_path=None, teacher: Optional[DetSegNet] = None) -> TrainResult:
    """Alternating detection / segmentation passes with one update per pair.

    Each iteration back-propagates a detection mini-batch, then a segmentation
    mini-batch, accumulating gradients, and only then steps the optimiser. An epoch
    walks the longer split once; the shorter one is cycled. With ``teacher`` the
    detection pass uses the teacher's soft targets instead of annotations.
    """
    if set(model.spec.heads) != {"detection", "segmentation"}:
        raise ConfigurationError("multi-task training needs both heads")
    det_ids = {s.id for s in det_samples}
    overlap = det_ids & {s.id for s in seg_samples}
    if overlap:
        raise DataError(f"detection and segmentation splits overlap ({len(overlap)} ids)")
    if teacher is None:
        _require(det_samples, DETECTION, "multi-task detection split")
    _require(seg_samples, SEGMENTATION, "multi-task segmentation split")
    if teacher is not None:
        if "detection" not in teacher.spec.heads:
            raise ConfigurationError("self-training needs a teacher with a detection head")
        _check_aligned(teacher, model)
    if cfg.kd.method != "none" and teacher is None:
        raise ConfigurationError("multi-task KD needs a detection teacher")
    _seeded(cfg)
    if cfg.pretrain_from:
        _load_pretrained(model, cfg.pretrain_from)
    projector = None
    if teacher is not None:
        _freeze(teacher)
        if cfg.kd.method != "none":
            projector = L.FeatureProjector(model.feature_channels, teacher.feature_channels,
                                           len(model.strides))
    det_pipe = SamplePipeline(det_samples, cfg.batch_size, cfg.seed, cfg.augment, cfg.image_size) \
        if det_samples else None
    seg_pipe = SamplePipeline(seg_samples, cfg.batch_size, cfg.seed + 1, cfg.augment, cfg.image_size) \
        if seg_samples else None
    anchors = _AnchorCache(model)
    trainer = _Trainer(model, cfg, list(val_samples), projector.parameters() if projector else (),
                       log_path, teacher)
    det_stream = det_pipe.cycle() if det_pipe else None
    seg_stream = seg_pipe.cycle() if seg_pipe else None

    def step():
        values = {}
        if det_stream is not None:
            batch = next(det_stream)
            if teacher is None:
                out = model(batch.images, heads=("detection",))
                bundle = L.assemble(detection_loss(out.detection, batch, anchors, cfg, trainer.telemetry),
                                    "supervised")
            else:
                bundle = _soft_step(model, teacher, batch, cfg, projector)
            bundle.total.backward()
            values.update({f"det_{k}": v for k, v in bundle.items().items()})
        if seg_stream is not None:
            batch = next(seg_stream)
            out = model(batch.images, heads=("segmentation",))
            bundle = L.assemble({"seg": L.seg_cross_entropy(out.segmentation.logits, batch.seg_targets())},
                                "segmentation")
            bundle.total.backward()
            values["seg"] = bundle.items()["seg"]
        values["total"] = values.get("det_total", 0.0) + values.get("seg", 0.0)
        return values

    steps = max(len(det_pipe) if det_pipe else 0, len(seg_pipe) if seg_pipe else 0)
    if steps == 0:
        raise DataError("multi-task training needs at least one non-empty split")
    result = trainer.run(steps, step)
    result.telemetry["det_annotation_reads"] = det_pipe.det_reads if det_pipe else 0
    result.telemetry["seg_annotation_reads"] = seg_pipe.seg_reads if seg_pipe else 0
    return result


def train_multitask_selftrain(model: DetSegNet, teacher: DetSegNet, unlabeled_det_samples,
                              seg_samples, cfg: TrainConfig, val_samples=(),
                              log_path=None) -> TrainResult:
    return train_multitask(model, unlabeled_det_samples, seg_samples, cfg, val_samples, log_path,
                           teacher=teacher)
