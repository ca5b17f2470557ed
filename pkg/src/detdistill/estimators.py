"""scikit-learn style wrappers around the training modes.

Every estimator takes a sequence of :class:`~detdistill.data.ImageSample` as ``X``;
annotations travel inside the samples, so ``y`` is accepted only for API
compatibility and ignored.

>>> from detdistill.data import ClassCatalog, ShapesConfig, generate_shapes
>>> cat = ClassCatalog.shapes()
>>> train = generate_shapes(ShapesConfig(n_images=32, image_size=64), cat)
>>> det = DetectorEstimator(epochs=1, catalog=cat).fit(train)
>>> 0.0 <= det.score(train) <= 1.0
True
"""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from .data import DETECTION, SEGMENTATION, ClassCatalog
from .exceptions import ConfigurationError
from .metrics import evaluate_detections, seg_iou
from .models import AnchorConfig, ModelSpec, build_model
from .training import (
    OptimConfig,
    TrainConfig,
    evaluate,
    predict_detections,
    predict_masks,
    train_crosstask_kd,
    train_multitask,
    train_segmentation,
    train_self,
    train_supervised,
    train_teacher,
)
from .validation import check_choice, check_images, check_positive_int, check_samples, split_by_task


class _DetSegEstimator(BaseEstimator):
    """Shared construction and configuration; subclasses implement ``_train``."""

    _heads = (DETECTION,)

    def _store(self, params: dict, **fixed):
        # sklearn reads hyper-parameters back from attributes named like the arguments
        params = {k: v for k, v in params.items() if k not in ("self", "__class__")}
        params.update(fixed)
        for k, v in params.items():
            setattr(self, k, v)

    # -- configuration ------------------------------------------------------

    def _catalog(self, samples) -> ClassCatalog:
        if self.catalog is not None:
            return self.catalog
        ids = {a.class_id for s in samples for a in (s.det_annotations or ())}
        if ids and max(ids) >= 3:
            raise ConfigurationError("pass catalog= for datasets other than the shapes preset")
        return ClassCatalog.shapes()

    def _spec(self, heads) -> ModelSpec:
        check_choice(self.role, ("student", "teacher"), "role")
        make = ModelSpec.student if self.role == "student" else ModelSpec.teacher
        channels = self.head_channels or (32 if self.role == "student" else 48)
        return make(heads=heads, profile=self.profile, head_channels=channels,
                    seg_channels=self.seg_channels)

    def _anchors(self) -> AnchorConfig:
        return AnchorConfig(tuple(self.strides), tuple(self.anchor_scales), tuple(self.aspect_ratios))

    def _train_config(self, **kw) -> TrainConfig:
        epochs = check_positive_int(self.epochs, "epochs")
        opt = OptimConfig(kind=self.optimizer, lr=self.lr, weight_decay=self.weight_decay,
                          warmup_steps=self.warmup_steps)
        return TrainConfig(epochs=epochs, early_stop_patience=min(self.patience, epochs - 1),
                           batch_size=check_positive_int(self.batch_size, "batch_size"),
                           optimizer=opt, seed=self.seed, augment=self.augment, **kw)

    def _build(self, catalog, heads):
        return build_model(self._spec(heads), catalog, self._anchors(), seed=self.seed)

    # -- sklearn API --------------------------------------------------------

    def fit(self, X, y=None, X_val=None):
        samples = check_samples(X)
        val = check_samples(X_val, allow_empty=True, name="X_val") if X_val is not None else []
        self.catalog_ = self._catalog(samples)
        result = self._train(samples, val)
        self.model_ = result.model
        self.history_ = result.history
        self.telemetry_ = result.telemetry
        self.n_features_in_ = 1
        return self

    def report(self, X):
        """Full :class:`~detdistill.metrics.MetricReport` on annotated samples."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_samples(X))


class DetectorEstimator(_DetSegEstimator):
    """Supervised detector; ``role="teacher"`` trains the large network with mutual-guide matching."""

    def __init__(self, role="student", kd="none", teacher=None,
                 catalog=None, profile="desk", epochs=40, patience=10, batch_size=16,
                 optimizer="adamw", lr=2e-3, weight_decay=1e-4, warmup_steps=20,
                 strides=(8, 16, 32), anchor_scales=(1.5, 2.5), aspect_ratios=(0.5, 1.0, 2.0),
                 head_channels=None, seg_channels=32, augment=True, seed=0):
        self._store(locals())

    def _train(self, samples, val):
        check_samples(samples, require=(DETECTION,))
        model = self._build(self.catalog_, (DETECTION,))
        cfg = self._train_config(kd=L.KDConfig(self.kd))
        if self.role == "teacher":
            return train_teacher(model, samples, cfg, val)
        return train_supervised(model, samples, cfg, val, teacher=_fitted_model(self.teacher))

    def predict(self, X):
        """Per-image lists of :class:`~detdistill.metrics.Detection` in input order."""
        check_is_fitted(self, "model_")
        samples = check_images(X)
        dets = predict_detections(self.model_, samples)
        by_image = {s.id: [] for s in samples}
        for d in dets:
            by_image[d.image_id].append(d)
        return [by_image[s.id] for s in samples]

    def score(self, X, y=None):
        """AP at IoU 0.5 averaged over classes."""
        check_is_fitted(self, "model_")
        samples = check_samples(X, require=(DETECTION,))
        dets = [d for per in self.predict(samples) for d in per]
        return evaluate_detections(dets, samples).ap50


class SegmenterEstimator(_DetSegEstimator):
    """Semantic segmentation network (the cross-task teachers)."""

    def __init__(self, role="teacher",
                 catalog=None, profile="desk", epochs=40, patience=10, batch_size=16,
                 optimizer="adamw", lr=2e-3, weight_decay=1e-4, warmup_steps=20,
                 strides=(8, 16, 32), anchor_scales=(1.5, 2.5), aspect_ratios=(0.5, 1.0, 2.0),
                 head_channels=None, seg_channels=32, augment=True, seed=0):
        self._store(locals())

    def _train(self, samples, val):
        check_samples(samples, require=(SEGMENTATION,))
        model = self._build(self.catalog_, (SEGMENTATION,))
        return train_segmentation(model, samples, self._train_config(), val)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_masks(self.model_, check_images(X))

    def score(self, X, y=None):
        """Mean IoU over classes present in the ground truth."""
        check_is_fitted(self, "model_")
        samples = check_samples(X, require=(SEGMENTATION,))
        return seg_iou(self.predict(samples), [s.seg_mask for s in samples],
                       self.model_.num_seg_classes)[1]


class SelfTrainedDetector(DetectorEstimator):
    """Student trained only on a fitted detection teacher's dense predictions.

    Annotations in ``X`` are never read; unlabeled samples are fine.
    """

    def __init__(self, teacher=None, kd="none",
                 catalog=None, profile="desk", epochs=40, patience=10, batch_size=16,
                 optimizer="adamw", lr=2e-3, weight_decay=1e-4, warmup_steps=20,
                 strides=(8, 16, 32), anchor_scales=(1.5, 2.5), aspect_ratios=(0.5, 1.0, 2.0),
                 head_channels=None, seg_channels=32, augment=True, seed=0):
        self._store(locals(), role="student")

    def _catalog(self, samples):
        return self.catalog or _fitted_model(self.teacher, required=True).catalog

    def _train(self, samples, val):
        teacher = _fitted_model(self.teacher, required=True)
        model = self._build(self.catalog_, (DETECTION,))
        return train_self(model, teacher, samples, self._train_config(kd=L.KDConfig(self.kd)), val)


class CrossTaskDistilledDetector(DetectorEstimator):
    """Hard-label detector imitating the neck features of a fitted segmentation teacher."""

    def __init__(self, teacher=None, kd="mse",
                 catalog=None, profile="desk", epochs=40, patience=10, batch_size=16,
                 optimizer="adamw", lr=2e-3, weight_decay=1e-4, warmup_steps=20,
                 strides=(8, 16, 32), anchor_scales=(1.5, 2.5), aspect_ratios=(0.5, 1.0, 2.0),
                 head_channels=None, seg_channels=32, augment=True, seed=0):
        self._store(locals(), role="student")

    def _train(self, samples, val):
        check_samples(samples, require=(DETECTION,))
        cfg = self._train_config(mode="crosstask_kd", kd=L.KDConfig(self.kd))
        model = self._build(self.catalog_, (DETECTION,))
        return train_crosstask_kd(model, _fitted_model(self.teacher), samples, cfg, val)


class MultiTaskEstimator(_DetSegEstimator):
    """Detection + segmentation on partially annotated data.

    ``fit`` routes each sample by its task flags: detection-annotated samples feed
    the detection branch, mask-annotated ones the segmentation branch. Samples
    carrying both go to the branch named by ``route_both``. With a fitted detection
    ``teacher`` the detection branch learns from soft targets only.
    """

    _heads = (DETECTION, SEGMENTATION)

    def __init__(self, teacher=None, kd="none", route_both=DETECTION,
                 catalog=None, profile="desk", epochs=40, patience=10, batch_size=16,
                 optimizer="adamw", lr=2e-3, weight_decay=1e-4, warmup_steps=20,
                 strides=(8, 16, 32), anchor_scales=(1.5, 2.5), aspect_ratios=(0.5, 1.0, 2.0),
                 head_channels=None, seg_channels=32, augment=True, seed=0):
        self._store(locals(), role="student")

    def _train(self, samples, val):
        det, seg = split_by_task(samples, self.route_both)
        teacher = _fitted_model(self.teacher)
        if teacher is not None:
            det = [s.unlabeled() for s in det]
        mode = "multitask_selftrain" if teacher is not None else "multitask"
        cfg = self._train_config(mode=mode, kd=L.KDConfig(self.kd))
        model = self._build(self.catalog_, self._heads)
        self.n_detection_, self.n_segmentation_ = len(det), len(seg)
        return train_multitask(model, det, seg, cfg, val, teacher=teacher)

    def predict(self, X):
        """``(detections per image, masks)``."""
        check_is_fitted(self, "model_")
        samples = check_images(X)
        dets = predict_detections(self.model_, samples)
        by_image = {s.id: [] for s in samples}
        for d in dets:
            by_image[d.image_id].append(d)
        return [by_image[s.id] for s in samples], predict_masks(self.model_, samples)

    def score(self, X, y=None):
        """Detection AP at IoU 0.5; see :meth:`report` for segmentation IoU."""
        return self.report(check_samples(X, require=(DETECTION,))).ap50


def _fitted_model(est, required: bool = False):
    if est is None:
        if required:
            raise ConfigurationError("a fitted teacher is required")
        return None
    if hasattr(est, "model_"):
        return est.model_
    if isinstance(est, BaseEstimator):
        raise NotFittedError(f"teacher {type(est).__name__} is not fitted")
    return est  # a bare DetSegNet
