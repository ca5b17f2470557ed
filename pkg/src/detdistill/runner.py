"""Declarative experiments: datasets, splits, chained training stages and reports.

An experiment is an INI file. ``[experiment]`` names it and fixes the seed,
``[dataset]`` says where images come from, ``[splits]`` lists the subsets to
carve, ``[train]`` holds defaults shared by every stage, and each
``[stage:NAME]`` section is one training run. Stages run in file order and may
refer to earlier stages as ``teacher`` or ``pretrain``.

Each stage is keyed by a hash of everything that can change its outcome, so a
rerun skips completed stages and two experiments that share a stage (same data,
same settings, same upstream stages) can share one cache directory.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import shutil
import subprocess
import time
import traceback
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from .data import (
    DETECTION,
    SEGMENTATION,
    ClassCatalog,
    ShapesConfig,
    data_root,
    generate_shapes,
    load_voc_detection,
    load_voc_segmentation,
    sample_ids,
    select,
)
from .exceptions import ConfigurationError, DetDistillError, InputError
from .metrics import MetricReport, format_table
from .models import AnchorConfig, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .splits import (
    SplitManifest,
    both_task_filter,
    complement,
    make_prefix_fractions,
    make_task_partition,
    parse_fraction,
    save_manifest,
)
from .training import (
    OptimConfig,
    TrainConfig,
    evaluate,
    train_crosstask_kd,
    train_multitask,
    train_multitask_selftrain,
    train_segmentation,
    train_self,
    train_supervised,
    train_teacher,
)

log = logging.getLogger(__name__)

OPS = ("teacher", "supervised", "segmentation", "self", "crosstask_kd", "multitask",
       "multitask_selftrain")
_OP_HEADS = {
    "teacher": (DETECTION,),
    "supervised": (DETECTION,),
    "segmentation": (SEGMENTATION,),
    "self": (DETECTION,),
    "crosstask_kd": (DETECTION,),
    "multitask": (DETECTION, SEGMENTATION),
    "multitask_selftrain": (DETECTION, SEGMENTATION),
}
_NEEDS_TEACHER = ("self", "crosstask_kd", "multitask_selftrain")
_NEEDS_SEG_DATA = ("multitask", "multitask_selftrain")

TRAIN_DEFAULTS = {
    "profile": "desk",
    "epochs": "40",
    "patience": "10",
    "batch_size": "16",
    "optimizer": "adamw",
    "lr": "0.002",
    "momentum": "0.9",
    "weight_decay": "0.0001",
    "warmup_steps": "20",
    "schedule": "cosine",
    "augment": "yes",
    "student_channels": "32",
    "teacher_channels": "48",
    "seg_channels": "32",
    "strides": "8, 16, 32",
    "anchor_scales": "1.5, 2.5",
    "aspect_ratios": "0.5, 1.0, 2.0",
    "image_size": "",
}
STAGE_KEYS = {"op", "data", "seg_data", "teacher", "pretrain", "kd", "role", "label", "column",
              "report"} | set(TRAIN_DEFAULTS)
METRIC_FIELDS = {"AP50": "ap50", "AP75": "ap75", "mAP": "map", "AP10": "ap10", "AP25": "ap25",
                 "mIoU": "seg_miou"}


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _names(text: str) -> list:
    return [x.strip() for x in text.replace("+", ",").split(",") if x.strip()]


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def source_digest() -> str:
    """Hash of the package sources; part of every stage key."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{rev or 'nogit'}+src.{source_digest()[:12]}"


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class StageSpec:
    name: str
    op: str
    params: dict

    def get(self, key, default=None):
        return self.params.get(key, default)

    @property
    def label(self) -> str:
        return self.params.get("label") or self.name

    @property
    def column(self) -> str:
        return self.params.get("column", "")

    @property
    def reported(self) -> bool:
        return self.params.get("report", "yes").lower() in ("yes", "true", "1", "on")


class ExperimentConfig:
    """A parsed and validated experiment file.

    ``text`` is the canonical serialisation; its hash is the config hash, so
    two configs that parse to the same content hash equally.
    """

    def __init__(self, parser: configparser.ConfigParser):
        self._parser = parser
        buf = io.StringIO()
        parser.write(buf)
        self.text = buf.getvalue()
        self._validate()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_text(cls, text: str, seed: Optional[int] = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse experiment config: {exc}") from exc
        if seed is not None:
            if not parser.has_section("experiment"):
                parser.add_section("experiment")
            parser.set("experiment", "seed", str(int(seed)))
        return cls(parser)

    @classmethod
    def from_file(cls, path, seed: Optional[int] = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig.from_text(self.text, seed)

    # -- accessors --------------------------------------------------------

    @property
    def config_hash(self) -> str:
        return _sha(self.text.encode())

    @property
    def name(self) -> str:
        return self._parser.get("experiment", "name", fallback="experiment")

    @property
    def title(self) -> str:
        return self._parser.get("experiment", "title", fallback=self.name)

    @property
    def seed(self) -> int:
        return self._parser.getint("experiment", "seed", fallback=0)

    @property
    def metrics(self) -> list:
        return _names(self._parser.get("experiment", "metrics", fallback="AP50, AP75, mAP"))

    def section(self, name: str) -> dict:
        return dict(self._parser[name]) if self._parser.has_section(name) else {}

    @property
    def dataset(self) -> dict:
        return self.section("dataset")

    @property
    def splits(self) -> dict:
        return self.section("splits")

    @property
    def train_defaults(self) -> dict:
        out = dict(TRAIN_DEFAULTS)
        out.update(self.section("train"))
        return out

    @property
    def stages(self) -> list:
        defaults = self.train_defaults
        out = []
        for sec in self._parser.sections():
            if sec.startswith("stage:"):
                params = dict(defaults)
                params.update(self._parser[sec])
                out.append(StageSpec(sec[len("stage:"):], params.get("op", ""), params))
        return out

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise ConfigurationError(f"no stage named {name!r}; have {[s.name for s in self.stages]}")

    # -- validation -------------------------------------------------------

    def _validate(self):
        for sec in self._parser.sections():
            if sec not in ("experiment", "dataset", "splits", "train") and not sec.startswith("stage:"):
                raise ConfigurationError(f"unknown section [{sec}]")
        try:
            self.seed
        except ValueError as exc:
            raise ConfigurationError(f"experiment.seed: {exc}") from None
        for m in self.metrics:
            if m not in METRIC_FIELDS:
                raise ConfigurationError(f"experiment.metrics: unknown metric {m!r}; "
                                         f"choose from {sorted(METRIC_FIELDS)}")
        ds = self.dataset
        kind = ds.get("kind", "shapes")
        if kind not in ("shapes", "voc"):
            raise ConfigurationError(f"dataset.kind must be 'shapes' or 'voc', got {kind!r}")
        for key in ("n_train", "n_val", "image_size", "data_seed", "val_seed"):
            if key in ds:
                _int(ds[key], f"dataset.{key}")
        split_names = self.split_names()
        stages = self.stages
        if not stages:
            raise ConfigurationError("config has no [stage:NAME] sections")
        seen = {}
        for s in stages:
            where = f"stage:{s.name}"
            unknown = set(s.params) - STAGE_KEYS
            if unknown:
                raise ConfigurationError(f"[{where}] unknown key(s) {sorted(unknown)}")
            if s.op not in OPS:
                raise ConfigurationError(f"[{where}] op must be one of {OPS}, got {s.op!r}")
            for key in ("data", "seg_data"):
                for part in _names(s.get(key, "")):
                    if part not in split_names:
                        raise ConfigurationError(f"[{where}] {key}: unknown split {part!r}; "
                                                 f"have {sorted(split_names)}")
            if not s.get("data"):
                raise ConfigurationError(f"[{where}] data is required")
            if s.op in _NEEDS_SEG_DATA and "seg_data" not in s.params:
                raise ConfigurationError(f"[{where}] seg_data is required for op {s.op}")
            if s.op in _NEEDS_TEACHER and not s.get("teacher"):
                raise ConfigurationError(f"[{where}] teacher is required for op {s.op}")
            kd = s.get("kd", "none")
            if kd not in L.KD_METHODS:
                raise ConfigurationError(f"[{where}] kd must be one of {L.KD_METHODS}, got {kd!r}")
            if s.get("role", "student") not in ("student", "teacher"):
                raise ConfigurationError(f"[{where}] role must be 'student' or 'teacher'")
            for key in ("teacher", "pretrain"):
                ref = s.get(key)
                if ref and ref not in seen and not Path(ref).exists():
                    raise ConfigurationError(
                        f"[{where}] {key}={ref!r} is neither an earlier stage nor an existing file")
            teacher_op = seen.get(s.get("teacher", ""))
            cross = s.op == "crosstask_kd" or (s.op == "supervised" and teacher_op == "segmentation")
            if cross and kd == "pdf":
                raise ConfigurationError(
                    f"[{where}] PDF distillation cannot be applied with a segmentation teacher")
            if s.op in ("self", "multitask_selftrain") and teacher_op and teacher_op not in (
                    "teacher", "supervised", "self", "crosstask_kd"):
                raise ConfigurationError(f"[{where}] self-training needs a detection teacher, "
                                         f"got stage of op {teacher_op!r}")
            if s.op == "crosstask_kd" and teacher_op and teacher_op != "segmentation":
                raise ConfigurationError(f"[{where}] crosstask_kd needs a segmentation teacher")
            _train_config(s, self.seed)  # numeric fields
            _model_spec(s)
            seen[s.name] = s.op

    def split_names(self) -> set:
        sp = self.splits
        names = {"full"}
        for f in _names(sp.get("fractions", "")):
            tag = _frac_tag(_fraction(f, "splits.fractions"))
            names |= {tag, f"not_{tag}"}
        if sp.get("task_fraction"):
            _fraction(sp["task_fraction"], "splits.task_fraction", open_interval=True)
            names |= {"det", "seg"}
            for key, base in (("det_fractions", "det"), ("seg_fractions", "seg")):
                for f in _names(sp.get(key, "")):
                    tag = _frac_tag(_fraction(f, f"splits.{key}"))
                    names |= {f"{base}_{tag}", f"{base}_not_{tag}"}
        elif sp.get("det_fractions") or sp.get("seg_fractions"):
            raise ConfigurationError("splits.det_fractions needs splits.task_fraction")
        return names


def _int(text, what) -> int:
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigurationError(f"{what} must be an integer, got {text!r}") from None


def _float(text, what) -> float:
    try:
        return float(str(text).strip())
    except ValueError:
        raise ConfigurationError(f"{what} must be a number, got {text!r}") from None


def _bool(text, what) -> bool:
    t = str(text).strip().lower()
    if t in ("yes", "true", "1", "on"):
        return True
    if t in ("no", "false", "0", "off"):
        return False
    raise ConfigurationError(f"{what} must be yes or no, got {text!r}")


def _fraction(text, what, open_interval=False) -> Fraction:
    try:
        f = parse_fraction(text)
    except InputError:
        raise ConfigurationError(f"{what}: not a fraction: {text!r}") from None
    if not 0 < f <= 1 or (open_interval and f == 1):
        raise ConfigurationError(f"{what}: fraction {text!r} out of range")
    return f


def _frac_tag(f: Fraction) -> str:
    return "full" if f == 1 else f"{f.numerator}of{f.denominator}"


def _role(stage: StageSpec) -> str:
    return stage.get("role") or ("teacher" if stage.op in ("teacher", "segmentation") else "student")


def _model_spec(stage: StageSpec) -> ModelSpec:
    role = _role(stage)
    where = f"stage:{stage.name}"
    channels = _int(stage.get(f"{role}_channels"), f"[{where}] {role}_channels")
    make = ModelSpec.teacher if role == "teacher" else ModelSpec.student
    return make(heads=_OP_HEADS[stage.op], profile=stage.get("profile"), head_channels=channels,
                seg_channels=_int(stage.get("seg_channels"), f"[{where}] seg_channels"))


def _anchor_config(stage: StageSpec) -> AnchorConfig:
    return AnchorConfig(tuple(int(s) for s in _floats(stage.get("strides"))),
                        _floats(stage.get("anchor_scales")), _floats(stage.get("aspect_ratios")))


def _train_config(stage: StageSpec, seed: int, pretrain_path: Optional[str] = None) -> TrainConfig:
    where = f"[stage:{stage.name}]"
    epochs = _int(stage.get("epochs"), f"{where} epochs")
    patience = _int(stage.get("patience"), f"{where} patience")
    opt = OptimConfig(kind=stage.get("optimizer"), lr=_float(stage.get("lr"), f"{where} lr"),
                      momentum=_float(stage.get("momentum"), f"{where} momentum"),
                      weight_decay=_float(stage.get("weight_decay"), f"{where} weight_decay"),
                      schedule=stage.get("schedule"),
                      warmup_steps=_int(stage.get("warmup_steps"), f"{where} warmup_steps"))
    mode = {"self": "self_train", "crosstask_kd": "crosstask_kd", "multitask": "multitask",
            "multitask_selftrain": "multitask_selftrain"}.get(stage.op, "supervised")
    size = stage.get("image_size") or None
    try:
        return TrainConfig(mode=mode, epochs=epochs, early_stop_patience=min(patience, epochs - 1),
                           batch_size=_int(stage.get("batch_size"), f"{where} batch_size"),
                           optimizer=opt, seed=seed, kd=L.KDConfig(stage.get("kd", "none")),
                           pretrain_from=pretrain_path,
                           augment=_bool(stage.get("augment"), f"{where} augment"),
                           image_size=_int(size, f"{where} image_size") if size else None)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where} {exc}") from None


# ------------------------------------------------------------------ data

@dataclass
class ExperimentData:
    catalog: ClassCatalog
    universe: list
    val: list
    manifests: dict

    def samples(self, names: str) -> list:
        ids = {}
        for n in _names(names):
            ids.update(dict.fromkeys(self.manifests[n].ids))
        return select(self.universe, ids)

    def checksum(self, names: str) -> str:
        return _sha("\n".join(self.manifests[n].checksum for n in _names(names)).encode())


def _merge_by_id(*groups) -> list:
    merged, order = {}, []
    for group in groups:
        for s in group:
            if s.id not in merged:
                merged[s.id] = s
                order.append(s.id)
                continue
            a = merged[s.id]
            merged[s.id] = dataclasses.replace(
                a, det_annotations=a.det_annotations if a.det_annotations is not None else s.det_annotations,
                seg_mask=a.seg_mask if a.seg_mask is not None else s.seg_mask)
    return [merged[i] for i in order]


def load_dataset(config: ExperimentConfig) -> tuple:
    """``(catalog, training universe, validation samples)`` for a config."""
    ds = config.dataset
    if ds.get("kind", "shapes") == "shapes":
        cat = ClassCatalog.shapes()
        size = int(ds.get("image_size", 128))
        train = generate_shapes(ShapesConfig(n_images=int(ds.get("n_train", 2000)), image_size=size,
                                             seed=int(ds.get("data_seed", 100)) + config.seed), cat)
        val = generate_shapes(ShapesConfig(n_images=int(ds.get("n_val", 400)), image_size=size,
                                           seed=int(ds.get("val_seed", 999)), id_prefix="val"), cat)
        return cat, train, val
    root = data_root(ds.get("root"))
    if root is None:
        raise ConfigurationError("dataset.root is required for kind=voc (or set DETDISTILL_DATA)")
    cat = ClassCatalog.voc()
    parts = []
    if ds.get("det_split", "trainval"):
        parts.append(load_voc_detection(root, ds.get("det_split", "trainval"), cat))
    if ds.get("seg_split"):
        parts.append(load_voc_segmentation(root, ds["seg_split"], cat, ds.get("mask_dir", "SegmentationClass")))
    val_split = ds.get("val_split", "val")
    val = _merge_by_id(load_voc_detection(root, val_split, cat),
                       load_voc_segmentation(root, val_split, cat, ds.get("mask_dir", "SegmentationClass")))
    return cat, _merge_by_id(*parts), both_task_filter(val)


def build_splits(config: ExperimentConfig, ids: Sequence[str]) -> dict:
    sp, seed = config.splits, config.seed
    out = {"full": SplitManifest("full", ids, seed=seed)}

    def carve(universe_ids, fractions, prefix, parent):
        fr = [_fraction(f, "splits") for f in _names(fractions)]
        if not fr:
            return
        for f, m in zip(fr, make_prefix_fractions(universe_ids, fr, seed=seed, name=parent)):
            tag = prefix + _frac_tag(f)
            out[tag] = dataclasses.replace(m, name=tag)
            rest = prefix + "not_" + _frac_tag(f)
            out[rest] = complement(out[tag], universe_ids, name=rest)

    carve(list(ids), sp.get("fractions", ""), "", "full")
    if sp.get("task_fraction"):
        part = make_task_partition(ids, _fraction(sp["task_fraction"], "splits.task_fraction", True), seed)
        out["det"] = SplitManifest("det", part.det_ids, parent="full", seed=seed)
        out["seg"] = SplitManifest("seg", part.seg_ids, parent="full", seed=seed)
        carve(list(part.det_ids), sp.get("det_fractions", ""), "det_", "det")
        carve(list(part.seg_ids), sp.get("seg_fractions", ""), "seg_", "seg")
    return out


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    cat, universe, val = load_dataset(config)
    return ExperimentData(cat, universe, val, build_splits(config, sample_ids(universe)))


# ------------------------------------------------------------------ records

@dataclass
class StageRecord:
    name: str
    op: str
    key: str
    checkpoint: str
    report: dict
    wall_time: float
    skipped: bool = False
    label: str = ""
    column: str = ""
    reported: bool = True
    best_epoch: int = 0
    epochs_run: int = 0
    telemetry: dict = field(default_factory=dict)

    def metric_report(self) -> MetricReport:
        return MetricReport.from_dict(self.report)


@dataclass
class RunRecord:
    name: str
    seed: int
    config_hash: str
    source_revision: str
    run_dir: str
    stages: dict = field(default_factory=dict)
    status: str = "pending"
    error: str = ""
    failed_stage: str = ""
    wall_time: float = 0.0
    metrics: list = field(default_factory=lambda: ["AP50", "AP75", "mAP"])
    title: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        d["stages"] = {k: StageRecord(**v) for k, v in d.get("stages", {}).items()}
        return cls(**d)

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        path = Path(run_dir) / "record.json"
        if not path.exists():
            raise InputError(f"no record.json in {run_dir}")
        rec = cls.from_json(path.read_text())
        rec.verify()
        return rec

    def save(self) -> Path:
        path = Path(self.run_dir) / "record.json"
        path.write_text(self.to_json())
        return path

    def verify(self):
        """The stored config must still hash to ``config_hash``."""
        cfg = Path(self.run_dir) / "config.ini"
        if not cfg.exists() or _sha(cfg.read_bytes()) != self.config_hash:
            raise InputError(f"{cfg} does not match the recorded config hash")

    def config(self) -> ExperimentConfig:
        return ExperimentConfig.from_file(Path(self.run_dir) / "config.ini")

    def reports(self) -> dict:
        return {k: s.metric_report() for k, s in self.stages.items()}


# ------------------------------------------------------------------ execution

def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=str))


class _Executor:
    def __init__(self, config: ExperimentConfig, run_dir: Path, cache_dir: Optional[Path]):
        self.config = config
        self.run_dir = run_dir
        self.stage_root = cache_dir or run_dir / "stages"
        self.data: Optional[ExperimentData] = None
        self.keys: dict = {}
        self.records: dict = {}
        self._src = source_digest()

    def load_data(self):
        if self.data is None:
            self.data = prepare_data(self.config)
            for m in self.data.manifests.values():
                save_manifest(m, self.run_dir / "splits" / f"{m.name}.txt")
        return self.data

    def stage_key(self, stage: StageSpec) -> str:
        data = self.load_data()
        refs = {}
        for key in ("teacher", "pretrain"):
            ref = stage.get(key)
            if ref:
                refs[key] = self.keys[ref] if ref in self.keys else _sha(Path(ref).read_bytes())
        blob = {
            "op": stage.op,
            "params": {k: v for k, v in sorted(stage.params.items())
                       if k not in ("label", "column", "report", "teacher", "pretrain")},
            "data": data.checksum(stage.get("data")),
            "seg_data": data.checksum(stage.get("seg_data")) if stage.get("seg_data") else None,
            "val": _sha("\n".join(sample_ids(data.val)).encode()),
            "dataset": sorted(self.config.dataset.items()),
            "seed": self.config.seed,
            "refs": refs,
            "source": self._src,
        }
        return _sha(json.dumps(blob, sort_keys=True).encode())

    def stage_dir(self, stage: StageSpec, key: str) -> Path:
        return self.stage_root / f"{stage.op}-{key[:16]}"

    def _ref_path(self, ref: str) -> str:
        return self.records[ref].checkpoint if ref in self.records else str(ref)

    def run_stage(self, stage: StageSpec) -> StageRecord:
        key = self.stage_key(stage)
        self.keys[stage.name] = key
        sdir = self.stage_dir(stage, key)
        meta = sdir / "stage.json"
        if meta.exists() and (sdir / "model.pt").exists():
            rec = StageRecord(**json.loads(meta.read_text()))
            if rec.key == key:
                log.info("stage %s: cached (%s)", stage.name, sdir.name)
                rec = dataclasses.replace(rec, name=stage.name, skipped=True, label=stage.label,
                                          column=stage.column, reported=stage.reported)
                self.records[stage.name] = rec
                return rec
        log.info("stage %s: training (%s)", stage.name, stage.op)
        start = time.perf_counter()
        sdir.mkdir(parents=True, exist_ok=True)
        result = self._train(stage, sdir)
        save_checkpoint(result.model, sdir / "model.pt", {"stage": stage.name, "key": key})
        report = evaluate(result.model, self.data.val)
        rec = StageRecord(
            name=stage.name, op=stage.op, key=key, checkpoint=str(sdir / "model.pt"),
            report=report.to_dict(), wall_time=time.perf_counter() - start, label=stage.label,
            column=stage.column, reported=stage.reported, best_epoch=result.state.best_epoch,
            epochs_run=len(result.history), telemetry=_jsonable(result.telemetry))
        meta.write_text(json.dumps(dataclasses.asdict(rec), indent=2, sort_keys=True))
        self.records[stage.name] = rec
        return rec

    def _train(self, stage: StageSpec, sdir: Path):
        data = self.data
        seed = self.config.seed
        pretrain = self._ref_path(stage.get("pretrain")) if stage.get("pretrain") else None
        cfg = _train_config(stage, seed, pretrain)
        model = build_model(_model_spec(stage), data.catalog, _anchor_config(stage), seed=seed)
        teacher = load_checkpoint(self._ref_path(stage.get("teacher"))) if stage.get("teacher") else None
        train = data.samples(stage.get("data"))
        val = data.val
        log_path = sdir / "history.jsonl"
        if log_path.exists():
            log_path.unlink()
        op = stage.op
        if op == "teacher":
            return train_teacher(model, [s.detection_only() for s in train], cfg, val, log_path)
        if op == "supervised":
            return train_supervised(model, [s.detection_only() for s in train], cfg, val, log_path,
                                    teacher=teacher)
        if op == "segmentation":
            return train_segmentation(model, [s.segmentation_only() for s in train], cfg, val, log_path)
        if op == "self":
            return train_self(model, teacher, [s.unlabeled() for s in train], cfg, val, log_path)
        if op == "crosstask_kd":
            return train_crosstask_kd(model, teacher, [s.detection_only() for s in train], cfg, val,
                                      log_path)
        seg = [s.segmentation_only() for s in data.samples(stage.get("seg_data"))]
        if op == "multitask":
            return train_multitask(model, [s.detection_only() for s in train], seg, cfg, val, log_path)
        return train_multitask_selftrain(model, teacher, [s.unlabeled() for s in train], seg, cfg,
                                         val, log_path)


def _needed(config: ExperimentConfig, target: str) -> list:
    """Stages ``target`` depends on (itself included), in file order."""
    by_name = {s.name: s for s in config.stages}
    want, todo = set(), [target]
    while todo:
        n = todo.pop()
        if n in want or n not in by_name:
            continue
        want.add(n)
        todo.extend(by_name[n].get(k) for k in ("teacher", "pretrain") if by_name[n].get(k))
    return [s for s in config.stages if s.name in want]


def run_experiment(config: ExperimentConfig, run_dir, cache_dir=None,
                   only: Optional[str] = None) -> RunRecord:
    """Run every stage (or ``only`` and its dependencies) and write ``record.json``.

    A stage failure is recorded in the returned record rather than raised.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.ini"
    cfg_path.write_text(config.text)
    record = RunRecord(name=config.name, seed=config.seed, config_hash=config.config_hash,
                       source_revision=source_revision(), run_dir=str(run_dir),
                       metrics=config.metrics, title=config.title)
    stages = _needed(config, only) if only else config.stages
    if only and not stages:
        raise ConfigurationError(f"no stage named {only!r}")
    ex = _Executor(config, run_dir, Path(cache_dir) if cache_dir else None)
    start = time.perf_counter()
    current = ""
    try:
        for stage in stages:
            current = stage.name
            record.stages[stage.name] = ex.run_stage(stage)
            record.save()
        record.status = "ok"
    except Exception as exc:  # isolate one config's failure from the rest of a matrix
        record.status = "failed"
        record.failed_stage = current
        record.error = f"{type(exc).__name__}: {exc}"
        log.error("%s seed %d: stage %s failed\n%s", config.name, config.seed, current,
                  traceback.format_exc())
        if isinstance(exc, ConfigurationError) and not record.stages:
            record.wall_time = time.perf_counter() - start
            record.save()
            raise
    record.wall_time = time.perf_counter() - start
    record.save()
    return record


def run_dir_for(out_root, config: ExperimentConfig) -> Path:
    return Path(out_root) / f"{config.name}-seed{config.seed}"


def run_matrix(configs: Sequence[ExperimentConfig], out_root, cache_dir=None) -> list:
    """Run independent configs one after another, each in its own directory.

    A failing config is recorded and the rest still run.
    """
    records = []
    for cfg in configs:
        try:
            rec = run_experiment(cfg, run_dir_for(out_root, cfg), cache_dir)
        except DetDistillError as exc:
            rec = RunRecord(name=cfg.name, seed=cfg.seed, config_hash=cfg.config_hash,
                            source_revision="", run_dir=str(run_dir_for(out_root, cfg)),
                            status="failed", error=f"{type(exc).__name__}: {exc}")
        records.append(rec)
    failed = [r for r in records if r.status != "ok"]
    log.info("matrix: %d runs, %d failed", len(records), len(failed))
    return records


def reevaluate(run_dir) -> dict:
    """Reports recomputed from the stored checkpoints, without training."""
    rec = RunRecord.load(run_dir)
    data = prepare_data(rec.config())
    return {name: evaluate(load_checkpoint(s.checkpoint), data.val) for name, s in rec.stages.items()}


# ------------------------------------------------------------------ tables

def table_rows(records: Sequence[RunRecord], metrics: Optional[Sequence[str]] = None) -> list:
    """``(label, column, {metric: seed mean})`` rows, in stage order of the first record."""
    metrics = list(metrics or (records[0].metrics if records else ["AP50", "mAP"]))
    order, values = [], {}
    for rec in records:
        for s in rec.stages.values():
            if not s.reported:
                continue
            key = (s.label, s.column)
            if key not in values:
                order.append(key)
                values[key] = {m: [] for m in metrics}
            rep = s.report
            for m in metrics:
                v = rep.get(METRIC_FIELDS[m])
                # a segmentation-only model has no detection numbers
                if m != "mIoU" and not rep.get("counts", {}).get("gts"):
                    v = None
                if v is not None:
                    values[key][m].append(float(v))
    return [(label, col, {m: (float(np.mean(v)) if v else None) for m, v in values[(label, col)].items()})
            for label, col in order]


def render_table(records: Sequence[RunRecord], metrics: Optional[Sequence[str]] = None,
                 title: Optional[str] = None) -> str:
    ok = [r for r in records if r.stages]
    if not ok:
        return "(no completed runs)"
    metrics = list(metrics or ok[0].metrics)
    seeds = sorted({r.seed for r in ok})
    head = title or ok[0].title or ok[0].name
    head += f" (mean over {len(seeds)} seed{'s' if len(seeds) > 1 else ''}: {', '.join(map(str, seeds))})"
    out = format_table(table_rows(ok, metrics), metrics, head)
    bad = [r for r in records if r.status != "ok"]
    if bad:
        out += "\n" + "\n".join(f"FAILED {r.name} seed {r.seed}: {r.failed_stage or '-'}: {r.error}"
                                for r in bad)
    return out


def clear_run(run_dir):
    """Remove a run directory (used before a fresh, uncached reproduction)."""
    path = Path(run_dir)
    if path.exists():
        shutil.rmtree(path)
