"""Prebuilt experiment files for the five result tables and the trend suite.

``preset_text(table, scale)`` returns INI text that :mod:`detdistill.runner`
runs unchanged; print it with ``detdistill reproduce --table N --print-config``
to start a custom experiment from it.
"""
from __future__ import annotations

from .exceptions import ConfigurationError

SCALES = {
    # small enough for three seeds of the trend suite in well under an hour on one core
    "toy": {"dataset": {"kind": "shapes", "n_train": 320, "n_val": 160, "image_size": 64},
            "train": {"epochs": 40, "patience": 10}},
    "desk": {"dataset": {"kind": "shapes", "n_train": 2000, "n_val": 400, "image_size": 128},
             "train": {"epochs": 40, "patience": 10}},
}
KD_ROWS = (("mse", "+MSE"), ("pdf", "+PDF"), ("defeat", "+DeFeat"))
FRACTIONS = (("1of2", "1/2"), ("1of4", "1/4"), ("1of8", "1/8"))


def _stage(name, **kw) -> str:
    lines = [f"[stage:{name}]"] + [f"{k} = {v}" for k, v in kw.items() if v is not None]
    return "\n".join(lines)


def _header(name, title, metrics, splits: dict, scale: str) -> str:
    if scale not in SCALES:
        raise ConfigurationError(f"scale must be one of {sorted(SCALES)}, got {scale!r}")
    sc = SCALES[scale]
    parts = [f"[experiment]\nname = {name}\ntitle = {title}\nseed = 0\nmetrics = {metrics}"]
    for sec in ("dataset", "train"):
        parts.append(f"[{sec}]\n" + "\n".join(f"{k} = {v}" for k, v in sc[sec].items()))
    parts.append("[splits]\n" + "\n".join(f"{k} = {v}" for k, v in splits.items()))
    return "\n\n".join(parts)


def _kd_family(prefix, label, column, teacher, plain_needs_teacher, **base) -> list:
    """A plain row followed by its +MSE, +PDF and +DeFeat variants."""
    out = [_stage(prefix, label=label, column=column, **base,
                  teacher=teacher if plain_needs_teacher else None)]
    for kd, tag in KD_ROWS:
        out.append(_stage(f"{prefix}_{kd}", label=f"{label} {tag}", column=column, **base,
                          teacher=teacher, kd=kd))
    return out


def _table1() -> tuple:
    stages = [_stage("teacher", op="teacher", data="1of2", label="Teacher", column="1/2")]
    stages += _kd_family("supervised", "Supervised", "1/2", "teacher", False, op="supervised",
                         data="1of2")
    stages += _kd_family("self", "Self-trained", "full", "teacher", True, op="self", data="full")
    return ("table1", "Supervised on a half vs self-trained on the full set", "AP50, AP75, mAP",
            {"fractions": "1/2"}, stages)


def _table2() -> tuple:
    stages = []
    for tag, col in FRACTIONS:
        stages.append(_stage(f"teacher_{tag}", op="teacher", data=tag, label="Teacher", column=col))
    for tag, col in FRACTIONS:
        stages += _kd_family(f"supervised_{tag}", "Supervised", col, f"teacher_{tag}", False,
                             op="supervised", data=tag)
    for tag, col in FRACTIONS:
        stages += _kd_family(f"self_{tag}", "Self-trained on full", col, f"teacher_{tag}", True,
                             op="self", data="full")
    return ("table2", "Teachers trained on 1/2, 1/4 and 1/8; students on the same subset or on full",
            "mAP, AP50", {"fractions": "1/2, 1/4, 1/8"}, stages)


def _table3() -> tuple:
    stages = []
    for tag, col in FRACTIONS:
        stages.append(_stage(f"teacher_{tag}", op="teacher", data=tag, label="Teacher", column=col))
        stages.append(_stage(f"supervised_{tag}", op="supervised", data=tag, label="Supervised",
                             column=col))
    # students never see the images their teacher was trained on
    pairs = [("1of2", "1/2", "not_1of2"), ("1of4", "1/4", "not_1of2"), ("1of8", "1/8", "not_1of2"),
             ("1of4", "1/4", "not_1of4"), ("1of8", "1/8", "not_1of4"), ("1of8", "1/8", "not_1of8")]
    for tag, col, data in pairs:
        stages += _kd_family(f"self_{tag}_on_{data}", f"Self-trained on {data}", col,
                             f"teacher_{tag}", True, op="self", data=data)
    return ("table3", "Students self-trained on images their teacher never saw", "mAP, AP50",
            {"fractions": "1/2, 1/4, 1/8"}, stages)


def _table4() -> tuple:
    teachers = [("seg_teacher_seg_half", "seg_1of2", "seg 1/2"), ("seg_teacher_seg", "seg", "seg"),
                ("seg_teacher_det_half_seg", "det_1of2 + seg", "det 1/2 + seg")]
    stages = [_stage(n, op="segmentation", data=d, label="Segmentation teacher", column=c)
              for n, d, c in teachers]
    for data, col in (("det_1of2", "det 1/2"), ("det", "det")):
        stages.append(_stage(f"supervised_{data}", op="supervised", data=data, label="Supervised",
                             column=col))
        for tname, _, tcol in teachers:
            for kd, tag in (("mse", "+MSE"), ("defeat", "+DeFeat")):
                stages.append(_stage(f"supervised_{data}_{kd}_from_{tname}", op="crosstask_kd",
                                     data=data, teacher=tname, kd=kd,
                                     label=f"Supervised {tag} (teacher {tcol})", column=col))
    return ("table4", "Detection students distilled from segmentation teachers", "AP50, mAP, mIoU",
            {"task_fraction": "1/2", "det_fractions": "1/2", "seg_fractions": "1/2"}, stages)


def _table5() -> tuple:
    s = [
        _stage("teacher", op="teacher", data="det_1of2", label="Teacher", column="det 1/2"),
        _stage("supervised", op="supervised", data="det_1of2", label="Supervised", column="det 1/2"),
        _stage("segmentation", op="segmentation", role="student", data="seg",
               label="Segmentation only", column="seg"),
        _stage("supervised_pre", op="supervised", data="det_1of2", pretrain="segmentation",
               label="Supervised, pretrained on seg", column="det 1/2"),
        _stage("self_det", op="self", data="det", teacher="teacher", label="Self-trained",
               column="det"),
        _stage("self_det_pre", op="self", data="det", teacher="teacher", pretrain="supervised",
               label="Self-trained, pretrained on det 1/2", column="det"),
        _stage("self_full", op="self", data="full", teacher="teacher", label="Self-trained",
               column="full"),
        _stage("self_full_pre", op="self", data="full", teacher="teacher", pretrain="supervised",
               label="Self-trained, pretrained on det 1/2", column="full"),
        _stage("multitask", op="multitask", data="det_1of2", seg_data="seg", label="Multitask",
               column="det 1/2 + seg"),
        _stage("multitask_pre", op="multitask", data="det_1of2", seg_data="seg",
               pretrain="supervised", label="Multitask, pretrained on det 1/2",
               column="det 1/2 + seg"),
        _stage("multitask_self", op="multitask_selftrain", data="det", seg_data="seg",
               teacher="teacher", label="Multitask + selftrain", column="det + seg"),
        _stage("multitask_self_pre", op="multitask_selftrain", data="det", seg_data="seg",
               teacher="teacher", pretrain="supervised",
               label="Multitask + selftrain, pretrained", column="det + seg"),
        _stage("multitask_self_pre_pdf", op="multitask_selftrain", data="det", seg_data="seg",
               teacher="teacher", pretrain="supervised", kd="pdf",
               label="Multitask + selftrain, pretrained +PDF", column="det + seg"),
    ]
    return ("table5", "Self-training and multi-task learning on partially annotated data",
            "AP50, mAP, mIoU", {"task_fraction": "1/2", "det_fractions": "1/2"}, s)


def _trends() -> tuple:
    s = [_stage(f"teacher_{tag}", op="teacher", data=tag, label="Teacher", column=col)
         for tag, col in FRACTIONS]
    s.append(_stage("supervised_1of2", op="supervised", data="1of2", label="Supervised", column="1/2"))
    s += [_stage(f"self_{tag}", op="self", data="full", teacher=f"teacher_{tag}",
                 label="Self-trained on full", column=col) for tag, col in FRACTIONS]
    s += [
        _stage("supervised_det_1of2", op="supervised", data="det_1of2", label="Supervised",
               column="det 1/2"),
        _stage("multitask", op="multitask", data="det_1of2", seg_data="seg", label="Multitask",
               column="det 1/2 + seg"),
        _stage("seg_teacher", op="segmentation", data="seg", label="Segmentation teacher",
               column="seg"),
        _stage("crosstask_mse", op="crosstask_kd", data="det_1of2", teacher="seg_teacher", kd="mse",
               label="Supervised +MSE (seg teacher)", column="det 1/2"),
    ]
    return ("trends", "Trend suite", "AP50, mAP, mIoU",
            {"fractions": "1/2, 1/4, 1/8", "task_fraction": "1/2", "det_fractions": "1/2"}, s)


TABLES = {1: _table1, 2: _table2, 3: _table3, 4: _table4, 5: _table5, "trends": _trends}


def preset_text(table, scale: str = "toy") -> str:
    key = table if table == "trends" else _table_number(table)
    name, title, metrics, splits, stages = TABLES[key]()
    return _header(name, title, metrics, splits, scale) + "\n\n" + "\n\n".join(stages) + "\n"


def _table_number(table) -> int:
    try:
        n = int(table)
    except (TypeError, ValueError):
        n = None
    if n not in TABLES:
        raise ConfigurationError(f"table must be one of 1, 2, 3, 4, 5 or 'trends', got {table!r}")
    return n


def preset(table, scale: str = "toy", seed: int = 0):
    from .runner import ExperimentConfig

    return ExperimentConfig.from_text(preset_text(table, scale), seed=seed)
