"""Command line: ``detdistill {split,train,eval,report,reproduce}``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 when a
run fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .exceptions import ConfigurationError, DetDistillError, InputError
from .models import load_checkpoint
from .splits import complement, make_prefix_fractions, make_task_partition, save_manifest, SplitManifest
from .validation import check_fraction

log = logging.getLogger("detdistill")


class _Usage(Exception):
    """Bad arguments or configuration; maps to exit status 2."""


def _read_ids(path) -> list:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise _Usage(f"cannot read ids file {path}: {exc}") from None
    return [x.strip() for x in lines if x.strip() and not x.startswith("#")]


def _fractions(text) -> list:
    try:
        return [check_fraction(f.strip()) for f in text.split(",") if f.strip()]
    except ConfigurationError as exc:
        raise _Usage(f"--fractions: {exc}") from None


def _load_config(path, seed=None):
    from .runner import ExperimentConfig

    return ExperimentConfig.from_file(path, seed)


# ------------------------------------------------------------------ subcommands

def cmd_split(args) -> int:
    out = Path(args.out)
    if args.config:
        from .data import sample_ids
        from .runner import build_splits, load_dataset

        cfg = _load_config(args.config, args.seed)
        _, universe, _ = load_dataset(cfg)
        manifests = build_splits(cfg, sample_ids(universe))
    else:
        if not args.ids:
            raise _Usage("split needs --ids FILE or --config FILE")
        ids = _read_ids(args.ids)
        seed = args.seed or 0
        manifests = {"full": SplitManifest(args.name, ids, seed=seed)}
        if args.fractions:
            for m in make_prefix_fractions(ids, _fractions(args.fractions), seed=seed, name=args.name):
                manifests[m.name] = m
                if args.complements:
                    c = complement(m, ids)
                    manifests[c.name] = c
        if args.task_fraction:
            part = make_task_partition(ids, check_fraction(args.task_fraction), seed=seed)
            manifests["det"] = SplitManifest(f"{args.name}_det", part.det_ids, parent=args.name, seed=seed)
            manifests["seg"] = SplitManifest(f"{args.name}_seg", part.seg_ids, parent=args.name, seed=seed)
    for m in manifests.values():
        path = save_manifest(m, out / f"{m.name}.txt")
        print(f"{m.name}\t{len(m)}\t{path}")
    return 0


def cmd_train(args) -> int:
    from .runner import run_dir_for, run_experiment

    cfg = _load_config(args.config, args.seed)
    cfg.stage(args.stage)
    rec = run_experiment(cfg, args.out or run_dir_for("runs", cfg), args.cache, only=args.stage)
    if rec.status != "ok":
        print(f"stage {rec.failed_stage} failed: {rec.error}", file=sys.stderr)
        return 1
    st = rec.stages[args.stage]
    print(json.dumps({"stage": st.name, "checkpoint": st.checkpoint, "skipped": st.skipped,
                      "report": st.report}, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .runner import RunRecord, prepare_data, reevaluate
    from .training import evaluate

    if args.run:
        reports = reevaluate(args.run)
        rec = RunRecord.load(args.run)
        out = {}
        for name, rep in reports.items():
            out[name] = {"report": rep.to_dict(),
                         "matches_record": rep.close_to(rec.stages[name].metric_report(), 1e-6)}
        text = json.dumps(out, indent=2, sort_keys=True)
    else:
        if not (args.checkpoint and args.config):
            raise _Usage("eval needs --run DIR, or --checkpoint FILE with --config FILE")
        cfg = _load_config(args.config, args.seed)
        try:
            model = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise _Usage(str(exc)) from None
        text = evaluate(model, prepare_data(cfg).val).to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def _find_records(paths) -> list:
    from .runner import RunRecord

    found = []
    for p in map(Path, paths):
        if (p / "record.json").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(x.parent for x in p.rglob("record.json")))
        else:
            raise _Usage(f"{p} is not a run directory")
    if not found:
        raise _Usage("no run records found")
    return [RunRecord.load(p) for p in found]


def cmd_report(args) -> int:
    from .runner import render_table, table_rows

    records = _find_records(args.runs)
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    print(render_table(records, metrics, args.title))
    if args.json:
        rows = table_rows([r for r in records if r.stages], metrics)
        Path(args.json).write_text(json.dumps(
            [{"label": a, "column": b, "values": v} for a, b, v in rows], indent=2))
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_reproduce(args) -> int:
    from .presets import preset, preset_text
    from .runner import clear_run, render_table, run_dir_for, run_matrix

    table = "trends" if args.table == "trends" else int(args.table)
    if args.print_config:
        print(preset_text(table, args.scale), end="")
        return 0
    configs = [preset(table, args.scale, seed) for seed in args.seed]
    if args.fresh:
        for c in configs:
            clear_run(run_dir_for(args.out, c))
    records = run_matrix(configs, args.out, args.cache)
    print(render_table(records))
    for r in records:
        print(f"record: {Path(r.run_dir) / 'record.json'}")
    return 0 if all(r.status == "ok" for r in records) else 1


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="write split manifests")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--ids", help="file with one sample id per line")
    src.add_argument("--config", help="experiment file; its [splits] section is materialised")
    s.add_argument("--fractions", help="comma-separated, e.g. 1/2,1/4,1/8")
    s.add_argument("--complements", action="store_true", help="also write each complement")
    s.add_argument("--task-fraction", help="share of ids for the detection task")
    s.add_argument("--name", default="train")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="run one stage of an experiment (and what it depends on)")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", help="run directory (default runs/NAME-seedS)")
    t.add_argument("--cache", help="shared stage cache directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="emit a metric report")
    e.add_argument("--run", help="recompute every stage report of a run from its checkpoints")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="experiment file providing the validation set")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render run records as a table")
    r.add_argument("runs", nargs="+", help="run directories or folders containing them")
    r.add_argument("--metrics", help="e.g. AP50,mAP,mIoU")
    r.add_argument("--title")
    r.add_argument("--json", help="also write the table rows as JSON")
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("reproduce", help="run a prebuilt table experiment")
    x.add_argument("--table", required=True, choices=["1", "2", "3", "4", "5", "trends"])
    x.add_argument("--scale", default="toy", choices=["toy", "desk"])
    x.add_argument("--seed", type=int, nargs="+", default=[0])
    x.add_argument("--out", default="runs")
    x.add_argument("--cache", help="stage cache shared across runs")
    x.add_argument("--fresh", action="store_true", help="delete existing run directories first")
    x.add_argument("--print-config", action="store_true", help="print the experiment file and exit")
    x.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (_Usage, ConfigurationError, InputError) as exc:
        print(f"detdistill {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DetDistillError as exc:
        print(f"detdistill {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
