"""Command-line surface: generate, run, ablate, eval.

Every command is a pure function of (config file, dataset files, seed) to
output files; rerunning a command with the same inputs rewrites identical
bytes. Errors exit nonzero with a message on stderr; nothing succeeds
partially in silence.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from .anchors import ActivationResult, load_snapshot
from .config import (DATASET_FILENAMES, DEFAULT_CONFIG_YAML, ExperimentConfig,
                     build_datasets, load_config)
from .domains import class_pixel_counts, load, save
from .metrics import EvalReport, evaluate_model, pseudo_label_audit
from .model import Discriminator, SegModel, load_model, save_model
from .trainer import (MetricsLogger, adapt, pretrain, run_pipeline, warmup)


def _load_experiment_datasets(data_dir):
    out = {}
    for role, name in DATASET_FILENAMES.items():
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"dataset file missing: {path} (run the generate command first)")
        out[role] = load(path)
    return out["source"], out["target-train"], out["target-eval"]


def _eval_record_fn(target_eval):
    def fn(model, stage):
        rep = evaluate_model(model, target_eval)
        return {"miou": rep.miou, "pixel_accuracy": rep.pixel_acc}
    return fn


def _audit_from_snapshot(snap, target_train):
    """Precision/coverage of both pseudo-label routes against the labels the
    trainer never saw."""
    truth = np.concatenate([g.labels.astype(np.int64) for g in target_train.grids])

    def route(active_planes, pseudo_planes):
        active = np.concatenate(active_planes)
        pseudo = np.concatenate(pseudo_planes).astype(np.int64)
        act = ActivationResult(active, pseudo, np.zeros(active.size))
        return pseudo_label_audit(act, truth)

    return {"anchor": route(snap.anchor_active, snap.anchor_pseudo),
            "prob": route(snap.prob_active, snap.prob_pseudo)}


def _write_report(rep: EvalReport, out_dir, basename):
    jpath = os.path.join(out_dir, basename + ".json")
    tpath = os.path.join(out_dir, basename + ".tsv")
    with open(jpath, "w", encoding="utf-8") as f:
        f.write(rep.to_json() + "\n")
    with open(tpath, "w", encoding="utf-8") as f:
        f.write(rep.to_table())
    return jpath, tpath


def cmd_generate(cfg: ExperimentConfig, out_dir=None) -> None:
    out = out_dir or cfg.data.dir
    os.makedirs(out, exist_ok=True)
    datasets = build_datasets(cfg)
    for ds in datasets:
        path = os.path.join(out, DATASET_FILENAMES[ds.role])
        save(ds, path)
        counts = class_pixel_counts(ds)
        print(f"{ds.role}: {len(ds)} grids of "
              f"{ds.grids[0].height}x{ds.grids[0].width}, {ds.C} categories "
              f"-> {path}")
        print(f"  pixels per category: {[int(c) for c in counts]}")


def _detect_resume_stage(run_dir) -> int:
    ks = []
    for name in os.listdir(run_dir):
        m = re.fullmatch(r"stage-(\d+)\.model", name)
        if m and os.path.exists(os.path.join(run_dir, f"stage-{m.group(1)}.opt")):
            ks.append(int(m.group(1)))
    if not ks:
        raise FileNotFoundError(
            f"no stage checkpoint/optimizer pairs found in {run_dir}")
    return max(ks)


def cmd_run(cfg: ExperimentConfig, out_dir=None, resume_path=None) -> None:
    source, target_train, target_eval = _load_experiment_datasets(cfg.data.dir)
    resume_stage = None
    if resume_path is not None:
        out = resume_path  # resuming continues inside the original run dir
        resume_stage = _detect_resume_stage(resume_path)
        print(f"resuming after stage {resume_stage} from {resume_path}")
    else:
        out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    log_name = "metrics.jsonl" if resume_stage is None else "metrics-resume.jsonl"
    with MetricsLogger(os.path.join(out, log_name)) as log:
        model, records = run_pipeline(
            source, target_train, cfg.train, cfg.model.dims(), out, log,
            _eval_record_fn(target_eval), resume_stage=resume_stage)
    rep = evaluate_model(model, target_eval)
    if cfg.train.stages >= 1:
        snap_path = os.path.join(out, f"stage-{cfg.train.stages}.snapshot")
        if os.path.exists(snap_path):
            rep.pseudo_audit = _audit_from_snapshot(load_snapshot(snap_path),
                                                    target_train)
    _write_report(rep, out, "final-report")
    print(rep.to_table(), end="")
    miou = "nan" if np.isnan(rep.miou) else f"{100.0 * rep.miou:.2f}"
    print(f"final target mIoU: {miou}  (artifacts in {out})")


def _format_ablation_row(name: str, miou: float, gain: float) -> str:
    return f"{name}\t{100.0 * miou:.4f}\t{100.0 * gain:.4f}"


def cmd_ablate(cfg: ExperimentConfig, out_dir=None) -> None:
    source, target_train, target_eval = _load_experiment_datasets(cfg.data.dir)
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    target_hidden = target_train.unlabeled_view()
    eval_fn = _eval_record_fn(target_eval)
    dims = cfg.model.dims()

    # one shared pretrained+warmed base for every variant that keeps warm-up
    base = SegModel(D=source.grids[0].feature_dim, C=source.C,
                    seed=cfg.train.seed, **dims)
    with MetricsLogger(os.path.join(out, "base-metrics.jsonl")) as log:
        pretrain(base, source, cfg.train, log)
        disc = Discriminator(F=base.F, hidden=base.hidden, seed=cfg.train.seed)
        warmup(base, disc, source, target_hidden, cfg.train, log)
    save_model(base, os.path.join(out, "warmup.model"))
    warm_rep = evaluate_model(base, target_eval)
    _write_report(warm_rep, out, "warmup-report")

    rows = []
    for name in cfg.ablate_variants:
        vcfg = cfg.variant_train_config(name)
        vdir = os.path.join(out, name.replace("+", "_plus_"))
        os.makedirs(vdir, exist_ok=True)
        with MetricsLogger(os.path.join(vdir, "metrics.jsonl")) as vlog:
            if vcfg.enable_warmup:
                vmodel = base.clone()
                vmodel, _ = adapt(vmodel, source, target_hidden, vcfg, vdir,
                                  vlog, eval_fn)
            else:
                vmodel, _ = run_pipeline(source, target_train, vcfg, dims,
                                         vdir, vlog, eval_fn)
        save_model(vmodel, os.path.join(vdir, "final.model"))
        rep = evaluate_model(vmodel, target_eval)
        _write_report(rep, vdir, "report")
        rows.append((name, rep.miou, rep.miou - warm_rep.miou))

    lines = ["variant\tmiou_x100\tgain_x100"]
    lines += [_format_ablation_row(*row) for row in rows]
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out, "ablation.tsv"), "w", encoding="utf-8") as f:
        f.write(table)
    print(table, end="")


def _check_dims(model, ds):
    d = ds.grids[0].feature_dim
    if model.D != d:
        raise ValueError(f"checkpoint expects {model.D}-dim features, "
                         f"dataset has {d}")
    if model.C < ds.C:
        raise ValueError(f"checkpoint scores {model.C} categories, "
                         f"dataset labels go up to {ds.C}")


def cmd_eval_single(checkpoint, data_path, out_dir=None) -> None:
    model = load_model(checkpoint)
    ds = load(data_path)
    _check_dims(model, ds)
    rep = evaluate_model(model, ds)
    print(rep.to_table(), end="")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_report(rep, out_dir, "report")


def cmd_eval_series(run_dir, data_path, audit_path=None, out_dir=None) -> None:
    """Per-stage series over a finished run directory: mIoU, activation
    fractions, pseudo-label precision. Tabular, ready for plotting."""
    ds = load(data_path)
    audit_ds = load(audit_path) if audit_path else None
    rows = []
    entries = []
    warm = os.path.join(run_dir, "warmup.model")
    if os.path.exists(warm):
        entries.append((0, warm, None))
    for name in sorted(os.listdir(run_dir)):
        m = re.fullmatch(r"stage-(\d+)\.model", name)
        if m:
            k = int(m.group(1))
            snap = os.path.join(run_dir, f"stage-{k}.snapshot")
            entries.append((k, os.path.join(run_dir, name),
                            snap if os.path.exists(snap) else None))
    if not entries:
        raise FileNotFoundError(f"no checkpoints found in {run_dir}")
    entries.sort()
    for k, ckpt, snap_path in entries:
        model = load_model(ckpt)
        _check_dims(model, ds)
        rep = evaluate_model(model, ds)
        row = {"stage": k, "miou_x100": f"{100.0 * rep.miou:.4f}",
               "anchor_active_frac": "-", "prob_active_frac": "-",
               "anchor_precision": "-", "prob_precision": "-"}
        if snap_path and audit_ds is not None:
            audits = _audit_from_snapshot(load_snapshot(snap_path), audit_ds)
            for route in ("anchor", "prob"):
                a = audits[route]
                row[f"{route}_active_frac"] = f"{a['coverage']:.6f}"
                if a["precision"] is not None:
                    row[f"{route}_precision"] = f"{a['precision']:.6f}"
        rows.append(row)
    header = ["stage", "miou_x100", "anchor_active_frac", "prob_active_frac",
              "anchor_precision", "prob_precision"]
    lines = ["\t".join(header)]
    lines += ["\t".join(str(r[h]) for h in header) for r in rows]
    table = "\n".join(lines) + "\n"
    out = out_dir or run_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "series.tsv"), "w", encoding="utf-8") as f:
        f.write(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="anchoradapt",
        description="Anchor-guided adaptation on synthetic shifted-domain grids")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="experiment config file (YAML)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")

    g = sub.add_parser("generate", help="write the three dataset files")
    common(g)
    r = sub.add_parser("run", help="pretrain, warm up, adapt, evaluate")
    common(r)
    r.add_argument("--stage-resume", default=None, metavar="PATH",
                   help="run directory to resume from its last stage boundary")
    a = sub.add_parser("ablate", help="run objective-term variants and tabulate")
    common(a)
    e = sub.add_parser("eval", help="evaluate checkpoints against a dataset")
    common(e, config_required=False)
    e.add_argument("--checkpoint", default=None, help="single model checkpoint")
    e.add_argument("--run-dir", default=None,
                   help="run directory: emit a per-stage series instead")
    e.add_argument("--data", default=None, required=True,
                   help="dataset file to evaluate on")
    e.add_argument("--audit-data", default=None,
                   help="labeled dataset for pseudo-label audits (series mode)")
    d = sub.add_parser("print-config", help="print the default config file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "print-config":
            print(DEFAULT_CONFIG_YAML, end="")
            return 0
        cfg = None
        if getattr(args, "config", None):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "run":
            cmd_run(cfg, args.out, args.stage_resume)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.out)
        elif args.command == "eval":
            if (args.checkpoint is None) == (args.run_dir is None):
                raise ValueError("eval needs exactly one of --checkpoint or --run-dir")
            if args.checkpoint:
                cmd_eval_single(args.checkpoint, args.data, args.out)
            else:
                cmd_eval_series(args.run_dir, args.data, args.audit_data, args.out)
        return 0
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
