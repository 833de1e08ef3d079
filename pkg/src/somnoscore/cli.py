"""Command-line entry point.

One executable, batch subcommands, no daemon:

    ingest            EDF directory -> epoch container + ingest report
    synth             generated epochs -> container (+ metadata sidecar)
    split             patient-level train/val/test assignment
    train / resume    optimization runs under an append-only run directory
    eval              score a checkpoint on a split -> report JSON + TSV
    ablate            one single-channel model per montage channel
    predict           per-epoch stage predictions -> CSV
    export-features   penultimate-layer representation -> CSV
    export-hypnogram  one study's stage trace -> CSV (+ figure)
    report            render figures + summary table from eval artifacts

Every artifact-producing run writes ``manifest.json`` recording the
resolved configuration, seed, package version, and SHA-256 digests of
its inputs, so a run can be replayed exactly from the manifest alone.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DataError,
    EmptyCohort,
    InternalError,
    SomnoscoreError,
    UserError,
)
from .evaluation import (
    channel_ablation,
    evaluate,
    export_features,
    export_hypnogram,
    read_hypnogram,
    write_ablation_csv,
)
from .ingest import (
    MONTAGE,
    STAGE_NAMES,
    ingest_recording,
    read_subject_meta,
    recording_duration_hours,
    write_subject_meta,
)
from .metrics import percent
from .model import load_params
from .store import (
    EpochStore,
    SplitSpec,
    class_counts,
    duration_stats,
    patient_split,
    read_split,
    read_store,
    split_sizes,
    write_split,
    write_store,
)
from .synth import synth_generate, synth_subjects
from .training import LAST_CHECKPOINT, RunConfig
from .training import evaluate_split as _predict_split
from .training import resume as train_resume
from .training import train as train_run

# ---------------------------------------------------------------------------
# shared plumbing


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict | None,
                    seed, inputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_run_dir(requested: str) -> Path:
    """Append-only run directories: an occupied path gets a timestamped sibling."""
    path = Path(requested)
    if path.exists() and any(path.iterdir()):
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        path = path.with_name(f"{path.name}-{stamp}")
    return path


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UserError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = _parse_overrides(getattr(args, "override", None))
    if overrides:
        config = config.apply_overrides(overrides)
    return config


def _load_store(store_path, split_path=None) -> EpochStore:
    store = read_store(store_path)
    if split_path:
        store = store.with_splits(read_split(split_path))
    return store


def _sidecar_meta(args):
    path = getattr(args, "meta", None)
    return read_subject_meta(path) if path else None


def _print(message: str) -> None:
    sys.stdout.write(message + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    edf_dir = Path(args.edf_dir)
    files = sorted(edf_dir.glob("*.edf")) + sorted(edf_dir.glob("*.EDF"))
    if not files:
        raise EmptyCohort(f"no .edf files under {edf_dir}")
    metas = _sidecar_meta(args)

    all_epochs = []
    per_file = []
    durations = []
    for path in files:
        entry = {"file": path.name}
        try:
            from .edf import read_edf
            rec = read_edf(path)
            key = rec.header.patient_id or path.stem
            if metas and key not in metas and path.stem in metas:
                key = path.stem
            if metas and key in metas:
                rec.subject = metas[key]
            epochs, stats = ingest_recording(rec, patient_key=key)
            all_epochs.extend(epochs)
            durations.append(recording_duration_hours(rec))
            entry.update({
                "patient_key": key,
                "epochs": stats.epochs_emitted,
                "skipped_unscored": stats.skipped_unscored,
                "snapped_onsets": stats.snapped_onsets,
                "rejected_unaligned": stats.rejected_unaligned,
                "dropped_partial": stats.dropped_partial,
            })
        except SomnoscoreError as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        per_file.append(entry)

    store = EpochStore(all_epochs)
    write_store(store, args.out)
    mean_h, std_h = (duration_stats(durations) if durations else (0.0, 0.0))
    report = {
        "files": per_file,
        "total_epochs": len(store),
        "class_counts": class_counts(store),
        "duration_hours": {"mean": mean_h, "std": std_h, "n": len(durations)},
        "rejected_files": [e["file"] for e in per_file if "error" in e],
    }
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(Path(args.out).parent, "ingest", None, None,
                    files + ([Path(args.meta)] if args.meta else []))
    _print(f"ingested {len(store)} epochs from {len(files)} files -> {args.out}")
    if report["rejected_files"]:
        _print(f"rejected: {', '.join(report['rejected_files'])}")
    return 0


def cmd_synth(args) -> int:
    column = None
    if args.informative_channel is not None:
        from .evaluation import channel_index
        column = channel_index(args.informative_channel)
    store = synth_generate(args.n_per_class, args.seed, n_patients=args.patients,
                           informative_channel=column)
    write_store(store, args.out)
    meta_path = args.meta or str(Path(args.out).with_suffix(".meta.jsonl"))
    write_subject_meta(synth_subjects(args.patients), meta_path)
    _write_manifest(Path(args.out).parent, "synth",
                    {"n_per_class": args.n_per_class, "patients": args.patients,
                     "informative_channel": args.informative_channel},
                    args.seed, [])
    _print(f"wrote {len(store)} epochs -> {args.out} (metadata: {meta_path})")
    return 0


def cmd_split(args) -> int:
    store = read_store(args.store)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise UserError(f"--fractions needs three comma-separated values, got {args.fractions!r}")
    spec = SplitSpec(fractions=fractions, seed=args.seed)
    assignment = patient_split(store.patients(), spec)
    write_split(assignment, args.out)
    sizes = split_sizes(assignment)
    _write_manifest(Path(args.out).parent, "split",
                    {"fractions": list(fractions)}, args.seed, [Path(args.store)])
    _print(f"split {len(assignment)} patients -> train {sizes[0]}, "
           f"val {sizes[1]}, test {sizes[2]} -> {args.out}")
    return 0


def _train_command(args, resume_from: Path | None) -> int:
    config = _load_config(args)
    run_dir = _resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = replace(config, checkpoint_dir=str(run_dir / "checkpoints"))
    store = _load_store(args.store, args.split_file)

    config.to_json(run_dir / "run_config.json")
    inputs = [Path(args.store)]
    if args.split_file:
        inputs.append(Path(args.split_file))
    if args.config:
        inputs.append(Path(args.config))
    if resume_from is not None:
        inputs.append(resume_from)
    _write_manifest(run_dir, "resume" if resume_from else "train",
                    config.to_dict(), config.seed, inputs)

    def progress(record):
        _print(f"iter {record['iteration']}: loss {record['train_loss']:.4f} "
               f"val acc {percent(record['val_accuracy'])}% "
               f"val wF1 {percent(record['val_weighted_f1'])}%")

    log_path = run_dir / "train_log.jsonl"
    if resume_from is None:
        log = train_run(config, store, log_path=log_path, progress=progress)
    else:
        log = train_resume(resume_from, config, store,
                           log_path=log_path, progress=progress)
    log.to_jsonl(log_path)
    _print(f"run dir: {run_dir}")
    if log.best_iteration is not None:
        _print(f"best {config.metric_for_checkpoint} {log.best_metric:.4f} "
               f"at iteration {log.best_iteration} ({log.best_path})")
    return 0


def cmd_train(args) -> int:
    return _train_command(args, None)


def cmd_resume(args) -> int:
    if not args.checkpoint and not args.from_run:
        raise UserError("resume needs --from-run or --checkpoint")
    checkpoint = Path(args.checkpoint) if args.checkpoint else \
        Path(args.from_run) / "checkpoints" / LAST_CHECKPOINT
    if args.config is None and args.from_run:
        implied = Path(args.from_run) / "run_config.json"
        if implied.exists():
            args.config = str(implied)
    return _train_command(args, checkpoint)


def cmd_eval(args) -> int:
    model_config, params, _, _ = _reload_with_config(args.checkpoint)
    store = _load_store(args.store, args.split_file)
    metas = _sidecar_meta(args)
    report = evaluate(params, model_config, store, args.split, metas_by_patient=metas)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "report.json")
    _write_summary_tsv(report, out_dir / "report.tsv")
    inputs = [Path(args.checkpoint), Path(args.store)]
    if args.split_file:
        inputs.append(Path(args.split_file))
    if args.meta:
        inputs.append(Path(args.meta))
    _write_manifest(out_dir, "eval", {"split": args.split}, None, inputs)
    _print(f"split {args.split or 'all'}: accuracy {percent(report.accuracy)}% "
           f"macro F1 {percent(report.macro_f1)}% "
           f"weighted F1 {percent(report.weighted_f1)}% "
           f"kappa {percent(report.kappa)}%")
    _print(f"report: {out_dir / 'report.json'}")
    return 0


def _reload_with_config(checkpoint_path):
    from .checkpoint import read_checkpoint
    from .model import ModelConfig
    config_dict, _, _ = read_checkpoint(checkpoint_path)
    config = ModelConfig.from_dict(config_dict)
    _, params, extra, state = load_params(checkpoint_path, expect_config=config)
    return config, params, extra, state


def _write_summary_tsv(report, path) -> None:
    """Headline metrics plus per-stage rows, tab-delimited percentages."""
    lines = ["metric\tvalue"]
    lines.append(f"accuracy\t{percent(report.accuracy)}")
    lines.append(f"macro_f1\t{percent(report.macro_f1)}")
    lines.append(f"weighted_f1\t{percent(report.weighted_f1)}")
    lines.append(f"kappa\t{percent(report.kappa)}")
    lines.append(f"total_epochs\t{report.total}")
    lines.append("")
    lines.append("stage\tprecision\trecall\tf1\tsupport")
    for k, stage in enumerate(STAGE_NAMES):
        lines.append(
            f"{stage}\t{percent(float(report.precision[k]))}"
            f"\t{percent(float(report.recall[k]))}"
            f"\t{percent(float(report.f1[k]))}\t{int(report.support[k])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_ablate(args) -> int:
    config = _load_config(args)
    run_dir = _resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = replace(config, checkpoint_dir=str(run_dir / "checkpoints"))
    store = _load_store(args.store, args.split_file)
    channels = args.channels.split(",") if args.channels else None

    def progress(record):
        _print(f"  iter {record['iteration']}: val acc {percent(record['val_accuracy'])}%")

    rows = channel_ablation(config, store, channels=channels,
                            eval_split=args.split, progress=progress)
    csv_path = run_dir / "ablation.csv"
    write_ablation_csv(rows, csv_path)
    inputs = [Path(args.store)] + \
        ([Path(args.split_file)] if args.split_file else []) + \
        ([Path(args.config)] if args.config else [])
    _write_manifest(run_dir, "ablate", config.to_dict(), config.seed, inputs)
    for row in rows:
        _print(f"{row['channel']}: overall {row['overall']}%")
    _print(f"table: {csv_path}")
    return 0


def cmd_predict(args) -> int:
    model_config, params, _, _ = _reload_with_config(args.checkpoint)
    store = _load_store(args.store, args.split_file)
    epochs = store.epochs_for_split(args.split)
    preds, truth = _predict_split(params, model_config, store, args.split)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("patient_key,epoch_index,true_stage,predicted_stage\n")
        for epoch, t, p in zip(epochs, truth, preds):
            fh.write(f"{epoch.patient_key},{epoch.epoch_index},"
                     f"{STAGE_NAMES[t]},{STAGE_NAMES[p]}\n")
    _print(f"wrote {len(epochs)} predictions -> {args.out}")
    return 0


def cmd_export_features(args) -> int:
    model_config, params, _, _ = _reload_with_config(args.checkpoint)
    store = _load_store(args.store, args.split_file)
    features, _ = export_features(params, model_config, store, args.split,
                                  args.out, subsample=args.subsample, seed=args.seed)
    _print(f"wrote {features.shape[0]} x {features.shape[1] + 1} feature rows -> {args.out}")
    return 0


def cmd_export_hypnogram(args) -> int:
    model_config, params, _, _ = _reload_with_config(args.checkpoint)
    store = read_store(args.store)
    epochs = sorted(store.epochs_for_patient(args.patient), key=lambda e: e.epoch_index)
    if not epochs:
        raise DataError(f"no epochs for patient {args.patient!r} in {args.store}")
    night = EpochStore(epochs)
    preds, truth = _predict_split(params, model_config, night, None)
    indices = [e.epoch_index for e in epochs]
    export_hypnogram(preds, truth, args.out, epoch_indices=indices)
    message = f"wrote hypnogram for {args.patient} ({len(epochs)} epochs) -> {args.out}"
    if args.figure:
        from .figures import save_hypnogram_figure
        save_hypnogram_figure(truth, preds, args.figure,
                              title=f"Hypnogram {args.patient}")
        message += f" (+ {args.figure})"
    _print(message)
    return 0


def cmd_report(args) -> int:
    from .figures import (
        save_age_accuracy_figure,
        save_confusion_figure,
        save_hypnogram_figure,
        save_stage_metric_figure,
    )
    try:
        report = json.loads(Path(args.eval_report).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.eval_report} is not valid JSON: {exc}") from exc
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    summary = out_dir / "summary.tsv"
    lines = ["metric\tvalue"]
    for key in ("accuracy", "macro_f1", "weighted_f1", "kappa"):
        lines.append(f"{key}\t{report['percent'][key]}")
    lines.append(f"total_epochs\t{report['total']}")
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)

    written.append(save_confusion_figure(np.array(report["matrix"]),
                                         out_dir / "confusion.png"))
    written.append(save_stage_metric_figure(report["per_class"],
                                            out_dir / "stage_metrics.png"))
    age_strata = report.get("strata", {}).get("age")
    if age_strata:
        written.append(save_age_accuracy_figure(age_strata,
                                                out_dir / "age_accuracy.png"))
    if args.hypnogram:
        _, truth, preds = read_hypnogram(args.hypnogram)
        written.append(save_hypnogram_figure(truth, preds, out_dir / "hypnogram.png"))
    _write_manifest(out_dir, "report", None, None,
                    [Path(args.eval_report)] +
                    ([Path(args.hypnogram)] if args.hypnogram else []))
    for path in written:
        _print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="somnoscore",
        description="Sleep-stage scoring from seven-channel EEG.",
    )
    parser.add_argument("--version", action="version", version=f"somnoscore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="EDF directory -> epoch container")
    p.add_argument("--edf-dir", required=True)
    p.add_argument("--meta", help="subject metadata sidecar (JSON lines)")
    p.add_argument("--out", required=True, help="epoch container path (.ssep)")
    p.add_argument("--report", help="ingest report JSON (default: <out>.report.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic epoch container")
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--informative-channel", metavar="CHANNEL",
                   help="plant the class rhythm on one montage channel only")
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="metadata sidecar path (default: <out>.meta.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="assign patients to train/val/test")
    p.add_argument("--store", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.70,0.10,0.20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    def add_run_args(p, needs_run_dir=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a run config key (repeatable; model.* reaches "
                            "the architecture)")
        p.add_argument("--store", required=True)
        p.add_argument("--split-file", required=True)
        if needs_run_dir:
            p.add_argument("--run-dir", required=True)

    p = sub.add_parser("train", help="train from scratch")
    add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue a run from its last checkpoint")
    add_run_args(p)
    p.add_argument("--from-run", help="previous run directory (for checkpoint + config)")
    p.add_argument("--checkpoint", help="explicit last.ssck path")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--split-file")
    p.add_argument("--split", choices=("train", "val", "test"),
                   help="omit to score every epoch in the container")
    p.add_argument("--meta", help="subject metadata sidecar for strata")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="single-channel models, one per channel")
    add_run_args(p)
    p.add_argument("--channels", help=f"comma list from: {', '.join(MONTAGE)}")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="per-epoch predictions CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--split-file")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-features", help="penultimate features CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--split-file")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--subsample", type=int, help="keep a seeded random subset of rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("export-hypnogram", help="one study's stage trace CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also render the trace to this image path")
    p.set_defaults(func=cmd_export_hypnogram)

    p = sub.add_parser("report", help="figures + summary table from eval artifacts")
    p.add_argument("--eval-report", required=True, help="report.json from eval")
    p.add_argument("--hypnogram", help="hypnogram CSV to render alongside")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return 2
    except (InternalError, AssertionError) as exc:
        sys.stderr.write(f"internal error: {exc}\n")
        return 3
    except SomnoscoreError as exc:  # pragma: no cover - base-class safety net
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
