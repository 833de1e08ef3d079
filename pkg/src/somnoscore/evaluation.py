"""Scoring trained models: reports, single-channel ablation, exports.

The ablation harness retrains the exact architecture once per montage
channel with the input narrowed to that channel (patch width drops
from 896 to 128); it reuses the ordinary training loop rather than a
parallel code path, so results differ only by the channel count.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MissingMeta, UnknownChannel
from .ingest import MONTAGE, STAGE_NAMES, SubjectMeta, normalize_channel_label
from .metrics import EvalReport, build_report, percent, stratified_eval
from .model import ModelConfig, forward, load_params, single_channel_config
from .prng import SplitMix64
from .store import EpochStore
from .training import BEST_CHECKPOINT, RunConfig, evaluate_split, train

ABLATION_FIELDS = ("channel", "W", "N1", "N2", "N3", "REM", "overall")


def channel_index(name: str) -> int:
    normalized = normalize_channel_label(name)
    try:
        return MONTAGE.index(normalized)
    except ValueError:
        raise UnknownChannel(
            f"{name!r} is not one of the montage channels {', '.join(MONTAGE)}"
        ) from None


def metas_for_split(store: EpochStore, split: str | None,
                    metas_by_patient: dict[str, SubjectMeta]) -> list[SubjectMeta]:
    out = []
    for epoch in store.epochs_for_split(split):
        meta = metas_by_patient.get(epoch.patient_key)
        if meta is None:
            raise MissingMeta(f"no subject metadata for patient {epoch.patient_key!r}")
        out.append(meta)
    return out


def evaluate(params, model_config: ModelConfig, store: EpochStore, split: str | None,
             metas_by_patient: dict[str, SubjectMeta] | None = None,
             batch_size: int = 256, column: int | None = None) -> EvalReport:
    """Predict one split and score it, with strata when metadata is given."""
    preds, truth = evaluate_split(params, model_config, store, split,
                                  batch_size=batch_size, column=column)
    if metas_by_patient is None:
        return build_report(preds, truth)
    return stratified_eval(preds, truth, metas_for_split(store, split, metas_by_patient))


# ---------------------------------------------------------------------------
# single-channel ablation


def ablation_row(channel: str, report: EvalReport) -> dict:
    """Per-stage accuracy (recall) plus overall, as display percentages."""
    row = {"channel": MONTAGE[channel_index(channel)]}
    for k, stage in enumerate(STAGE_NAMES):
        row[stage] = percent(float(report.recall[k]))
    row["overall"] = percent(report.accuracy)
    return row


def channel_ablation(base_config: RunConfig, store: EpochStore,
                     channels=None, eval_split: str = "test",
                     progress=None) -> list[dict]:
    """Train and score one single-channel model per requested channel.

    ``base_config.checkpoint_dir`` gains one ``ablate-<channel>``
    subdirectory per run. Returns one row per channel in montage order.
    """
    if channels is None:
        channels = list(MONTAGE)
    rows = []
    for name in channels:
        idx = channel_index(name)
        canonical = MONTAGE[idx]
        config = replace(
            base_config,
            model=single_channel_config(base_config.model),
            checkpoint_dir=str(Path(base_config.checkpoint_dir) / f"ablate-{canonical}"),
        )
        train(config, store, column=idx, progress=progress)
        _, params, _, _ = load_params(
            Path(config.checkpoint_dir) / BEST_CHECKPOINT, expect_config=config.model)
        report = evaluate(params, config.model, store, eval_split, column=idx)
        rows.append(ablation_row(canonical, report))
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"channel": row["channel"],
             **{k: float(row[k]) for k in ABLATION_FIELDS[1:]}}
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# hypnogram export (per-study stage traces)


def export_hypnogram(preds, truth, path, epoch_indices=None) -> None:
    """Two-track CSV: epoch_index, true_stage, predicted_stage.

    Stages are written by name; the display order of the stage axis is
    W, N1, N2, N3, REM top to bottom.
    """
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise LengthMismatch(f"preds {preds.shape} vs truth {truth.shape}")
    if epoch_indices is None:
        epoch_indices = np.arange(preds.size)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch_index", "true_stage", "predicted_stage"])
        for idx, t, p in zip(epoch_indices, truth, preds):
            writer.writerow([int(idx), STAGE_NAMES[t], STAGE_NAMES[p]])


def read_hypnogram(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_hypnogram` -> (indices, truth, preds)."""
    indices, truth, preds = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            indices.append(int(row["epoch_index"]))
            truth.append(STAGE_NAMES.index(row["true_stage"]))
            preds.append(STAGE_NAMES.index(row["predicted_stage"]))
    return (np.array(indices, dtype=np.int64),
            np.array(truth, dtype=np.int64),
            np.array(preds, dtype=np.int64))


# ---------------------------------------------------------------------------
# penultimate-feature export


def compute_features(params, model_config: ModelConfig, store: EpochStore,
                     split: str | None, batch_size: int = 256,
                     column: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Penultimate-layer representation of every epoch -> (features, labels)."""
    epochs = store.epochs_for_split(split)
    labels = np.array([e.label for e in epochs], dtype=np.int64)
    chunks = []
    for start in range(0, len(epochs), batch_size):
        part = epochs[start:start + batch_size]
        inputs = np.stack([e.samples for e in part]).astype(np.float32)
        if column is not None:
            inputs = inputs[:, :, column:column + 1]
        _, features = forward(params, model_config, inputs)
        chunks.append(features.data)
    return np.concatenate(chunks, axis=0), labels


def export_features(params, model_config: ModelConfig, store: EpochStore,
                    split: str | None, path, subsample: int | None = None,
                    seed: int = 0, batch_size: int = 256,
                    column: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Write a features+label CSV; optionally a seeded random subset of rows.

    The file has one row per (kept) epoch and width feature_dim + 1;
    the trailing column is the integer stage label.
    """
    features, labels = compute_features(params, model_config, store, split,
                                        batch_size=batch_size, column=column)
    if subsample is not None and subsample < labels.size:
        order = list(range(labels.size))
        SplitMix64(seed).shuffle(order)
        keep = sorted(order[:subsample])
        features, labels = features[keep], labels[keep]
    width = features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(width)] + ["label"])
        for row, label in zip(features, labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return features, labels
