"""Confusion-matrix scoring for five-stage sleep classification.

Counts are exact integers (rows = true stage, columns = predicted);
every derived number — precision, recall, F1, macro/weighted F1,
accuracy, Cohen's kappa — comes from that matrix alone. Division by
an empty class follows the 0/0 -> 0 convention and the affected
stage/metric pairs are flagged in the report rather than silently
zeroed. Percentages for display round half-even to one decimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadLabel, EmptyMatrix, LengthMismatch, MissingMeta
from .ingest import STAGE_NAMES, SubjectMeta

N_STAGES = len(STAGE_NAMES)


def confusion(preds, truth) -> np.ndarray:
    """Exact 5x5 count matrix; cm[i, j] = #(true i, predicted j)."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise LengthMismatch(f"preds {preds.shape} vs truth {truth.shape}")
    for name, arr in (("preds", preds), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= N_STAGES):
            raise BadLabel(f"{name} contain labels outside 0..{N_STAGES - 1}")
    cm = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def row_normalized(cm: np.ndarray) -> np.ndarray:
    """Each row as percentages summing to 100 (display form). 0-rows stay 0."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm * 100.0, rows, out=np.zeros_like(cm), where=rows > 0)


def percent(x: float) -> float:
    """Half-even one-decimal percentage, the form used in printed tables."""
    return round(100.0 * x, 1)


@dataclass
class EvalReport:
    matrix: np.ndarray                 # (5, 5) int64
    precision: np.ndarray              # (5,) float64
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray                # (5,) int64, true-label counts
    accuracy: float
    macro_f1: float
    weighted_f1: float
    kappa: float
    total: int
    zero_division_flags: list[str] = field(default_factory=list)
    strata: dict = field(default_factory=dict)  # {"age"|"race"|"sex": {key: core dict}}

    def core_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "per_class": {
                STAGE_NAMES[k]: {
                    "precision": float(self.precision[k]),
                    "recall": float(self.recall[k]),
                    "f1": float(self.f1[k]),
                    "support": int(self.support[k]),
                }
                for k in range(N_STAGES)
            },
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "kappa": self.kappa,
            "total": self.total,
            "zero_division_flags": list(self.zero_division_flags),
            "percent": {
                "accuracy": percent(self.accuracy),
                "macro_f1": percent(self.macro_f1),
                "weighted_f1": percent(self.weighted_f1),
                "kappa": percent(self.kappa),
            },
        }

    def to_dict(self) -> dict:
        out = self.core_dict()
        out["strata"] = self.strata
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def metrics_from_confusion(cm: np.ndarray) -> EvalReport:
    """Every report-level number derived from one count matrix."""
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (N_STAGES, N_STAGES):
        raise LengthMismatch(f"confusion matrix has shape {cm.shape}")
    if (cm < 0).any():
        raise BadLabel("confusion matrix contains negative counts")
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix is all zeros")

    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)            # true-label counts
    predicted = cm.sum(axis=0)

    flags: list[str] = []
    precision = np.zeros(N_STAGES)
    recall = np.zeros(N_STAGES)
    for k in range(N_STAGES):
        if predicted[k] == 0:
            flags.append(f"precision/{STAGE_NAMES[k]}")
        else:
            precision[k] = tp[k] / predicted[k]
        if support[k] == 0:
            flags.append(f"recall/{STAGE_NAMES[k]}")
        else:
            recall[k] = tp[k] / support[k]
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros(N_STAGES), where=pr > 0)

    accuracy = float(tp.sum() / total)
    macro_f1 = float(f1.mean())
    weighted_f1 = float((f1 * support).sum() / total)
    p_o = accuracy
    p_e = float((support * predicted).sum()) / (total * total)
    if 1.0 - p_e == 0.0:
        # only reachable when all mass sits in one diagonal cell
        kappa = 1.0 if cm.sum() == np.trace(cm) else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)

    return EvalReport(
        matrix=cm, precision=precision, recall=recall, f1=f1,
        support=support.astype(np.int64), accuracy=accuracy, macro_f1=macro_f1,
        weighted_f1=weighted_f1, kappa=float(kappa), total=total,
        zero_division_flags=flags,
    )


def build_report(preds, truth) -> EvalReport:
    return metrics_from_confusion(confusion(preds, truth))


# ---------------------------------------------------------------------------
# demographic strata


def age_bucket(age_years: float) -> str:
    """One-year bins 0-1 .. 17-18, then a single 18-100 adult bucket."""
    if age_years < 0:
        raise MissingMeta(f"negative age {age_years}")
    if age_years >= 18:
        return "18-100"
    lo = int(age_years)
    return f"{lo}-{lo + 1}"


def stratified_eval(preds, truth, metas) -> EvalReport:
    """Global report plus per-age-bucket / race / sex sub-reports.

    ``metas`` carries one :class:`SubjectMeta` per epoch, aligned with
    ``preds``/``truth``. A patient seen at several ages lands in each
    age bucket they were recorded at.
    """
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    metas = list(metas)
    if len(metas) != preds.size:
        raise LengthMismatch(f"{len(metas)} metadata entries for {preds.size} epochs")
    for i, meta in enumerate(metas):
        if not isinstance(meta, SubjectMeta):
            raise MissingMeta(f"epoch {i} lacks subject metadata")

    report = build_report(preds, truth)
    keys = {
        "age": np.array([age_bucket(m.age_years) for m in metas]),
        "race": np.array([m.race.value for m in metas]),
        "sex": np.array([m.sex.value for m in metas]),
    }
    for axis, values in keys.items():
        buckets: dict[str, dict] = {}
        for value in sorted(set(values.tolist())):
            mask = values == value
            buckets[value] = build_report(preds[mask], truth[mask]).core_dict()
        report.strata[axis] = buckets
    return report
