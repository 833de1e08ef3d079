"""Pediatric sleep-stage scoring from seven-channel EEG.

The pipeline turns EDF polysomnography into labeled 30-second epochs,
trains a patch-based transformer with a from-scratch reverse-mode
autodiff core, and scores predictions with confusion-matrix metrics,
Cohen's kappa, and demographic strata. Everything is seeded and
single-threaded-deterministic; see the README for the CLI walkthrough.
"""

__version__ = "0.1.0"

from .edf import EdfAnnotation, EdfHeader, Recording, SignalHeader, parse_edf, write_edf
from .errors import SomnoscoreError
from .ingest import (
    MONTAGE,
    STAGE_NAMES,
    Race,
    Sex,
    SleepEpoch,
    SubjectMeta,
    segment_epochs,
    select_channels,
)
from .metrics import EvalReport, build_report, confusion, metrics_from_confusion
from .model import ModelConfig, forward, init_params, param_count
from .resample import resample
from .store import EpochStore, SplitSpec, class_counts, make_batches, patient_split
from .synth import synth_generate
from .training import LossWeights, RunConfig, TrainLog, resume, train, weighted_cross_entropy

__all__ = [
    "EdfAnnotation", "EdfHeader", "Recording", "SignalHeader", "parse_edf", "write_edf",
    "SomnoscoreError",
    "MONTAGE", "STAGE_NAMES", "Race", "Sex", "SleepEpoch", "SubjectMeta",
    "segment_epochs", "select_channels",
    "EvalReport", "build_report", "confusion", "metrics_from_confusion",
    "ModelConfig", "forward", "init_params", "param_count",
    "resample",
    "EpochStore", "SplitSpec", "class_counts", "make_batches", "patient_split",
    "synth_generate",
    "LossWeights", "RunConfig", "TrainLog", "resume", "train", "weighted_cross_entropy",
    "__version__",
]
