"""Turn raw polysomnography recordings into labeled 30-second epochs.

The pipeline is: pick the seven frontal/occipital/central referential
EEG channels in a fixed order, bring every trace to 128 Hz, then cut
one epoch per scored 30-second window. Each epoch is a 3840 x 7 matrix
(time down the rows, channels across the columns, in montage order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .edf import Channel, EdfAnnotation, Recording
from .errors import DataError, EmptySignal, MissingChannel
from .resample import resample

#: Channel order used everywhere downstream; column j of an epoch is MONTAGE[j].
MONTAGE = ("F4-M1", "O2-M1", "C4-M1", "O1-M2", "F3-M2", "C3-M2", "CZ-O1")

TARGET_RATE_HZ = 128
EPOCH_SECONDS = 30
SAMPLES_PER_EPOCH = TARGET_RATE_HZ * EPOCH_SECONDS  # 3840

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")

#: Scoring vocabulary. Any other annotation text leaves its window unscored.
STAGE_TEXT_TO_LABEL = {
    "Sleep stage W": 0,
    "Sleep stage N1": 1,
    "Sleep stage N2": 2,
    "Sleep stage N3": 3,
    "Sleep stage R": 4,
}

#: Tolerance for snapping a stage onset to the 30 s grid.
SNAP_TOLERANCE_S = 0.5


class Race(Enum):
    WHITE = "White"
    BLACK = "Black"
    MULTIPLE_RACES = "MultipleRaces"
    ASIAN = "Asian"
    OTHERS_UNKNOWN = "OthersUnknown"


class Sex(Enum):
    MALE = "Male"
    FEMALE_OR_UNKNOWN = "FemaleOrUnknown"


@dataclass(frozen=True)
class SubjectMeta:
    patient_key: str
    age_years: float
    race: Race = Race.OTHERS_UNKNOWN
    sex: Sex = Sex.FEMALE_OR_UNKNOWN

    def __post_init__(self):
        if not self.patient_key:
            raise ValueError("patient_key must be non-empty")
        if self.age_years < 0:
            raise ValueError(f"age_years {self.age_years} is negative")


@dataclass
class SleepEpoch:
    samples: np.ndarray  # (3840, 7) float
    label: int  # 0=W 1=N1 2=N2 3=N3 4=REM
    patient_key: str
    epoch_index: int


@dataclass
class IngestStats:
    """Bookkeeping from one night of segmentation."""
    epochs_emitted: int = 0
    skipped_unscored: int = 0       # annotation text outside the stage vocabulary
    snapped_onsets: int = 0         # onsets nudged onto the 30 s grid
    rejected_unaligned: int = 0     # onsets/durations too far off-grid to trust
    dropped_partial: int = 0        # windows running past the end of the signal
    skipped_texts: dict = field(default_factory=dict)

    def merged(self, other: "IngestStats") -> "IngestStats":
        texts = dict(self.skipped_texts)
        for k, v in other.skipped_texts.items():
            texts[k] = texts.get(k, 0) + v
        return IngestStats(
            self.epochs_emitted + other.epochs_emitted,
            self.skipped_unscored + other.skipped_unscored,
            self.snapped_onsets + other.snapped_onsets,
            self.rejected_unaligned + other.rejected_unaligned,
            self.dropped_partial + other.dropped_partial,
            texts,
        )


def normalize_channel_label(label: str) -> str:
    """Canonical channel name: drop an "EEG " prefix, uppercase, fix CZ-01/CZ-O1."""
    name = label.strip()
    if name.upper().startswith("EEG "):
        name = name[4:].strip()
    name = name.upper()
    if name == "CZ-01":
        name = "CZ-O1"
    return name


def select_channels(rec: Recording, montage=MONTAGE) -> Recording:
    """Keep exactly the montage channels, reordered to match it."""
    by_name: dict[str, Channel] = {}
    for ch in rec.channels:
        by_name.setdefault(normalize_channel_label(ch.header.label), ch)
    missing = [name for name in montage if normalize_channel_label(name) not in by_name]
    if missing:
        raise MissingChannel(missing)
    picked = [by_name[normalize_channel_label(name)] for name in montage]
    return Recording(header=rec.header, channels=picked,
                     annotations=rec.annotations, subject=rec.subject)


def resample_channels(rec: Recording, target_hz: float = TARGET_RATE_HZ) -> Recording:
    channels = []
    for ch in rec.channels:
        samples = resample(ch.samples, ch.sampling_rate_hz, target_hz)
        channels.append(Channel(ch.header, samples, target_hz))
    return Recording(header=rec.header, channels=channels,
                     annotations=rec.annotations, subject=rec.subject)


def _snap_to_grid(value: float, step: float) -> tuple[float, bool] | None:
    """Nearest grid multiple if within tolerance, else None. Flags a nudge."""
    snapped = round(value / step) * step
    error = abs(value - snapped)
    if error > SNAP_TOLERANCE_S:
        return None
    return snapped, error > 1e-9


def segment_epochs(
    rec: Recording,
    stage_annotations: list[EdfAnnotation] | None = None,
    patient_key: str | None = None,
) -> tuple[list[SleepEpoch], IngestStats]:
    """Cut scored 30 s windows out of a seven-channel 128 Hz recording.

    Stage onsets are snapped to the 30 s grid when within half a second;
    anything further off (or with a duration that is not a multiple of
    30 s) is rejected and counted rather than guessed at. Windows whose
    samples run past the end of the shortest channel are dropped.
    """
    if stage_annotations is None:
        stage_annotations = rec.annotations
    if len(rec.channels) != len(MONTAGE):
        have = {normalize_channel_label(ch.header.label) for ch in rec.channels}
        raise MissingChannel([name for name in MONTAGE if name not in have])
    for ch in rec.channels:
        if ch.sampling_rate_hz != TARGET_RATE_HZ:
            raise EmptySignal(
                f"channel {ch.header.label!r} is at {ch.sampling_rate_hz} Hz, "
                f"expected {TARGET_RATE_HZ}"
            )
    if patient_key is None:
        patient_key = rec.subject.patient_key if rec.subject else rec.header.patient_id

    n_samples = min(ch.samples.size for ch in rec.channels)
    matrix = np.stack([ch.samples[:n_samples] for ch in rec.channels], axis=1)

    stats = IngestStats()
    epochs: list[SleepEpoch] = []
    seen_windows: set[int] = set()
    for ann in stage_annotations:
        label = STAGE_TEXT_TO_LABEL.get(ann.text)
        if label is None:
            if ann.text.startswith("Sleep stage"):
                stats.skipped_unscored += 1
                stats.skipped_texts[ann.text] = stats.skipped_texts.get(ann.text, 0) + 1
            continue
        snap = _snap_to_grid(ann.onset_s, EPOCH_SECONDS)
        if snap is None:
            stats.rejected_unaligned += 1
            continue
        onset, nudged = snap
        if nudged:
            stats.snapped_onsets += 1
        duration = ann.duration_s if ann.duration_s is not None else float(EPOCH_SECONDS)
        n_windows = round(duration / EPOCH_SECONDS)
        if n_windows < 1 or abs(duration - n_windows * EPOCH_SECONDS) > SNAP_TOLERANCE_S:
            stats.rejected_unaligned += 1
            continue
        for w in range(n_windows):
            epoch_index = int(onset) // EPOCH_SECONDS + w
            if epoch_index < 0 or epoch_index in seen_windows:
                continue
            start = epoch_index * SAMPLES_PER_EPOCH
            if start + SAMPLES_PER_EPOCH > n_samples:
                stats.dropped_partial += 1
                continue
            seen_windows.add(epoch_index)
            epochs.append(SleepEpoch(
                samples=matrix[start:start + SAMPLES_PER_EPOCH],
                label=label,
                patient_key=patient_key,
                epoch_index=epoch_index,
            ))
    epochs.sort(key=lambda e: e.epoch_index)
    stats.epochs_emitted = len(epochs)
    return epochs, stats


def ingest_recording(
    rec: Recording,
    patient_key: str | None = None,
) -> tuple[list[SleepEpoch], IngestStats]:
    """select_channels -> resample to 128 Hz -> segment, in one call."""
    picked = select_channels(rec)
    leveled = resample_channels(picked)
    return segment_epochs(leveled, patient_key=patient_key)


# ---------------------------------------------------------------------------
# subject metadata sidecar (JSON lines, one object per patient)


def write_subject_meta(metas, path) -> None:
    lines = []
    for m in metas:
        lines.append(json.dumps({
            "patient_key": m.patient_key,
            "age_years": m.age_years,
            "race": m.race.value,
            "sex": m.sex.value,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_subject_meta(path) -> dict[str, SubjectMeta]:
    metas: dict[str, SubjectMeta] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            meta = SubjectMeta(
                patient_key=obj["patient_key"],
                age_years=float(obj["age_years"]),
                race=Race(obj["race"]),
                sex=Sex(obj["sex"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad subject record: {exc}") from exc
        metas[meta.patient_key] = meta
    return metas


def recording_duration_hours(rec: Recording) -> float:
    return rec.duration_s() / 3600.0


def duration_stats(durations_hours) -> tuple[float, float]:
    """Mean and population standard deviation of study lengths, in hours."""
    arr = np.asarray(list(durations_hours), dtype=np.float64)
    if arr.size == 0:
        raise EmptySignal("no recordings to summarize")
    return float(arr.mean()), float(arr.std())
