"""Epoch storage, patient-level splits, and batch assembly.

Epochs live in a flat binary container (magic ``SSEP``) so a training
pass streams straight from disk-shaped memory instead of re-reading
EDF files. Splits are assigned per patient — never per epoch — so the
train/val/test sets share no subjects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyCohort, EmptySplit, MalformedHeader, TruncatedFile
from .ingest import SAMPLES_PER_EPOCH, MONTAGE, STAGE_NAMES, SleepEpoch, duration_stats  # noqa: F401
from .prng import SplitMix64, derive_seed

SPLIT_NAMES = ("train", "val", "test")

_MAGIC = b"SSEP"
_VERSION = 1
_EPOCH_FLOATS = SAMPLES_PER_EPOCH * len(MONTAGE)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions):
            raise DataError(f"split fractions must be positive, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError(f"split fractions sum to {sum(self.fractions)}, not 1")


@dataclass
class Batch:
    inputs: np.ndarray   # (B, 3840, 7) float32
    labels: np.ndarray   # (B,) int64
    weights: np.ndarray  # (B,) float32


class EpochStore:
    """Immutable collection of epochs with per-patient split assignment."""

    def __init__(self, epochs: list[SleepEpoch],
                 split_by_patient: dict[str, str] | None = None):
        self.epochs = list(epochs)
        self.split_by_patient = dict(split_by_patient or {})
        for split in self.split_by_patient.values():
            if split not in SPLIT_NAMES:
                raise DataError(f"unknown split name {split!r}")
        if self.split_by_patient:
            missing = {e.patient_key for e in self.epochs} - set(self.split_by_patient)
            if missing:
                raise DataError(
                    f"{len(missing)} patients have epochs but no split assignment "
                    f"(e.g. {sorted(missing)[0]!r})"
                )

    def __len__(self) -> int:
        return len(self.epochs)

    def patients(self) -> list[str]:
        return sorted({e.patient_key for e in self.epochs})

    def with_splits(self, split_by_patient: dict[str, str]) -> "EpochStore":
        return EpochStore(self.epochs, split_by_patient)

    def epochs_for_split(self, split: str | None) -> list[SleepEpoch]:
        if split is None:
            return self.epochs
        if split not in SPLIT_NAMES:
            raise DataError(f"unknown split name {split!r}")
        return [e for e in self.epochs if self.split_by_patient.get(e.patient_key) == split]

    def epochs_for_patient(self, patient_key: str) -> list[SleepEpoch]:
        return [e for e in self.epochs if e.patient_key == patient_key]


def patient_split(patients, spec: SplitSpec) -> dict[str, str]:
    """Deterministically assign each patient to train/val/test.

    Patients are sorted, deduplicated, shuffled with a seeded generator,
    then cut into contiguous runs sized by the largest-remainder rule
    (ties go to the earlier split, so train first).
    """
    unique = sorted(set(patients))
    if not unique:
        raise EmptyCohort("no patients to split")
    order = list(unique)
    SplitMix64(spec.seed).shuffle(order)

    n = len(order)
    quotas = [f * n for f in spec.fractions]
    sizes = [int(q) for q in quotas]
    remainders = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1

    assignment: dict[str, str] = {}
    cursor = 0
    for split, size in zip(SPLIT_NAMES, sizes):
        for key in order[cursor:cursor + size]:
            assignment[key] = split
        cursor += size
    return assignment


def split_sizes(assignment: dict[str, str]) -> tuple[int, int, int]:
    counts = {name: 0 for name in SPLIT_NAMES}
    for split in assignment.values():
        counts[split] += 1
    return counts["train"], counts["val"], counts["test"]


def class_counts(store: EpochStore, split: str | None = None) -> dict[str, int]:
    counts = dict.fromkeys(STAGE_NAMES, 0)
    for epoch in store.epochs_for_split(split):
        counts[STAGE_NAMES[epoch.label]] += 1
    return counts


def pass_order(n: int, seed: int, pass_index: int) -> list[int]:
    """Epoch visiting order for one pass; pure in (n, seed, pass_index)."""
    order = list(range(n))
    SplitMix64(derive_seed(seed, pass_index)).shuffle(order)
    return order


def make_batches(store: EpochStore, split: str | None, batch_size: int, seed: int,
                 drop_last: bool = False, pass_index: int = 0,
                 class_weights=None, dtype=np.float32):
    """Yield shuffled batches covering one split.

    The permutation is a pure function of (seed, pass_index): pass k of
    a run and pass k of a resumed run see identical batch order.
    ``class_weights`` maps label -> per-sample weight (defaults to 1).
    """
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    epochs = store.epochs_for_split(split)
    if not epochs:
        raise EmptySplit(f"split {split!r} holds no epochs")
    if class_weights is None:
        class_weights = np.ones(len(STAGE_NAMES), dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)

    order = pass_order(len(epochs), seed, pass_index)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            break
        inputs = np.stack([epochs[i].samples for i in chunk]).astype(dtype)
        labels = np.array([epochs[i].label for i in chunk], dtype=np.int64)
        yield Batch(inputs=inputs, labels=labels,
                    weights=class_weights[labels].astype(np.float32))


def batches_per_pass(n_epochs: int, batch_size: int, drop_last: bool) -> int:
    if drop_last:
        return n_epochs // batch_size
    return -(-n_epochs // batch_size)


# ---------------------------------------------------------------------------
# epoch container file (magic "SSEP")


def write_store(store: EpochStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HQ", _VERSION, len(store.epochs)))
        for epoch in store.epochs:
            key = epoch.patient_key.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<IB", epoch.epoch_index, epoch.label))
            samples = np.ascontiguousarray(epoch.samples, dtype="<f4")
            if samples.shape != (SAMPLES_PER_EPOCH, len(MONTAGE)):
                raise DataError(f"epoch has shape {samples.shape}, "
                                f"expected ({SAMPLES_PER_EPOCH}, {len(MONTAGE)})")
            fh.write(samples.tobytes())


def read_store(path) -> EpochStore:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"epoch container ends inside {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != _MAGIC:
        raise MalformedHeader("not an epoch container (bad magic)")
    version, count = struct.unpack("<HQ", take(10, "preamble"))
    if version != _VERSION:
        raise MalformedHeader(f"epoch container version {version} not supported")
    epochs: list[SleepEpoch] = []
    for _ in range(count):
        (key_len,) = struct.unpack("<H", take(2, "patient key length"))
        key = bytes(take(key_len, "patient key")).decode("utf-8")
        epoch_index, label = struct.unpack("<IB", take(5, "epoch record"))
        samples = np.frombuffer(take(4 * _EPOCH_FLOATS, "epoch samples"), dtype="<f4")
        epochs.append(SleepEpoch(
            samples=samples.reshape(SAMPLES_PER_EPOCH, len(MONTAGE)).copy(),
            label=int(label), patient_key=key, epoch_index=int(epoch_index),
        ))
    if pos != len(view):
        raise MalformedHeader(f"{len(view) - pos} trailing bytes after last epoch")
    return EpochStore(epochs)


# ---------------------------------------------------------------------------
# split assignment file (text; "patient_key<TAB>split" per line)


def write_split(assignment: dict[str, str], path) -> None:
    lines = [f"{key}\t{split}" for key, split in sorted(assignment.items())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_split(path) -> dict[str, str]:
    assignment: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            key, split = line.split("\t")
        except ValueError as exc:
            raise MalformedHeader(f"split file line {lineno} is not key<TAB>split") from exc
        if split not in SPLIT_NAMES:
            raise MalformedHeader(f"split file line {lineno}: unknown split {split!r}")
        assignment[key] = split
    return assignment
