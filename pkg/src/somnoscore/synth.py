"""Synthetic EEG epochs with stage-specific rhythms.

Real overnight recordings are access-gated, so end-to-end runs use
generated data built to be learnable but not trivial: every channel is
band-limited noise (0.5-35 Hz, unit RMS) plus a dominant rhythm chosen
by the stage label, mixed near 0 dB SNR.

    Wake  10 Hz alpha, amplitude varies widely epoch to epoch
    N1    6 Hz theta
    N2    13 Hz spindles gated into short bursts
    N3    1.5 Hz delta, high amplitude
    REM   a low-amplitude 4-8 Hz mixture; component frequencies keep
          clear of 6 Hz so N1 stays identifiable by its spectral peak

Each epoch's randomness is keyed by (seed, label, index), so the same
seed regenerates identical sample values regardless of how many epochs
are requested or in which order they are materialized.

``informative_channel`` plants the rhythm on a single montage channel
and leaves the rest pure noise; a model can then only learn from that
channel, which gives the channel-ablation harness a known answer.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .ingest import (
    MONTAGE,
    SAMPLES_PER_EPOCH,
    TARGET_RATE_HZ,
    Race,
    Sex,
    SleepEpoch,
    SubjectMeta,
)
from .store import EpochStore

_NOISE_BAND_HZ = (0.5, 35.0)
_N_CHANNELS = len(MONTAGE)


def _bandlimited_noise(rng: np.random.Generator, n_channels: int) -> np.ndarray:
    """Unit-RMS noise confined to the 0.5-35 Hz band, (3840, C)."""
    white = rng.standard_normal((SAMPLES_PER_EPOCH, n_channels))
    spectrum = np.fft.rfft(white, axis=0)
    freqs = np.fft.rfftfreq(SAMPLES_PER_EPOCH, d=1.0 / TARGET_RATE_HZ)
    keep = (freqs >= _NOISE_BAND_HZ[0]) & (freqs <= _NOISE_BAND_HZ[1])
    spectrum[~keep] = 0.0
    shaped = np.fft.irfft(spectrum, n=SAMPLES_PER_EPOCH, axis=0)
    return shaped / shaped.std(axis=0, keepdims=True)


def _burst_mask(rng: np.random.Generator) -> np.ndarray:
    """Spindle-style on/off gate: ~0.6 s bursts separated by ~1.2 s gaps."""
    mask = np.zeros(SAMPLES_PER_EPOCH)
    t = rng.uniform(0.0, 1.0)
    while t < 30.0:
        on = rng.uniform(0.4, 0.8)
        lo = int(t * TARGET_RATE_HZ)
        hi = min(int((t + on) * TARGET_RATE_HZ), SAMPLES_PER_EPOCH)
        mask[lo:hi] = 1.0
        t += on + rng.uniform(0.8, 1.6)
    return mask


def _stage_rhythm(label: int, rng: np.random.Generator) -> np.ndarray:
    """One epoch of the stage's dominant rhythm, roughly unit RMS."""
    t = np.arange(SAMPLES_PER_EPOCH) / TARGET_RATE_HZ
    root2 = np.sqrt(2.0)
    if label == 0:  # wake: alpha with large epoch-to-epoch variance
        amp = rng.uniform(0.6, 2.2)
        return amp * root2 * np.sin(2 * np.pi * 10.0 * t + rng.uniform(0, 2 * np.pi))
    if label == 1:  # N1: theta
        amp = rng.uniform(0.9, 1.1)
        return amp * root2 * np.sin(2 * np.pi * 6.0 * t + rng.uniform(0, 2 * np.pi))
    if label == 2:  # N2: bursty spindles, power matched to a continuous tone
        mask = _burst_mask(rng)
        duty = max(mask.mean(), 0.05)
        carrier = np.sin(2 * np.pi * 13.0 * t + rng.uniform(0, 2 * np.pi))
        return (root2 / np.sqrt(duty)) * mask * carrier
    if label == 3:  # N3: slow, high-amplitude delta
        amp = rng.uniform(1.5, 1.7)
        return amp * root2 * np.sin(2 * np.pi * 1.5 * t + rng.uniform(0, 2 * np.pi))
    if label == 4:  # REM: quiet 4-8 Hz mixture, avoiding the 6 Hz theta line
        total = np.zeros_like(t)
        n_parts = rng.integers(2, 4)
        for _ in range(n_parts):
            if rng.uniform() < 0.5:
                f = rng.uniform(4.0, 5.5)
            else:
                f = rng.uniform(6.5, 8.0)
            total += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        return 0.7 * root2 * total / np.sqrt(n_parts)
    raise DataError(f"stage label {label} out of range")


def synth_epoch(label: int, seed: int, index: int,
                informative_channel: int | None = None) -> np.ndarray:
    """Generate one (3840, 7) epoch for a stage; pure in (seed, label, index)."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, label, index])
    noise = _bandlimited_noise(rng, _N_CHANNELS)
    rhythm = _stage_rhythm(label, rng)
    if informative_channel is None:
        gains = rng.uniform(0.8, 1.2, size=_N_CHANNELS)
        signal = rhythm[:, None] * gains[None, :]
    else:
        if not 0 <= informative_channel < _N_CHANNELS:
            raise DataError(f"channel index {informative_channel} out of range")
        signal = np.zeros((SAMPLES_PER_EPOCH, _N_CHANNELS))
        signal[:, informative_channel] = rhythm
    return (noise + signal).astype(np.float32)


def synth_generate(n_per_class: int, seed: int, n_patients: int = 20,
                   informative_channel: int | None = None) -> EpochStore:
    """Balanced epochs for all five stages spread over synthetic patients."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    if n_patients < 20:
        raise DataError(f"need at least 20 synthetic patients, got {n_patients}")
    epochs = []
    position: dict[str, int] = {}
    for label in range(5):
        for i in range(n_per_class):
            patient = f"synth{(label * n_per_class + i) % n_patients:03d}"
            epoch_index = position.get(patient, 0)
            position[patient] = epoch_index + 1
            epochs.append(SleepEpoch(
                samples=synth_epoch(label, seed, i, informative_channel),
                label=label,
                patient_key=patient,
                epoch_index=epoch_index,
            ))
    return EpochStore(epochs)


def synth_subjects(n_patients: int = 20) -> list[SubjectMeta]:
    """Demographics for the synthetic cohort, spanning every report stratum."""
    races = list(Race)
    sexes = list(Sex)
    subjects = []
    for p in range(n_patients):
        age = round(0.5 + p * (19.0 / n_patients), 1)
        subjects.append(SubjectMeta(
            patient_key=f"synth{p:03d}",
            age_years=age,
            race=races[p % len(races)],
            sex=sexes[p % len(sexes)],
        ))
    return subjects
