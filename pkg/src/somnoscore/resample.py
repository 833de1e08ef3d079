"""Polyphase sample-rate conversion for EEG traces.

A rate change from ``rate_from`` to ``rate_to`` is reduced to the
coprime ratio up/down. The signal is upsampled by zero stuffing,
filtered by a windowed-sinc low-pass, and decimated; the filter is a
Kaiser window (beta 8.6, about 90 dB stopband) with 64 taps per
polyphase phase and cutoff at the tighter of the two Nyquist limits.
The polyphase convolution itself is delegated to
``scipy.signal.resample_poly``, which compensates the filter's group
delay, so the output stays aligned with the input.

Equal input and output rates return an untouched copy, bit for bit.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.signal import firwin, resample_poly

from .errors import EmptySignal, UserError

_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


def _design(up: int, down: int) -> np.ndarray:
    half = (_TAPS_PER_PHASE // 2) * up
    return firwin(2 * half + 1, 1.0 / max(up, down), window=("kaiser", _KAISER_BETA))


def resample(x: np.ndarray, rate_from: float, rate_to: float) -> np.ndarray:
    """Resample a 1-D float array from ``rate_from`` Hz to ``rate_to`` Hz.

    The output has ``round(len(x) * rate_to / rate_from)`` samples.
    """
    if rate_from <= 0 or rate_to <= 0:
        raise UserError(f"sampling rates must be positive, got {rate_from} -> {rate_to}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UserError(f"expected a 1-D signal, got shape {x.shape}")
    if x.size == 0:
        raise EmptySignal("cannot resample an empty signal")
    if rate_from == rate_to:
        return x.copy()

    ratio = Fraction(rate_to / rate_from).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    out = resample_poly(x, up, down, window=_design(up, down))
    n_out = round(x.size * rate_to / rate_from)
    if out.size < n_out:
        out = np.concatenate([out, np.zeros(n_out - out.size)])
    return out[:n_out]
