"""Rate-conversion accuracy on known sinusoids, exact output lengths,
and the identity fast path."""

import numpy as np
import pytest

from somnoscore.errors import EmptySignal, UserError
from somnoscore.resample import resample


def sine(freq_hz, rate_hz, n, phase=0.3):
    t = np.arange(n) / rate_hz
    return np.sin(2 * np.pi * freq_hz * t + phase)


def interior(x, rate_hz, margin_s=0.25):
    k = int(round(margin_s * rate_hz))
    return x[k:-k]


def test_halving_a_sine_is_accurate():
    x = sine(10.0, 256.0, 2560)
    y = resample(x, 256, 128)
    assert y.shape == (1280,)
    want = sine(10.0, 128.0, 1280)
    err = np.abs(interior(y, 128) - interior(want, 128)).max()
    assert err < 0.01  # under 1% of unit amplitude away from the edges


def test_fractional_upsampling_length_and_accuracy():
    x = sine(7.0, 100.0, 1000)  # 10 s
    y = resample(x, 100, 128)
    assert y.shape == (1280,)
    want = sine(7.0, 128.0, 1280)
    err = np.abs(interior(y, 128) - interior(want, 128)).max()
    assert err < 0.01


def test_identity_rate_returns_bitwise_copy():
    x = np.random.default_rng(3).normal(size=500)
    y = resample(x, 128, 128)
    assert np.array_equal(x, y)
    assert y is not x  # a private copy, not an alias
    y[0] = 99.0
    assert x[0] != 99.0


def test_output_length_rounds():
    # 7 samples at 3 Hz -> round(7 * 2 / 3) = 5 samples at 2 Hz
    y = resample(np.zeros(7), 3, 2)
    assert y.shape == (5,)


@pytest.mark.parametrize("n", [1, 2, 17, 100])
def test_length_law_across_sizes(n):
    y = resample(np.ones(n), 256, 128)
    assert y.shape == (int(round(n * 128 / 256)),)


def test_common_clinical_rates_map_to_target():
    for rate in (100, 200, 256, 500, 512):
        n = rate * 30
        y = resample(np.zeros(n), rate, 128)
        assert y.shape == (3840,), rate


def test_dc_level_is_preserved():
    y = resample(np.full(1000, 3.25), 250, 128)
    assert np.abs(interior(y, 128) - 3.25).max() < 1e-3


def test_empty_input_raises():
    with pytest.raises(EmptySignal):
        resample(np.empty(0), 256, 128)


def test_bad_rates_raise():
    with pytest.raises(UserError):
        resample(np.zeros(10), 0, 128)
    with pytest.raises(UserError):
        resample(np.zeros(10), 256, -1)


def test_two_dimensional_input_rejected():
    with pytest.raises(UserError):
        resample(np.zeros((4, 4)), 256, 128)
