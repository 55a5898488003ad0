"""Waveform post-processing: detrending, periodogram, spectral rates, metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SPECTRUM_LEN = 16
MIN_NFFT = 2048


@dataclass(frozen=True)
class SpectralBand:
    low_hz: float
    high_hz: float

    def __post_init__(self):
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(f"invalid band [{self.low_hz}, {self.high_hz}]")


# Heart rate 36..198 BPM: covers rest through post-exercise.
HR_BAND = SpectralBand(0.6, 3.3)
# Respiration 6..30 breaths/min.
RR_BAND = SpectralBand(0.1, 0.5)


def detrend(x, window: int) -> np.ndarray:
    """Subtract a centered moving average (window shrinks at the edges)."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    half = window // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half, n - 1)
    baseline = (csum[hi + 1] - csum[lo]) / (hi - lo + 1)
    return x - baseline


def power_spectrum(x, fs_hz: float):
    """Periodogram of the Hann-windowed signal, zero-padded to >= 2048 points.

    Returns (freqs_hz, power) over 0..fs/2.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < MIN_SPECTRUM_LEN:
        raise ValueError(f"need at least {MIN_SPECTRUM_LEN} samples")
    if fs_hz <= 0:
        raise ValueError("sampling rate must be positive")
    n = len(x)
    nfft = MIN_NFFT
    while nfft < n:
        nfft *= 2
    spec = np.fft.rfft(x * np.hanning(n), nfft)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs_hz)
    return freqs, np.abs(spec) ** 2


def dominant_rate_bpm(x, fs_hz: float, band: SpectralBand) -> float:
    """60x the frequency of maximum in-band power (mean removed first).

    Ties break toward the lower frequency.
    """
    x = np.asarray(x, dtype=np.float64)
    freqs, power = power_spectrum(x - x.mean(), fs_hz)
    in_band = (freqs >= band.low_hz) & (freqs <= band.high_hz)
    if not np.any(in_band):
        raise ValueError(f"no spectral bin inside [{band.low_hz}, {band.high_hz}] Hz")
    sub = power[in_band]
    return 60.0 * freqs[in_band][np.argmax(sub)]


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("pred and gt must have equal nonzero length")
    return float(np.mean(np.abs(pred - gt)))


def mape(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("pred and gt must have equal nonzero length")
    if np.any(gt == 0):
        raise ValueError("mape undefined for zero ground-truth values")
    return float(np.mean(np.abs(pred - gt) / np.abs(gt)) * 100.0)
