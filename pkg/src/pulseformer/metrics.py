"""Heart-rate estimation from waveforms and the evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, InputError
from .preprocess import SignalTrace

# beats 36..198 per minute; wide enough for any plausible planted rate
DEFAULT_BAND = (0.6, 3.3)
MIN_FFT = 4096


@dataclass
class HrEstimate:
    bpm: float
    peak_power_fraction: float


@dataclass
class ExperimentResult:
    """MAE/RMSE/Pearson triple plus the per-window paired HR records."""

    mae: float
    rmse: float
    pearson: float | None
    pairs: list[tuple[str, float, float]] = field(default_factory=list)
    excluded_windows: int = 0


def detrend_linear(x: np.ndarray) -> np.ndarray:
    """Subtract the least-squares straight line."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    t = np.arange(n) - (n - 1) / 2.0
    slope = (t @ x) / (t @ t) if n > 1 else 0.0
    return x - x.mean() - slope * t


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def power_spectrum(samples: np.ndarray, fps: float) -> tuple[np.ndarray, np.ndarray]:
    """Detrended, Hamming-windowed, zero-padded magnitude-squared spectrum."""
    x = detrend_linear(samples)
    x = x * np.hamming(len(x))
    nfft = max(MIN_FFT, _next_pow2(len(x)))
    spec = np.abs(np.fft.rfft(x, nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, 1.0 / fps)
    return freqs, spec


def hr_from_signal(trace: SignalTrace, band: tuple[float, float] = DEFAULT_BAND) -> HrEstimate:
    """Dominant in-band spectral frequency as beats per minute.

    Requires at least two seconds of samples and a non-constant waveform.
    """
    s = trace.samples
    if s.shape[0] < 2 * trace.fps:
        raise EstimationError(
            f"waveform too short for HR estimation: {s.shape[0]} samples at {trace.fps} Hz")
    if np.ptp(s) == 0.0:
        raise EstimationError("waveform is constant; no dominant frequency")
    freqs, spec = power_spectrum(s, trace.fps)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not mask.any():
        raise EstimationError(f"no spectral bins inside band {band}")
    inband = spec[mask]
    total = inband.sum()
    if total <= 0.0:
        raise EstimationError("waveform has no in-band energy")
    peak = int(np.argmax(inband))
    return HrEstimate(bpm=60.0 * freqs[mask][peak],
                      peak_power_fraction=float(inband[peak] / total))


def band_peak_fraction(trace: SignalTrace, f_target: float,
                       band: tuple[float, float] = DEFAULT_BAND) -> float:
    """Fraction of in-band power concentrated at the bin nearest ``f_target``."""
    freqs, spec = power_spectrum(trace.samples, trace.fps)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    inband = spec[mask]
    total = inband.sum()
    if total <= 0.0:
        return 0.0
    idx = int(np.argmin(np.abs(freqs[mask] - f_target)))
    return float(inband[idx] / total)


def band_power_fraction(trace: SignalTrace,
                        band: tuple[float, float] = DEFAULT_BAND) -> float:
    """Share of total spectral power (DC excluded) that falls inside the band.

    Measures how concentrated a waveform's energy is in the pulse band;
    drift and other out-of-band disturbances lower it.
    """
    freqs, spec = power_spectrum(trace.samples, trace.fps)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    total = spec[1:].sum()
    if total <= 0.0:
        return 0.0
    return float(spec[mask].sum() / total)


def integrate_diff(pred: SignalTrace) -> SignalTrace:
    """Cumulative sum followed by linear-trend removal (inverse of differencing)."""
    return SignalTrace(detrend_linear(np.cumsum(pred.samples)), pred.fps)


def compute_metrics(pairs: list[tuple[str, float, float]]) -> ExperimentResult:
    """MAE, RMSE, and Pearson correlation of predicted vs label bpm."""
    if not pairs:
        raise InputError("no prediction pairs to score")
    p = np.array([x[1] for x in pairs], dtype=np.float64)
    l = np.array([x[2] for x in pairs], dtype=np.float64)
    err = p - l
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    pearson = None
    if len(pairs) >= 2 and np.ptp(l) > 0.0 and np.ptp(p) > 0.0:
        pc = np.corrcoef(p, l)[0, 1]
        pearson = float(pc)
    elif len(pairs) >= 2 and np.ptp(l) > 0.0 and np.ptp(p) == 0.0:
        pearson = None
    return ExperimentResult(mae=mae, rmse=rmse, pearson=pearson, pairs=list(pairs))
