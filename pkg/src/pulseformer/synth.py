"""Synthetic clips with a planted blood-volume-pulse signal.

Each clip is a smooth random "skin" image modulated by a pulse waveform
(fundamental plus half-amplitude second harmonic), an optional per-frame
illumination random walk, per-pixel Gaussian noise, and an optional linear
integer-pixel drift. The noise-free waveform is kept as ground truth, so
training and evaluation are verifiable without any recorded data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .preprocess import SignalTrace, VideoClip, resize_bilinear


@dataclass(frozen=True)
class SynthPreset:
    name: str
    pulse_amplitude: float = 0.01
    noise_std: float = 0.005
    illumination_drift_std: float = 0.0
    motion_max_px: int = 0
    hr_range: tuple[float, float] = (45.0, 150.0)


SIMPLE = SynthPreset("simple", noise_std=0.005)
HARD = SynthPreset("hard", noise_std=0.02, illumination_drift_std=0.002, motion_max_px=2)

PRESETS = {"simple": SIMPLE, "hard": HARD}

# illumination walk stays within this multiplicative envelope
DRIFT_CLAMP = (0.8, 1.2)
BLOTCH_GRID = 8


@dataclass
class LabeledClip:
    clip: VideoClip
    trace: SignalTrace
    planted_hr: float
    subject_id: str
    clip_id: str


def _base_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random blotches in [0.3, 0.7], shape (H, W, 3)."""
    low = rng.random((BLOTCH_GRID, BLOTCH_GRID, 3))
    up = resize_bilinear(VideoClip(low[None].repeat(2, axis=0), fps=1.0), h, w).frames[0]
    lo, hi = up.min(), up.max()
    if hi - lo < 1e-12:
        return np.full((h, w, 3), 0.5)
    return 0.3 + 0.4 * (up - lo) / (hi - lo)


def pulse_waveform(t_seconds: np.ndarray, hr_bpm: float, phase: float) -> np.ndarray:
    """Fundamental plus half-amplitude second harmonic at hr_bpm."""
    f = hr_bpm / 60.0
    return np.sin(2 * np.pi * f * t_seconds) + 0.5 * np.sin(4 * np.pi * f * t_seconds + phase)


def generate_clip(preset: SynthPreset, t: int, h: int, w: int, fps: float, seed,
                  base: np.ndarray | None = None, hr: float | None = None,
                  subject_id: str = "s000", clip_id: str = "s000c00") -> LabeledClip:
    """One clip with a planted pulse; bit-identical for identical seeds."""
    if t < 2 * fps:
        raise InputError(f"clip length {t} shorter than 2 seconds at {fps} Hz")
    rng = np.random.default_rng(seed)
    if base is None:
        base = _base_image(rng, h, w)
    if hr is None:
        hr = float(rng.uniform(*preset.hr_range))

    ts = np.arange(t) / fps
    phase = float(rng.uniform(0, 2 * np.pi))
    g = pulse_waveform(ts, hr, phase)

    if preset.illumination_drift_std > 0:
        steps = rng.normal(0.0, preset.illumination_drift_std, size=t)
        steps[0] = 0.0
        lum = np.clip(1.0 + np.cumsum(steps), *DRIFT_CLAMP)
    else:
        lum = np.ones(t)

    frames = base[None] * ((1.0 + preset.pulse_amplitude * g) * lum)[:, None, None, None]

    if preset.motion_max_px > 0:
        m = preset.motion_max_px
        end = rng.integers(-m, m + 1, size=2)
        for i in range(t):
            frac = i / (t - 1) if t > 1 else 0.0
            sy, sx = np.rint(frac * end).astype(int)
            if sy or sx:
                frames[i] = np.roll(frames[i], (sy, sx), axis=(0, 1))

    if preset.noise_std > 0:
        frames = frames + rng.normal(0.0, preset.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)

    return LabeledClip(clip=VideoClip(frames, fps), trace=SignalTrace(g, fps),
                       planted_hr=hr, subject_id=subject_id, clip_id=clip_id)


def generate_dataset(preset: SynthPreset, n_subjects: int, clips_per_subject: int,
                     dims: tuple[int, int, int], fps: float, seed: int) -> list[LabeledClip]:
    """Per-subject base image and HR drawn once; phase/noise resampled per clip."""
    if n_subjects < 1:
        raise InputError("need at least one subject")
    t, h, w = dims
    out = []
    for si in range(n_subjects):
        srng = np.random.default_rng([seed, si])
        base = _base_image(srng, h, w)
        hr = float(srng.uniform(*preset.hr_range))
        for ci in range(clips_per_subject):
            out.append(generate_clip(
                preset, t, h, w, fps, seed=[seed, si, ci], base=base, hr=hr,
                subject_id=f"s{si:03d}", clip_id=f"s{si:03d}c{ci:02d}"))
    return out
