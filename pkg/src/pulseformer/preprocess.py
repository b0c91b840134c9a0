"""Clip and waveform preprocessing: frame formats, normalisation, windowing.

Frames travel as T x H x W x C float arrays in [0, 1]; the paired waveform
is sampled at the clip frame rate. The normalised-difference frame format
computes the per-pixel ratio of successive-frame difference to sum, which
cancels any static multiplicative illumination exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

EPS = 1e-7


@dataclass
class VideoClip:
    """Dense T x H x W x C sample grid with its frame rate in Hz."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise InputError(f"clip frames must be T x H x W x C, got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise InputError("clip needs at least 2 frames")
        if self.fps <= 0:
            raise InputError(f"frame rate must be positive, got {self.fps}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SignalTrace:
    """1-D physiological waveform sampled at the paired clip's frame rate."""

    samples: np.ndarray
    fps: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.fps <= 0:
            raise InputError(f"frame rate must be positive, got {self.fps}")

    @property
    def length(self) -> int:
        return self.samples.shape[0]


def standardize(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """(x - mean) / max(std, eps) over all elements, population std."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot standardize an empty array")
    std = x.std()
    return (x - x.mean()) / max(std, eps)


def diffnorm_frames(clip: VideoClip, eps: float = EPS) -> VideoClip:
    """Difference-over-sum frame format, globally standardised to unit spread.

    d_t = (c_{t+1} - c_t) / max(c_{t+1} + c_t, eps) per pixel and channel;
    the eps floor only guards black pixels, so a global illumination scale
    cancels exactly. The stack of T-1 difference frames is divided by its
    global standard deviation (floored at eps), non-finite values are
    zeroed, and a zero frame is appended to restore length T.
    """
    f = clip.frames
    if f.shape[0] < 2:
        raise InputError("difference frames need at least 2 input frames")
    d = (f[1:] - f[:-1]) / np.maximum(f[1:] + f[:-1], eps)
    d = np.where(np.isfinite(d), d, 0.0)
    d = d / max(d.std(), eps)
    d = np.where(np.isfinite(d), d, 0.0)
    out = np.concatenate([d, np.zeros_like(f[:1])], axis=0)
    return VideoClip(out, clip.fps)


def diff_labels(trace: SignalTrace) -> SignalTrace:
    """First differences of the waveform, standardised, zero-padded to length T."""
    s = trace.samples
    if s.shape[0] < 2:
        raise InputError("difference labels need at least 2 samples")
    d = standardize(np.diff(s))
    return SignalTrace(np.concatenate([d, [0.0]]), trace.fps)


def resize_bilinear(clip: VideoClip, out_h: int, out_w: int) -> VideoClip:
    """Per-frame bilinear resampling with half-pixel centers, edge-clamped."""
    if out_h < 1 or out_w < 1:
        raise InputError(f"target size must be positive, got {out_h}x{out_w}")
    t, h, w, c = clip.frames.shape
    if (h, w) == (out_h, out_w):
        return VideoClip(clip.frames.copy(), clip.fps)

    def axis_weights(n_in, n_out):
        centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(centers).astype(np.int64)
        frac = centers - lo
        lo0 = np.clip(lo, 0, n_in - 1)
        lo1 = np.clip(lo + 1, 0, n_in - 1)
        return lo0, lo1, frac

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    f = clip.frames
    top = f[:, y0][:, :, x0] * (1 - fx)[None, None, :, None] + \
        f[:, y0][:, :, x1] * fx[None, None, :, None]
    bot = f[:, y1][:, :, x0] * (1 - fx)[None, None, :, None] + \
        f[:, y1][:, :, x1] * fx[None, None, :, None]
    out = top * (1 - fy)[None, :, None, None] + bot * fy[None, :, None, None]
    return VideoClip(out, clip.fps)


@dataclass
class WindowExample:
    """One non-overlapping window prepared for the model.

    ``x`` is channel-first (C, T, H, W); ``target`` is a length-T waveform
    for signal output or a scalar array for HR output. ``trace_window`` keeps
    the untouched ground-truth samples for label HR estimation.
    """

    x: np.ndarray
    target: np.ndarray
    trace_window: np.ndarray
    fps: float
    clip_id: str = ""
    window_index: int = 0
    subject_id: str = field(default="")


def make_example(clip: VideoClip, trace: SignalTrace, cfg) -> list[WindowExample]:
    """Window, resize, and format one clip/trace pair per the configuration.

    Produces floor(T_total / T_cfg) consecutive non-overlapping windows.
    """
    from .metrics import hr_from_signal

    t_cfg, h_cfg, w_cfg = cfg.input_dims
    if trace.length < clip.length:
        raise InputError(
            f"trace length {trace.length} shorter than clip length {clip.length}")
    if clip.length < t_cfg:
        raise InputError(f"clip length {clip.length} shorter than window {t_cfg}")

    n_win = clip.length // t_cfg
    out = []
    for wi in range(n_win):
        sl = slice(wi * t_cfg, (wi + 1) * t_cfg)
        win = VideoClip(clip.frames[sl], clip.fps)
        win = resize_bilinear(win, h_cfg, w_cfg)
        if cfg.frame_format == "DiffNorm":
            win = diffnorm_frames(win)
        else:
            win = VideoClip(standardize(win.frames), win.fps)
        tr = trace.samples[sl].copy()

        if cfg.output_format == "HR":
            est = hr_from_signal(SignalTrace(tr, trace.fps))
            target = np.asarray(est.bpm)
        else:
            if cfg.frame_format == "DiffNorm":
                target = diff_labels(SignalTrace(tr, trace.fps)).samples
            else:
                target = tr.copy()
            if cfg.signal_norm:
                target = standardize(target)
        out.append(WindowExample(
            x=np.ascontiguousarray(np.moveaxis(win.frames, 3, 0)),
            target=target,
            trace_window=tr,
            fps=trace.fps,
            window_index=wi,
        ))
    return out
