"""Bit-exact file formats: clips, traces, checkpoints, manifests, run dirs.

All binary formats are little-endian with a four-byte magic and a u32
version. Payloads are f32 on disk and promoted to f64 in memory on load.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import InputError
from .metrics import ExperimentResult
from .model import ModelConfig, parse_scaling, scaling_label
from .preprocess import SignalTrace, VideoClip
from .training import SPLIT_MODES, TrainConfig

CLIP_MAGIC = b"GVTC"
TRACE_MAGIC = b"GVTS"
CHECKPOINT_MAGIC = b"GVTM"
FORMAT_VERSION = 1


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise InputError("unexpected end of file")
    return buf


def _check_header(f, magic: bytes, path) -> None:
    got = _read_exact(f, 4)
    if got != magic:
        raise InputError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported version {version}")


def write_clip(path, clip: VideoClip) -> None:
    t, h, w, c = clip.frames.shape
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<IIIIIf", FORMAT_VERSION, t, h, w, c, clip.fps))
        f.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def read_clip(path) -> VideoClip:
    with open(path, "rb") as f:
        _check_header(f, CLIP_MAGIC, path)
        t, h, w, c, fps = struct.unpack("<IIIIf", _read_exact(f, 20))
        payload = np.frombuffer(_read_exact(f, 4 * t * h * w * c), dtype="<f4")
        if f.read(1):
            raise InputError(f"{path}: trailing bytes after payload")
    return VideoClip(payload.astype(np.float64).reshape(t, h, w, c), float(fps))


def write_trace(path, trace: SignalTrace) -> None:
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(struct.pack("<IIf", FORMAT_VERSION, trace.length, trace.fps))
        f.write(np.ascontiguousarray(trace.samples, dtype="<f4").tobytes())


def read_trace(path) -> SignalTrace:
    with open(path, "rb") as f:
        _check_header(f, TRACE_MAGIC, path)
        t, fps = struct.unpack("<If", _read_exact(f, 8))
        payload = np.frombuffer(_read_exact(f, 4 * t), dtype="<f4")
        if f.read(1):
            raise InputError(f"{path}: trailing bytes after payload")
    return SignalTrace(payload.astype(np.float64), float(fps))


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Named f64 buffers, written in insertion order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        _check_header(f, CHECKPOINT_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 8 * size), dtype="<f8")
            out[name] = data.astype(np.float64).reshape(shape)
        if f.read(1):
            raise InputError(f"{path}: trailing bytes after payload")
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, entries: list[dict], metadata: dict) -> None:
    doc = {"metadata": metadata, "clips": entries}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[list[dict], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read manifest {path}: {e}") from e
    clips = doc.get("clips")
    if not isinstance(clips, list):
        raise InputError(f"manifest {path} has no clip list")
    base = Path(path).parent
    for entry in clips:
        for key in ("clip_path", "trace_path", "subject_id"):
            if key not in entry:
                raise InputError(f"manifest entry missing {key!r}")
        for key in ("clip_path", "trace_path"):
            if not (base / entry[key]).exists():
                raise InputError(f"manifest references missing file {entry[key]}")
    return clips, doc.get("metadata", {})


# ---------------------------------------------------------------------------
# configuration documents
# ---------------------------------------------------------------------------

MODEL_KEYS = ("input_dims", "output_format", "frame_format", "signal_norm",
              "pos_encoding", "scaling", "base_width", "stage_depths",
              "heads_per_stage", "mlp_ratio")
TRAIN_KEYS = ("batch_size", "epochs", "learning_rate", "weight_decay", "seed", "loss")
SPLIT_KEYS = ("split_mode", "fold")


def config_to_dict(model_cfg: ModelConfig, train_cfg: TrainConfig,
                   split_mode: str = "intra", fold: int = 0) -> dict:
    d = asdict(model_cfg)
    d["input_dims"] = list(model_cfg.input_dims)
    d["stage_depths"] = list(model_cfg.stage_depths)
    d["heads_per_stage"] = list(model_cfg.heads_per_stage)
    d["scaling"] = scaling_label(model_cfg.scaling)
    d.update(asdict(train_cfg))
    d["split_mode"] = split_mode
    d["fold"] = fold
    return d


def config_from_dict(doc: dict) -> tuple[ModelConfig, TrainConfig, str, int]:
    """Parse a config document; unknown keys are an error naming the key."""
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(SPLIT_KEYS)
    for key in doc:
        if key not in known:
            raise InputError(f"unknown config key {key!r}")
    from .search import general_config

    mc = general_config(simple=True)
    tc = TrainConfig()
    try:
        for key in MODEL_KEYS:
            if key not in doc:
                continue
            value = doc[key]
            if key in ("input_dims", "stage_depths", "heads_per_stage"):
                value = tuple(int(v) for v in value)
            elif key == "scaling":
                value = parse_scaling(value)
            elif key == "signal_norm":
                value = bool(value)
            mc = mc.copy(**{key: value})
        for key in TRAIN_KEYS:
            if key in doc:
                setattr(tc, key, type(getattr(tc, key))(doc[key]))
        mc.validate()
        tc.validate()
        split_mode = doc.get("split_mode", "intra")
        if split_mode not in SPLIT_MODES:
            raise InputError(f"unknown config value for 'split_mode': {split_mode!r}")
        fold = int(doc.get("fold", 0))
    except (TypeError, ValueError) as e:
        raise InputError(f"malformed config: {e}") from e
    return mc, tc, split_mode, fold


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def write_run_config(run_dir, model_cfg, train_cfg, split_mode="intra", fold=0) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = config_to_dict(model_cfg, train_cfg, split_mode, fold)
    (run_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_history(run_dir, history) -> None:
    with open(Path(run_dir) / "history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_mae"])
        for epoch, loss, val_mae in history.rows():
            w.writerow([epoch, f"{loss:.12g}", "" if val_mae is None else f"{val_mae:.12g}"])


def write_result(run_dir, result: ExperimentResult) -> None:
    run_dir = Path(run_dir)
    with open(run_dir / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_id", "pred_bpm", "label_bpm"])
        for cid, pred, label in result.pairs:
            w.writerow([cid, f"{pred:.12g}", f"{label:.12g}"])
    doc = {"mae": result.mae, "rmse": result.rmse, "pearson": result.pearson,
           "excluded_windows": result.excluded_windows}
    (run_dir / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_search_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "candidate", "mae", "selected"])
        for s in trace.steps:
            w.writerow([s.phase, s.candidate,
                        "inf" if not np.isfinite(s.mae) else f"{s.mae:.12g}",
                        int(s.selected)])
