"""Optimisation, dataset splitting, the training loop, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, NumericError
from .metrics import ExperimentResult, compute_metrics, hr_from_signal, integrate_diff
from .model import ModelConfig, MultiscaleVideoTransformer
from .preprocess import SignalTrace, WindowExample
from .tensor import Tensor

SPLIT_MODES = ("intra", "cross", "kfold")


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    loss: str = "MSE"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.epochs < 1:
            raise InputError("batch size and epochs must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InputError("learning rate must be positive, weight decay non-negative")
        if self.loss != "MSE":
            raise InputError(f"unsupported loss {self.loss!r}")
        return self


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay step, in place; ``t`` counts from 1."""
    if weight_decay:
        p -= lr * weight_decay * p
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Decoupled weight-decay optimiser over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            adamw_update(p.data, g, self.m[name], self.v[name], self.t,
                         self.lr, self.betas[0], self.betas[1], self.eps,
                         self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# dataset splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    mode: str
    groups: dict[str, list] = field(default_factory=dict)

    @property
    def assignment(self) -> dict:
        out = {}
        for part, ids in self.groups.items():
            for i in ids:
                out[i] = part
        return out


def split_dataset(ids, mode: str, seed: int, k: int = 3) -> SplitPlan:
    """Seeded shuffle then contiguous partition.

    ``intra`` splits 7:1:2 into train/val/test, ``cross`` splits 8:2 into
    train/val (floor for train, remainder to later parts); ``kfold``
    partitions into k folds balanced within one element.
    """
    ids = list(ids)
    if mode not in SPLIT_MODES:
        raise InputError(f"unknown split mode {mode!r}")
    if mode == "kfold":
        if len(ids) < k:
            raise InputError(f"k-fold needs at least {k} ids, got {len(ids)}")
    elif len(ids) < 10:
        raise InputError(f"ratio splits need at least 10 ids, got {len(ids)}")

    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    if mode == "intra":
        n_train = int(n * 0.7)
        n_val = int(n * 0.1)
        groups = {"train": order[:n_train],
                  "val": order[n_train:n_train + n_val],
                  "test": order[n_train + n_val:]}
    elif mode == "cross":
        n_train = int(n * 0.8)
        groups = {"train": order[:n_train], "val": order[n_train:]}
    else:
        folds = np.array_split(np.arange(n), k)
        groups = {f"fold{i}": [order[j] for j in f] for i, f in enumerate(folds)}
    return SplitPlan(mode=mode, groups=groups)


# ---------------------------------------------------------------------------
# prediction adapters
# ---------------------------------------------------------------------------

class ModelPredictor:
    """Adapter running the real model on a window's input tensor.

    Signal predictions live in the difference domain when the frames were
    difference-formatted, and are integrated before HR estimation.
    """

    output_domain = "diff"

    def __init__(self, model: MultiscaleVideoTransformer):
        self.model = model

    def predict_example(self, ex: WindowExample) -> np.ndarray:
        return self.model.predict(ex.x)


class PerfectStub:
    """Returns the ground-truth trace (or its exact rate) for every window."""

    output_domain = "signal"   # already a waveform; never integrated

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def predict_example(self, ex: WindowExample) -> np.ndarray:
        if self.cfg.output_format == "HR":
            return np.asarray(hr_from_signal(SignalTrace(ex.trace_window, ex.fps)).bpm)
        return ex.trace_window.copy()


class ConstantStub:
    output_domain = "signal"

    def __init__(self, value: float):
        self.value = float(value)

    def predict_example(self, ex: WindowExample) -> np.ndarray:
        if ex.target.ndim == 0:
            return np.asarray(self.value)
        return np.full_like(ex.trace_window, self.value)


class LabelOffsetStub:
    """HR-output stub returning the label rate plus a fixed offset."""

    def __init__(self, offset: float):
        self.offset = float(offset)

    def predict_example(self, ex: WindowExample) -> np.ndarray:
        return np.asarray(hr_from_signal(SignalTrace(ex.trace_window, ex.fps)).bpm + self.offset)


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

def evaluate(predictor, cfg: ModelConfig, examples: list[WindowExample]) -> ExperimentResult:
    """Per-window HR pairing of predictions against ground truth.

    Signal predictions under the difference frame format are integrated
    before estimation; windows whose estimation fails are excluded and
    counted. Label rates always come from the untouched ground-truth trace
    through the same estimator.
    """
    if not examples:
        raise InputError("evaluation set is empty")
    integrate = (cfg.output_format == "Signal" and cfg.frame_format == "DiffNorm"
                 and getattr(predictor, "output_domain", "diff") == "diff")
    pairs = []
    excluded = 0
    for ex in examples:
        wid = f"{ex.clip_id}#{ex.window_index}"
        try:
            label = hr_from_signal(SignalTrace(ex.trace_window, ex.fps)).bpm
            pred = predictor.predict_example(ex)
            if cfg.output_format == "HR":
                pred_bpm = float(pred)
            else:
                trace = SignalTrace(np.asarray(pred, dtype=np.float64), ex.fps)
                if integrate:
                    trace = integrate_diff(trace)
                pred_bpm = hr_from_signal(trace).bpm
        except Exception:
            excluded += 1
            continue
        pairs.append((wid, pred_bpm, label))
    if not pairs:
        raise InputError(f"all {excluded} windows failed HR estimation")
    result = compute_metrics(pairs)
    result.excluded_windows = excluded
    return result


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return [(e["epoch"], e["train_loss"], e["val_mae"]) for e in self.epochs]


def _batch(examples: list[WindowExample], idx) -> tuple[Tensor, Tensor]:
    xs = np.stack([examples[i].x for i in idx])
    ts = np.stack([examples[i].target for i in idx])
    return Tensor(xs), Tensor(ts)


def train_model(model_cfg: ModelConfig, train_cfg: TrainConfig,
                train_examples: list[WindowExample],
                val_examples: list[WindowExample] | None = None,
                log=None) -> tuple[MultiscaleVideoTransformer, TrainHistory]:
    """Seeded epoch loop with MSE loss and best-validation-epoch selection.

    With an empty validation set the final epoch's parameters are kept.
    Aborts with a diagnostic naming the batch and step if the loss goes
    non-finite.
    """
    train_cfg.validate()
    if not train_examples:
        raise InputError("training set is empty")
    model = MultiscaleVideoTransformer(model_cfg, seed=train_cfg.seed)
    opt = AdamW(model.parameters(), lr=train_cfg.learning_rate,
                weight_decay=train_cfg.weight_decay)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    history = TrainHistory()
    best_mae = np.inf
    best_state = None
    step = 0
    n = len(train_examples)
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for b0 in range(0, n, train_cfg.batch_size):
            idx = order[b0:b0 + train_cfg.batch_size]
            x, target = _batch(train_examples, idx)
            pred = model.forward(x, training=True)
            loss = T.mse_loss(pred, target)
            value = loss.item()
            if not np.isfinite(value):
                T.clear_tape()
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch} step {step} "
                    f"(batch indices {idx.tolist()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        val_mae = None
        if val_examples:
            val_mae = evaluate(ModelPredictor(model), model_cfg, val_examples).mae
            if val_mae < best_mae:
                best_mae = val_mae
                best_state = {k: v.copy() for k, v in model.named_arrays().items()}
                history.best_epoch = epoch
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mae": val_mae}
        history.epochs.append(row)
        if log:
            log(row)
    if best_state is not None:
        model.load_arrays(best_state)
    else:
        history.best_epoch = train_cfg.epochs - 1
    return model, history
