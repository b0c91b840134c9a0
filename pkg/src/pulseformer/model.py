"""Configurable four-stage multiscale spatiotemporal transformer.

A strided patchify stem projects the clip to a coarse token grid; four
stages of shape-preserving pre-norm transformer blocks are separated by
strided, channel-doubling convolutions where all multiscale hierarchy
lives. The scaling strategy selects which of the three transitions also
halve the temporal extent. Prediction is either a full-length waveform
(temporal upsampling head) or a single rate per clip (token averaging).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import nn_ops, tensor as T
from .errors import ConfigurationError, DimensionError
from .nn_ops import BatchNormState, RelativeBias
from .tensor import Tensor

OUTPUT_FORMATS = ("Signal", "HR")
FRAME_FORMATS = ("Raw", "DiffNorm")
POS_ENCODINGS = ("ABS", "REL", "CPE")

# transition indices (stage i -> i+1) that additionally halve time, per strategy
TEMPORAL_SCHEDULE: dict[int, tuple[int, ...]] = {
    0: (),
    1: (0,),
    2: (1,),
    3: (2,),
    4: (0, 1),
    5: (0, 2),
    6: (1, 2),
}

STEM_KERNEL = (3, 7, 7)
STEM_STRIDE = (2, 4, 4)
STEM_PAD = (1, 3, 3)
INIT_STD = 0.02


def scaling_label(sid: int) -> str:
    return f"Scale-{sid}"


def parse_scaling(label) -> int:
    if isinstance(label, int):
        sid = label
    else:
        s = str(label)
        sid = int(s[6:]) if s.startswith("Scale-") else int(s)
    if sid not in TEMPORAL_SCHEDULE:
        raise ConfigurationError(f"unknown scaling strategy {label!r}")
    return sid


@dataclass
class ModelConfig:
    """One point of the preprocessing/architecture design space."""

    input_dims: tuple[int, int, int] = (120, 64, 64)
    output_format: str = "Signal"
    frame_format: str = "DiffNorm"
    signal_norm: bool = True
    pos_encoding: str = "REL"
    scaling: int = 2
    base_width: int = 32
    stage_depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    heads_per_stage: tuple[int, int, int, int] = (1, 2, 4, 8)
    mlp_ratio: float = 4.0

    def copy(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def validate(self) -> "ModelConfig":
        t, h, w = self.input_dims
        if self.output_format not in OUTPUT_FORMATS:
            raise ConfigurationError(f"unknown output format {self.output_format!r}")
        if self.frame_format not in FRAME_FORMATS:
            raise ConfigurationError(f"unknown frame format {self.frame_format!r}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigurationError(f"unknown positional encoding {self.pos_encoding!r}")
        parse_scaling(self.scaling)
        n_temporal = len(TEMPORAL_SCHEDULE[self.scaling])
        t_div = 2 * 2 ** n_temporal
        if t % t_div != 0:
            raise ConfigurationError(
                f"temporal extent {t} must be divisible by {t_div} for {scaling_label(self.scaling)}")
        if h % 32 != 0 or w % 32 != 0:
            raise ConfigurationError(f"spatial extents {h}x{w} must be divisible by 32")
        if len(self.stage_depths) != 4 or any(d < 0 for d in self.stage_depths):
            raise ConfigurationError(f"stage depths {self.stage_depths} must be 4 non-negative ints")
        if len(self.heads_per_stage) != 4:
            raise ConfigurationError("heads_per_stage must have 4 entries")
        for i, heads in enumerate(self.heads_per_stage):
            if heads < 1 or self.base_width % heads != 0:
                raise ConfigurationError(
                    f"base width {self.base_width} not divisible by stage-{i + 1} heads {heads}")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")
        return self


def stage_grids(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """Token grid inside each of the four stages (stem output first)."""
    t, h, w = cfg.input_dims
    g = (t // 2, h // 4, w // 4)
    grids = [g]
    temporal = TEMPORAL_SCHEDULE[parse_scaling(cfg.scaling)]
    for i in range(3):
        g = (g[0] // 2 if i in temporal else g[0], g[1] // 2, g[2] // 2)
        grids.append(g)
    return grids


def stage_channels(cfg: ModelConfig) -> list[int]:
    return [cfg.base_width * 2 ** i for i in range(4)]


def head_upsample_count(cfg: ModelConfig) -> int:
    """Number of temporal x2 upsampling modules needed to restore T."""
    t = cfg.input_dims[0]
    final_t = stage_grids(cfg)[-1][0]
    ratio = t / final_t
    k = int(round(math.log2(ratio)))
    if 2 ** k != ratio:
        raise ConfigurationError(
            f"target length {t} is not a power-of-two multiple of final grid {final_t}")
    return k


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


class _ParamStore:
    """Ordered named parameters plus non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        t = Tensor(value, requires_grad=trainable)
        self.params[name] = t
        return t


class _Block:
    """Pre-norm transformer block: x + Attn(LN(x)); x + MLP(LN(x))."""

    def __init__(self, store: _ParamStore, prefix: str, dim: int, heads: int,
                 mlp_ratio: float, rng: np.random.Generator):
        self.heads = heads
        p = store.add
        self.ln1_g = p(f"{prefix}.ln1.gamma", np.ones(dim))
        self.ln1_b = p(f"{prefix}.ln1.beta", np.zeros(dim))
        self.proj = {}
        for nm in ("q", "k", "v", "o"):
            self.proj[nm] = (p(f"{prefix}.attn.w{nm}", trunc_normal(rng, (dim, dim))),
                             p(f"{prefix}.attn.b{nm}", np.zeros(dim)))
        self.ln2_g = p(f"{prefix}.ln2.gamma", np.ones(dim))
        self.ln2_b = p(f"{prefix}.ln2.beta", np.zeros(dim))
        hidden = int(round(dim * mlp_ratio))
        self.fc1_w = p(f"{prefix}.mlp.fc1.w", trunc_normal(rng, (hidden, dim)))
        self.fc1_b = p(f"{prefix}.mlp.fc1.b", np.zeros(hidden))
        self.fc2_w = p(f"{prefix}.mlp.fc2.w", trunc_normal(rng, (dim, hidden)))
        self.fc2_b = p(f"{prefix}.mlp.fc2.b", np.zeros(dim))

    def __call__(self, x: Tensor, rel: RelativeBias | None) -> Tensor:
        a = nn_ops.layernorm(x, self.ln1_g, self.ln1_b)
        a = nn_ops.attention(a, *self.proj["q"], *self.proj["k"], *self.proj["v"],
                             *self.proj["o"], heads=self.heads, rel=rel)
        x = T.add(x, a)
        m = nn_ops.layernorm(x, self.ln2_g, self.ln2_b)
        m = T.linear(m, self.fc1_w, self.fc1_b)
        m = T.gelu(m)
        m = T.linear(m, self.fc2_w, self.fc2_b)
        return T.add(x, m)


class MultiscaleVideoTransformer:
    """The full model; construction is a pure function of (config, seed)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.grids = stage_grids(cfg)
        self.channels = stage_channels(cfg)
        self.store = _ParamStore()
        rng = np.random.default_rng(seed)
        p = self.store.add
        d = cfg.base_width

        self.stem_w = p("stem.w", trunc_normal(rng, (d, 3) + STEM_KERNEL))
        self.stem_b = p("stem.b", np.zeros(d))

        # encoding parameters are zero-initialised and draw nothing from rng,
        # so differently-encoded models share the remaining weight stream
        self.abs_table = None
        self.cpe_w = None
        if cfg.pos_encoding == "ABS":
            self.abs_table = p("pos.abs", np.zeros((d,) + self.grids[0]))
        elif cfg.pos_encoding == "CPE":
            self.cpe_w = p("pos.cpe.w", np.zeros((d, 3, 3, 3)))

        self.rel: list[RelativeBias | None] = [None] * 4
        if cfg.pos_encoding == "REL":
            for i in range(4):
                rb = RelativeBias(cfg.heads_per_stage[i], self.grids[i])
                self.rel[i] = rb
                self.store.params[f"stage{i + 1}.rel.t"] = rb.table_t
                self.store.params[f"stage{i + 1}.rel.h"] = rb.table_h
                self.store.params[f"stage{i + 1}.rel.w"] = rb.table_w

        self.stages: list[list[_Block]] = []
        self.trans_w: list[Tensor] = []
        self.trans_b: list[Tensor] = []
        for i in range(4):
            ch = self.channels[i]
            blocks = [_Block(self.store, f"stage{i + 1}.block{j}", ch,
                             cfg.heads_per_stage[i], cfg.mlp_ratio, rng)
                      for j in range(cfg.stage_depths[i])]
            self.stages.append(blocks)
            if i < 3:
                self.trans_w.append(p(f"transition{i + 1}.w",
                                      trunc_normal(rng, (2 * ch, ch, 3, 3, 3))))
                self.trans_b.append(p(f"transition{i + 1}.b", np.zeros(2 * ch)))

        ch = self.channels[-1]
        self.bn_states: list[BatchNormState] = []
        self.head_convs: list[tuple[Tensor, Tensor]] = []
        self.head_bns: list[tuple[Tensor, Tensor]] = []
        if cfg.output_format == "Signal":
            for k in range(head_upsample_count(cfg)):
                self.head_convs.append((p(f"head.up{k}.conv.w",
                                          trunc_normal(rng, (ch, ch, 3, 1, 1))),
                                        p(f"head.up{k}.conv.b", np.zeros(ch))))
                self.head_bns.append((p(f"head.up{k}.bn.gamma", np.ones(ch)),
                                      p(f"head.up{k}.bn.beta", np.zeros(ch))))
                state = BatchNormState(ch)
                self.bn_states.append(state)
                self.store.buffers[f"head.up{k}.bn.running_mean"] = state.running_mean
                self.store.buffers[f"head.up{k}.bn.running_var"] = state.running_var
        self.out_w = p("head.out.w", trunc_normal(rng, (1, ch)))
        self.out_b = p("head.out.b", np.zeros(1))

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.store.params

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All state needed to reconstruct the model: weights plus buffers."""
        out = {name: t.data for name, t in self.store.params.items()}
        out.update(self.store.buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.store.params.items():
            if name not in arrays:
                raise ConfigurationError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != t.data.shape:
                raise ConfigurationError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arrays[name].shape} vs {t.data.shape}")
            t.data[...] = arrays[name]
        for name, buf in self.store.buffers.items():
            if name in arrays:
                buf[...] = arrays[name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.store.params.values())

    def zero_grad(self) -> None:
        for t in self.store.params.values():
            t.zero_grad()

    # -- forward ------------------------------------------------------------

    def _tokens(self, x: Tensor) -> Tensor:
        n, c, t, h, w = x.shape
        return T.reshape(T.transpose(x, (0, 2, 3, 4, 1)), (n, t * h * w, c))

    def _grid(self, x: Tensor, grid, channels) -> Tensor:
        n = x.shape[0]
        t, h, w = grid
        return T.transpose(T.reshape(x, (n, t, h, w, channels)), (0, 4, 1, 2, 3))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        cfg = self.cfg
        t_in, h_in, w_in = cfg.input_dims
        if x.ndim != 5 or x.shape[1:] != (3, t_in, h_in, w_in):
            raise DimensionError(
                f"input {x.shape} does not match configured dims (N, 3, {t_in}, {h_in}, {w_in})")

        def section(name, fn, *args, **kw):
            try:
                return fn(*args, **kw)
            except (DimensionError, ConfigurationError) as e:
                raise type(e)(f"{name}: {e}") from e

        g = section("patchify_stem", nn_ops.conv3d, x, self.stem_w, self.stem_b,
                    stride=STEM_STRIDE, pad=STEM_PAD)
        if self.abs_table is not None:
            g = section("pos_encoding", T.add_embedding, g, self.abs_table)
        elif self.cpe_w is not None:
            g = section("pos_encoding", lambda: T.add(g, nn_ops.depthwise_conv3d(g, self.cpe_w)))

        for i in range(4):
            ch = self.channels[i]
            if self.stages[i]:
                tok = self._tokens(g)
                for j, blk in enumerate(self.stages[i]):
                    tok = section(f"stage{i + 1}.block{j}", blk, tok, self.rel[i])
                g = self._grid(tok, self.grids[i], ch)
            if i < 3:
                temporal = i in TEMPORAL_SCHEDULE[cfg.scaling]
                g = section(f"transition{i + 1}", nn_ops.conv3d, g,
                            self.trans_w[i], self.trans_b[i],
                            stride=(2 if temporal else 1, 2, 2), pad=(1, 1, 1))

        if cfg.output_format == "HR":
            pooled = T.mean(g, axes=(2, 3, 4))
            out = T.linear(pooled, self.out_w, self.out_b)
            return T.reshape(out, (x.shape[0],))

        for k in range(len(self.head_convs)):
            g = section(f"head.up{k}", self._upsample_module, g, k, training)
        g = T.mean(g, axes=(3, 4))                       # (N, C, T)
        g = T.transpose(g, (0, 2, 1))                    # (N, T, C)
        out = T.linear(g, self.out_w, self.out_b)        # (N, T, 1)
        return T.reshape(out, (x.shape[0], t_in))

    def _upsample_module(self, g: Tensor, k: int, training: bool) -> Tensor:
        g = nn_ops.nearest_upsample3d(g, (2, 1, 1))
        w, b = self.head_convs[k]
        g = nn_ops.conv3d(g, w, b, stride=(1, 1, 1), pad=(1, 0, 0))
        gamma, beta = self.head_bns[k]
        g = nn_ops.batchnorm3d(g, gamma, beta, self.bn_states[k], training=training)
        return T.elu(g)

    def predict(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Forward pass without tape recording; x is (C, T, H, W) or batched."""
        single = x.ndim == 4
        if single:
            x = x[None]
        with T.no_grad():
            y = self.forward(Tensor(x), training=training)
        return y.data[0] if single else y.data


def model_grad_check(seed: int, sample: int = 20) -> float:
    """End-to-end finite-difference check on a tiny configuration."""
    from .gradcheck import max_relative_error

    cfg = ModelConfig(input_dims=(8, 32, 32), base_width=4, stage_depths=(1, 1, 1, 1),
                      heads_per_stage=(1, 2, 4, 4), scaling=0, output_format="Signal")
    model = MultiscaleVideoTransformer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    x = Tensor(rng.standard_normal((1, 3, 8, 32, 32)))
    target = Tensor(rng.standard_normal((1, 8)))
    params = list(model.parameters().values())

    def build():
        return T.mse_loss(model.forward(x, training=True), target)

    return max_relative_error(build, params, sample=sample,
                              rng=np.random.default_rng(seed))
