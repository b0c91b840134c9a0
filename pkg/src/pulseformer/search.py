"""Greedy sequential adaptation over the preprocessing/architecture space.

Six phases are searched in a fixed order (spatial size, temporal size,
output format, frame format x signal normalisation, positional encoding,
scaling strategy); each phase keeps the configuration with the lowest
validation MAE and later phases build on it. Evaluations are memoised by
full configuration and candidate failures score +inf so a sweep never
aborts. Ties resolve to the first candidate in declared order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .model import ModelConfig, scaling_label


@dataclass(frozen=True)
class DesignSpace:
    spatial: tuple[int, ...] = (256, 128, 64, 32)
    temporal: tuple[int, ...] = (240, 120, 60, 30)
    outputs: tuple[str, ...] = ("HR", "Signal")
    frame_norm: tuple[tuple[str, bool], ...] = (
        ("Raw", False), ("Raw", True), ("DiffNorm", False), ("DiffNorm", True))
    pos_encodings: tuple[str, ...] = ("ABS", "REL", "CPE")
    scalings: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    # spatial candidates are probed with the temporal extent pinned here
    probe_temporal: int = 120


@dataclass
class SearchStep:
    phase: str
    candidate: str
    config: ModelConfig
    mae: float
    selected: bool = False
    cached: bool = False


@dataclass
class SearchTrace:
    steps: list[SearchStep] = field(default_factory=list)
    final_config: ModelConfig | None = None
    evaluator_calls: int = 0

    def best_by_phase(self) -> list[tuple[str, float]]:
        out = []
        for phase in dict.fromkeys(s.phase for s in self.steps):
            sel = [s for s in self.steps if s.phase == phase and s.selected]
            out.append((phase, sel[0].mae))
        return out


def default_baseline() -> ModelConfig:
    """Unadapted starting point: rate output, raw frames, no temporal scaling."""
    return ModelConfig(input_dims=(120, 256, 256), output_format="HR",
                       frame_format="Raw", signal_norm=False,
                       pos_encoding="REL", scaling=0)


def general_config(simple: bool) -> ModelConfig:
    """The majority-vote configuration; targets are normalised only in simple scenarios."""
    return ModelConfig(input_dims=(120, 64, 64), output_format="Signal",
                       frame_format="DiffNorm", signal_norm=bool(simple),
                       pos_encoding="REL", scaling=2).validate()


def _config_key(cfg: ModelConfig):
    return (cfg.input_dims, cfg.output_format, cfg.frame_format, cfg.signal_norm,
            cfg.pos_encoding, cfg.scaling, cfg.base_width, cfg.stage_depths,
            cfg.heads_per_stage, cfg.mlp_ratio)


def greedy_adapt(evaluator: Callable[[ModelConfig], float],
                 space: DesignSpace | None = None,
                 start: ModelConfig | None = None) -> SearchTrace:
    """Run the six greedy phases, memoising evaluator calls by configuration."""
    space = space or DesignSpace()
    carried = (start or default_baseline()).copy()
    trace = SearchTrace()
    memo: dict[tuple, float] = {}

    def score(cfg: ModelConfig) -> tuple[float, bool]:
        key = _config_key(cfg)
        if key in memo:
            return memo[key], True
        trace.evaluator_calls += 1
        try:
            mae = float(evaluator(cfg))
            if math.isnan(mae):
                mae = math.inf
        except Exception:
            mae = math.inf
        memo[key] = mae
        return mae, False

    def run_phase(phase: str, candidates: list[tuple[str, ModelConfig]]) -> ModelConfig:
        steps = []
        for label, cfg in candidates:
            mae, cached = score(cfg)
            steps.append(SearchStep(phase=phase, candidate=label, config=cfg,
                                    mae=mae, cached=cached))
        best = min(range(len(steps)), key=lambda i: (steps[i].mae, i))
        steps[best].selected = True
        trace.steps.extend(steps)
        return steps[best].config

    t_probe = space.probe_temporal
    carried = run_phase("spatial", [
        (f"spatial={s}", carried.copy(input_dims=(t_probe, s, s)))
        for s in space.spatial])
    hw = carried.input_dims[1:]
    carried = run_phase("temporal", [
        (f"temporal={t}", carried.copy(input_dims=(t,) + hw))
        for t in space.temporal])
    carried = run_phase("output", [
        (f"output={o}", carried.copy(output_format=o)) for o in space.outputs])
    carried = run_phase("frame_norm", [
        (f"frame={f}{'+norm' if n else ''}", carried.copy(frame_format=f, signal_norm=n))
        for f, n in space.frame_norm])
    carried = run_phase("pos_encoding", [
        (f"pos={p}", carried.copy(pos_encoding=p)) for p in space.pos_encodings])
    carried = run_phase("scaling", [
        (scaling_label(s), carried.copy(scaling=s)) for s in space.scalings])

    trace.final_config = carried
    return trace
