"""Optimiser, split, training-loop, and evaluation tests."""

import numpy as np
import pytest

from pulseformer.errors import InputError, NumericError
from pulseformer.metrics import hr_from_signal
from pulseformer.model import ModelConfig
from pulseformer.preprocess import SignalTrace, WindowExample, make_example
from pulseformer.synth import SIMPLE, generate_dataset
from pulseformer.training import (AdamW, ConstantStub, LabelOffsetStub,
                                  ModelPredictor, PerfectStub, TrainConfig,
                                  adamw_update, evaluate, split_dataset,
                                  train_model)

TINY_CFG = ModelConfig(input_dims=(60, 32, 32), output_format="Signal",
                       frame_format="DiffNorm", signal_norm=True,
                       pos_encoding="REL", scaling=2, base_width=8,
                       stage_depths=(1, 1, 1, 1))


def reference_adamw(p, g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Textbook re-implementation used as the oracle."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(g_seq, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


class TestAdamW:
    def test_zero_gradient_pure_decay(self):
        p = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        adamw_update(p, np.zeros(1), m, v, t=1, lr=0.01, weight_decay=0.1)
        np.testing.assert_allclose(p, [0.999], rtol=1e-15)
        assert m[0] == 0.0 and v[0] == 0.0

    def test_single_step_closed_form(self):
        p = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        lr, eps = 0.01, 1e-8
        adamw_update(p, np.ones(1), m, v, t=1, lr=lr, eps=eps, weight_decay=0.0)
        np.testing.assert_allclose(p, [1.0 - lr * 1.0 / (1.0 + eps)], rtol=1e-15)

    def test_two_steps_match_reference(self):
        rng = np.random.default_rng(0)
        p0 = rng.standard_normal(5)
        g = [rng.standard_normal(5), rng.standard_normal(5)]
        p = p0.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for t, gt_ in enumerate(g, start=1):
            adamw_update(p, gt_, m, v, t=t, lr=0.05, weight_decay=0.02)
        np.testing.assert_allclose(p, reference_adamw(p0, g, lr=0.05, wd=0.02),
                                   atol=1e-12)

    def test_optimizer_skips_gradless_params(self):
        from pulseformer.tensor import Tensor
        params = {"a": Tensor(np.ones(2), requires_grad=True),
                  "b": Tensor(np.ones(2), requires_grad=True)}
        params["a"].grad = np.full(2, 0.5)
        opt = AdamW(params, lr=0.1)
        opt.step()
        assert not np.array_equal(params["a"].data, np.ones(2))
        np.testing.assert_array_equal(params["b"].data, np.ones(2))


class TestSplits:
    def test_intra_sizes_10(self):
        plan = split_dataset([f"s{i}" for i in range(10)], "intra", seed=0)
        assert (len(plan.groups["train"]), len(plan.groups["val"]),
                len(plan.groups["test"])) == (7, 1, 2)

    def test_cross_sizes_10(self):
        plan = split_dataset([f"s{i}" for i in range(10)], "cross", seed=0)
        assert (len(plan.groups["train"]), len(plan.groups["val"])) == (8, 2)

    def test_kfold_balanced_7(self):
        plan = split_dataset([f"s{i}" for i in range(7)], "kfold", seed=1, k=3)
        sizes = sorted(len(v) for v in plan.groups.values())
        assert sizes == [2, 2, 3]

    def test_partitions_disjoint_exhaustive(self):
        ids = [f"s{i}" for i in range(23)]
        for mode in ("intra", "cross", "kfold"):
            plan = split_dataset(ids, mode, seed=3)
            seen = [i for part in plan.groups.values() for i in part]
            assert sorted(seen) == sorted(ids)
            assert len(set(seen)) == len(seen)

    def test_deterministic_under_seed(self):
        ids = [f"s{i}" for i in range(12)]
        a = split_dataset(ids, "intra", seed=5).groups
        b = split_dataset(ids, "intra", seed=5).groups
        assert a == b
        c = split_dataset(ids, "intra", seed=6).groups
        assert a != c

    def test_too_few_ids_rejected(self):
        with pytest.raises(InputError):
            split_dataset(["a", "b"], "intra", seed=0)
        with pytest.raises(InputError):
            split_dataset(["a", "b"], "kfold", seed=0, k=3)


def _hr_example(hr, t=120, fps=30.0):
    ts = np.arange(t) / fps
    trace = np.sin(2 * np.pi * (hr / 60.0) * ts)
    return WindowExample(x=np.zeros((3, 4, 4, 4)), target=np.asarray(hr),
                         trace_window=trace, fps=fps, clip_id=f"hr{hr}")


class TestEvaluate:
    def _signal_examples(self, cfg, n=3, seed=0):
        data = generate_dataset(SIMPLE, n, 1, (60, 32, 32), 30.0, seed=seed)
        out = []
        for lc in data:
            exs = make_example(lc.clip, lc.trace, cfg)
            for ex in exs:
                ex.clip_id = lc.clip_id
                ex.subject_id = lc.subject_id
            out.extend(exs)
        return out

    def test_perfect_stub_zero_mae(self):
        examples = self._signal_examples(TINY_CFG)
        res = evaluate(PerfectStub(TINY_CFG), TINY_CFG, examples)
        assert res.mae <= 1e-9
        assert res.excluded_windows == 0

    def test_constant_stub_excluded_windows(self):
        examples = self._signal_examples(TINY_CFG)
        with pytest.raises(InputError):
            evaluate(ConstantStub(0.0), TINY_CFG, examples)

    def test_constant_hr_stub_mae_matches_hand_value(self):
        cfg = TINY_CFG.copy(output_format="HR")
        examples = [_hr_example(60.0), _hr_example(90.0), _hr_example(120.0)]
        res = evaluate(ConstantStub(90.0), cfg, examples)
        labels = [hr_from_signal(SignalTrace(e.trace_window, 30.0)).bpm
                  for e in examples]
        expect = np.mean([abs(90.0 - l) for l in labels])
        assert abs(res.mae - expect) <= 1e-9

    def test_label_offset_stub(self):
        cfg = TINY_CFG.copy(output_format="HR")
        examples = [_hr_example(h) for h in (60.0, 80.0, 100.0)]
        res = evaluate(LabelOffsetStub(3.0), cfg, examples)
        assert abs(res.mae - 3.0) <= 1e-9
        assert abs(res.rmse - 3.0) <= 1e-9
        assert res.pearson == pytest.approx(1.0)

    def test_empty_set_rejected(self):
        with pytest.raises(InputError):
            evaluate(PerfectStub(TINY_CFG), TINY_CFG, [])


class TestTrainModel:
    def _examples(self, cfg, subjects, seed):
        data = generate_dataset(SIMPLE, subjects, 1, (60, 32, 32), 30.0, seed=seed)
        out = []
        for lc in data:
            exs = make_example(lc.clip, lc.trace, cfg)
            for ex in exs:
                ex.clip_id = lc.clip_id
                ex.subject_id = lc.subject_id
            out.extend(exs)
        return out

    def test_loss_decreases_on_overfit_run(self):
        cfg = TINY_CFG.copy(base_width=8)
        train = self._examples(cfg, 8, seed=0)
        tcfg = TrainConfig(epochs=13, seed=0)   # 13 epochs x 2 batches = 26 steps
        model, hist = train_model(cfg, tcfg, train)
        losses = [row["train_loss"] for row in hist.epochs]
        assert losses[-1] < 0.5 * losses[0]
        assert all(np.isfinite(l) for l in losses)

    def test_empty_val_best_epoch_is_last(self):
        cfg = TINY_CFG.copy(base_width=8)
        train = self._examples(cfg, 4, seed=1)
        tcfg = TrainConfig(epochs=2, seed=0)
        _, hist = train_model(cfg, tcfg, train)
        assert hist.best_epoch == 1

    def test_same_seed_bit_identical_history(self):
        cfg = TINY_CFG.copy(base_width=8)
        train = self._examples(cfg, 4, seed=2)
        tcfg = TrainConfig(epochs=2, seed=0)
        _, h1 = train_model(cfg, tcfg, train)
        _, h2 = train_model(cfg, tcfg, train)
        assert h1.rows() == h2.rows()

    def test_empty_train_set_rejected(self):
        with pytest.raises(InputError):
            train_model(TINY_CFG, TrainConfig(), [])

    def test_non_finite_loss_diagnostic(self):
        cfg = TINY_CFG.copy(base_width=8)
        train = self._examples(cfg, 4, seed=3)
        for ex in train:
            ex.target = ex.target * np.inf
        with pytest.raises(NumericError, match="epoch 0 step 0"):
            train_model(cfg, TrainConfig(epochs=1, seed=0), train)

    def test_validation_selects_best_epoch(self):
        cfg = TINY_CFG.copy(base_width=8)
        train = self._examples(cfg, 6, seed=4)
        val = self._examples(cfg, 2, seed=5)
        tcfg = TrainConfig(epochs=3, seed=0)
        model, hist = train_model(cfg, tcfg, train, val_examples=val)
        maes = [row["val_mae"] for row in hist.epochs]
        assert hist.best_epoch == int(np.argmin(maes))
