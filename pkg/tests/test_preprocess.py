"""Preprocessing oracles: frame formats, normalisation, resizing, windowing."""

import numpy as np
import pytest

from pulseformer.errors import InputError
from pulseformer.preprocess import (SignalTrace, VideoClip, diff_labels,
                                    diffnorm_frames, make_example,
                                    resize_bilinear, standardize)
from pulseformer.search import general_config


def _clip_from_scalar(values, fps=30.0):
    v = np.asarray(values, dtype=np.float64)
    return VideoClip(v.reshape(-1, 1, 1, 1).repeat(3, axis=3), fps)


class TestDiffNorm:
    def test_constant_clip_all_zero(self):
        clip = _clip_from_scalar(np.full(6, 0.4))
        out = diffnorm_frames(clip)
        assert out.length == 6
        np.testing.assert_array_equal(out.frames, 0.0)

    def test_alternating_pattern(self):
        clip = _clip_from_scalar([0.2, 0.6, 0.2, 0.6, 0.2])
        out = diffnorm_frames(clip)
        got = out.frames[:, 0, 0, 0]
        np.testing.assert_allclose(got, [1.0, -1.0, 1.0, -1.0, 0.0], atol=1e-6)

    def test_boundary_two_frames(self):
        clip = _clip_from_scalar([0.2, 0.6])
        out = diffnorm_frames(clip)
        assert out.length == 2
        assert np.all(out.frames[1] == 0.0)

    def test_too_short_rejected(self):
        with pytest.raises(InputError):
            VideoClip(np.zeros((1, 2, 2, 3)), 30.0)

    def test_unit_global_std(self):
        rng = np.random.default_rng(0)
        clip = VideoClip(rng.random((12, 4, 4, 3)), 30.0)
        out = diffnorm_frames(clip)
        assert abs(out.frames[:-1].std() - 1.0) < 1e-6

    def test_invariant_to_global_scaling(self):
        rng = np.random.default_rng(1)
        frames = 0.2 + 0.5 * rng.random((10, 3, 3, 3))
        a = diffnorm_frames(VideoClip(frames, 30.0))
        b = diffnorm_frames(VideoClip(0.37 * frames, 30.0))
        np.testing.assert_allclose(a.frames, b.frames, atol=1e-9)


class TestStandardize:
    def test_constant_guard(self):
        np.testing.assert_array_equal(standardize(np.array([5.0, 5.0, 5.0])), 0.0)

    def test_population_std(self):
        np.testing.assert_allclose(standardize(np.array([1.0, 2.0, 3.0])),
                                   [-1.22474487, 0.0, 1.22474487], atol=1e-6)

    def test_moments(self):
        rng = np.random.default_rng(2)
        y = standardize(rng.random(100))
        assert abs(y.mean()) <= 1e-12
        assert abs(y.std() - 1.0) <= 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        y = standardize(rng.random(50))
        np.testing.assert_allclose(standardize(y), y, atol=1e-12)


class TestDiffLabels:
    def test_constant_trace(self):
        out = diff_labels(SignalTrace(np.full(5, 2.0), 30.0))
        np.testing.assert_array_equal(out.samples, 0.0)

    def test_hand_example(self):
        out = diff_labels(SignalTrace([1.0, 2.0, 4.0], 30.0))
        np.testing.assert_allclose(out.samples, [-1.0, 1.0, 0.0], atol=1e-12)

    def test_linear_ramp(self):
        out = diff_labels(SignalTrace(np.arange(10.0), 30.0))
        np.testing.assert_array_equal(out.samples, 0.0)


class TestResize:
    def test_same_size_identity(self):
        rng = np.random.default_rng(4)
        clip = VideoClip(rng.random((3, 4, 5, 3)), 30.0)
        out = resize_bilinear(clip, 4, 5)
        np.testing.assert_array_equal(out.frames, clip.frames)

    def test_two_by_two_to_one(self):
        f = np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 2, 2, 1).repeat(2, axis=0)
        out = resize_bilinear(VideoClip(np.repeat(f, 3, axis=3), 30.0), 1, 1)
        np.testing.assert_allclose(out.frames, 3.0, atol=1e-12)

    def test_constant_stays_constant(self):
        clip = VideoClip(np.full((2, 5, 7, 3), 0.3), 30.0)
        for hw in ((2, 2), (9, 11), (1, 1)):
            out = resize_bilinear(clip, *hw)
            np.testing.assert_allclose(out.frames, 0.3, atol=1e-12)


class TestMakeExample:
    def test_general_config_windowing(self):
        cfg = general_config(simple=True)
        rng = np.random.default_rng(5)
        clip = VideoClip(0.3 + 0.4 * rng.random((360, 32, 32, 3)), 30.0)
        trace = SignalTrace(np.sin(2 * np.pi * 1.5 * np.arange(360) / 30.0), 30.0)
        examples = make_example(clip, trace, cfg)
        assert len(examples) == 3
        for ex in examples:
            assert ex.x.shape == (3, 120, 64, 64)
            assert ex.target.shape == (120,)

    def test_hr_target_matches_planted(self):
        cfg = general_config(simple=True)
        cfg.output_format = "HR"
        cfg.input_dims = (120, 32, 32)
        rng = np.random.default_rng(6)
        clip = VideoClip(0.3 + 0.4 * rng.random((120, 8, 8, 3)), 30.0)
        trace = SignalTrace(np.sin(2 * np.pi * 1.5 * np.arange(120) / 30.0), 30.0)
        (ex,) = make_example(clip, trace, cfg)
        assert abs(float(ex.target) - 90.0) <= 0.5

    def test_raw_no_norm_passthrough(self):
        cfg = general_config(simple=False)
        cfg.frame_format = "Raw"
        cfg.input_dims = (60, 32, 32)
        rng = np.random.default_rng(7)
        clip = VideoClip(0.3 + 0.4 * rng.random((60, 32, 32, 3)), 30.0)
        tr = rng.random(60)
        (ex,) = make_example(clip, SignalTrace(tr, 30.0), cfg)
        np.testing.assert_array_equal(ex.target, tr)
        assert abs(ex.x.mean()) < 1e-12  # frames standardized

    def test_short_trace_rejected(self):
        cfg = general_config(simple=True)
        rng = np.random.default_rng(8)
        clip = VideoClip(rng.random((120, 8, 8, 3)), 30.0)
        with pytest.raises(InputError):
            make_example(clip, SignalTrace(np.zeros(100), 30.0), cfg)
