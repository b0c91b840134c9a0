"""File-format round trips and CLI behaviour."""

import json
from pathlib import Path

import numpy as np
import pytest

from pulseformer import fileio
from pulseformer.cli import main
from pulseformer.errors import InputError
from pulseformer.model import ModelConfig
from pulseformer.preprocess import SignalTrace, VideoClip
from pulseformer.training import TrainConfig

MICRO_CONFIG = {
    "input_dims": [60, 32, 32],
    "base_width": 8,
    "stage_depths": [1, 1, 1, 1],
    "epochs": 1,
    "seed": 0,
    "split_mode": "cross",
}


def _write_micro_config(tmp_path) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(MICRO_CONFIG))
    return path


class TestBinaryFormats:
    def test_clip_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.random((5, 4, 6, 3)).astype(np.float32).astype(np.float64)
        clip = VideoClip(frames, 30.0)
        path = tmp_path / "c.gvtc"
        fileio.write_clip(path, clip)
        again = fileio.read_clip(path)
        np.testing.assert_array_equal(again.frames, frames)
        assert again.fps == 30.0
        fileio.write_clip(tmp_path / "c2.gvtc", again)
        assert (tmp_path / "c.gvtc").read_bytes() == (tmp_path / "c2.gvtc").read_bytes()

    def test_trace_round_trip_bit_exact(self, tmp_path):
        samples = np.linspace(-1, 1, 77, dtype=np.float32).astype(np.float64)
        path = tmp_path / "t.gvts"
        fileio.write_trace(path, SignalTrace(samples, 30.0))
        again = fileio.read_trace(path)
        np.testing.assert_array_equal(again.samples, samples)

    def test_checkpoint_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"stem.w": rng.standard_normal((4, 3, 3, 7, 7)),
                  "head.out.b": rng.standard_normal(1),
                  "bn.running_mean": rng.standard_normal(8)}
        path = tmp_path / "m.gvtm"
        fileio.write_checkpoint(path, arrays)
        again = fileio.read_checkpoint(path)
        assert list(again) == list(arrays)
        for name in arrays:
            np.testing.assert_array_equal(again[name], arrays[name])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gvtc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(InputError, match="magic"):
            fileio.read_clip(path)

    def test_truncated_payload_rejected(self, tmp_path):
        clip = VideoClip(np.zeros((2, 2, 2, 3)), 30.0)
        path = tmp_path / "c.gvtc"
        fileio.write_clip(path, clip)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(InputError):
            fileio.read_clip(path)


class TestConfigDocuments:
    def test_round_trip_defaults(self):
        doc = fileio.config_to_dict(ModelConfig(), TrainConfig())
        mc, tc, split_mode, fold = fileio.config_from_dict(doc)
        assert mc == ModelConfig()
        assert tc == TrainConfig()
        assert (split_mode, fold) == ("intra", 0)

    def test_scaling_serialised_as_label(self):
        doc = fileio.config_to_dict(ModelConfig(scaling=2), TrainConfig())
        assert doc["scaling"] == "Scale-2"
        assert doc["input_dims"] == [120, 64, 64]

    def test_unknown_key_named(self):
        with pytest.raises(InputError, match="lernrate"):
            fileio.config_from_dict({"lernrate": 1})

    def test_bad_value_rejected(self):
        with pytest.raises(InputError):
            fileio.config_from_dict({"input_dims": "huge"})


class TestCliGen:
    def test_gen_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "d"
        rc = main(["gen", "--preset", "simple", "--subjects", "4",
                   "--clips-per-subject", "4", "--dims", "60x8x8",
                   "--fps", "30", "--seed", "0", "--out", str(out)])
        assert rc == 0
        clips = sorted(out.glob("*.gvtc"))
        traces = sorted(out.glob("*.gvts"))
        assert len(clips) == 16 and len(traces) == 16
        entries, metadata = fileio.read_manifest(out / "manifest.json")
        assert len(entries) == 16
        assert metadata["preset"] == "simple"

    def test_gen_byte_identical_same_seed(self, tmp_path):
        for name in ("a", "b"):
            rc = main(["gen", "--preset", "hard", "--subjects", "2",
                       "--clips-per-subject", "1", "--dims", "60x8x8",
                       "--seed", "7", "--out", str(tmp_path / name)])
            assert rc == 0
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_gen_zero_dim_usage_error(self, tmp_path, capsys):
        rc = main(["gen", "--preset", "simple", "--subjects", "1",
                   "--clips-per-subject", "1", "--dims", "0x64x64",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "dims" in capsys.readouterr().err

    def test_unknown_command_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    rc = main(["gen", "--preset", "simple", "--subjects", "10",
               "--clips-per-subject", "1", "--dims", "60x32x32",
               "--fps", "30", "--seed", "0", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def micro_run(micro_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "r"
    cfg = tmp_path_factory.mktemp("cfg") / "cfg.json"
    cfg.write_text(json.dumps(MICRO_CONFIG))
    rc = main(["train", "--data", str(micro_dataset), "--config", str(cfg),
               "--out", str(run)])
    assert rc == 0
    return run


class TestCliTrainEval:
    def test_run_directory_layout(self, micro_run):
        for name in ("config.json", "history.csv", "pairs.csv",
                     "metrics.json", "model.gvtm"):
            assert (micro_run / name).exists(), name

    def test_config_echo_reproducible_fields(self, micro_run):
        doc = json.loads((micro_run / "config.json").read_text())
        assert doc["scaling"] == "Scale-2"
        assert doc["input_dims"] == [60, 32, 32]
        assert doc["epochs"] == 1
        assert doc["split_mode"] == "cross"

    def test_metrics_json_shape(self, micro_run):
        doc = json.loads((micro_run / "metrics.json").read_text())
        assert set(doc) == {"mae", "rmse", "pearson", "excluded_windows"}
        assert doc["rmse"] >= doc["mae"] >= 0.0

    def test_pairs_csv_header(self, micro_run):
        lines = (micro_run / "pairs.csv").read_text().splitlines()
        assert lines[0] == "clip_id,pred_bpm,label_bpm"
        assert len(lines) > 1

    def test_eval_checkpoint_round_trip(self, micro_run, micro_dataset, capsys):
        rc = main(["eval", "--run", str(micro_run), "--data", str(micro_dataset)])
        assert rc == 0
        assert "mae" in capsys.readouterr().out

    def test_eval_perfect_stub_zero_mae(self, micro_run, micro_dataset):
        rc = main(["eval", "--run", str(micro_run), "--data", str(micro_dataset),
                   "--stub", "perfect"])
        assert rc == 0
        doc = json.loads((micro_run / "metrics.json").read_text())
        assert doc["mae"] <= 1e-9

    def test_eval_missing_run_data_error(self, micro_dataset, tmp_path, capsys):
        rc = main(["eval", "--run", str(tmp_path / "nope"), "--data", str(micro_dataset)])
        assert rc == 2
        assert "data error" in capsys.readouterr().err

    def test_train_missing_manifest_data_error(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_train_malformed_config_names_key(self, micro_dataset, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"lerning_rate": 0.1}))
        rc = main(["train", "--data", str(micro_dataset), "--config", str(cfg),
                   "--out", str(tmp_path / "r")])
        assert rc == 2
        assert "lerning_rate" in capsys.readouterr().err


class TestCliGradcheck:
    def test_gradcheck_passes(self, capsys):
        rc = main(["gradcheck"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "model_end_to_end" in out
        assert "FAIL" not in out
