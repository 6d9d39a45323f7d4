import json

import numpy as np
import pytest

from mitoseg.cli import main
from mitoseg.config import ConfigError, config_from_dict, load_config
from mitoseg.data import load_label_volume, save_label_volume, save_volume
from mitoseg.postproc import LabelVolume


def minimal_raw(**overrides):
    raw = {
        "seed": 3,
        "iterations": 3,
        "model": {
            "channels": [2, 3, 4, 5],
            "patch_shape": [4, 16, 16],
            "attn_encoder": [False, False, False, True],
            "attn_decoder": [False, False, False],
        },
        "data": {"synth": {"dims": [8, 32, 32], "instance_range": [2, 3], "axis_range_hw": [3.0, 5.5], "axis_range_t": [1.5, 2.5]}},
    }
    raw.update(overrides)
    return raw


class TestConfigValidation:
    def test_minimal_config_parses(self):
        cfg = config_from_dict(minimal_raw())
        assert cfg.iterations == 3
        assert cfg.model.channels == (2, 3, 4, 5)

    def test_unknown_root_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key.*'learning_rate'"):
            config_from_dict(minimal_raw(learning_rate=0.1))

    def test_unknown_nested_key_named_with_path(self):
        raw = minimal_raw()
        raw["optimizer"] = {"lr": 1e-4, "momentum": 0.9}
        with pytest.raises(ConfigError, match="config.optimizer.*momentum"):
            config_from_dict(raw)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError, match="iterations"):
            config_from_dict(minimal_raw(iterations=0))

    def test_bad_lr_named(self):
        raw = minimal_raw()
        raw["optimizer"] = {"lr": 0.0}
        with pytest.raises(ConfigError, match="optimizer.lr"):
            config_from_dict(raw)

    def test_bad_enum_value_surfaces(self):
        raw = minimal_raw()
        raw["model"]["fusion"] = "mystery"
        with pytest.raises(ConfigError, match="config.model"):
            config_from_dict(raw)

    def test_data_requires_source(self):
        raw = minimal_raw()
        raw["data"] = {}
        with pytest.raises(ConfigError, match="data"):
            config_from_dict(raw)

    def test_round_trip_through_dict(self):
        cfg = config_from_dict(minimal_raw())
        again = config_from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_load_config_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(bad)


class TestCliFlows:
    def test_invalid_config_exits_1(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(minimal_raw(iterations=0)))
        code = main(["train", "--config", str(cfg_path), "--out-dir", str(tmp_path / "run")])
        assert code == 1
        assert "iterations" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        code = main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b")])
        assert code == 2

    def test_bad_arguments_exit_1(self, capsys):
        assert main(["train"]) == 1

    def test_synth_train_infer_eval_pipeline(self, tmp_path, capsys):
        # synth
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"dims": [8, 32, 32], "instance_range": [2, 3], "axis_range_hw": [3.0, 5.5], "axis_range_t": [1.5, 2.5]}))
        assert main(["synth", "--spec", str(spec_path), "--seed", "5", "--out", str(tmp_path / "syn")]) == 0
        labels = load_label_volume(tmp_path / "syn_labels")
        assert labels.instance_count >= 2

        # train a tiny model on the same generator settings
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(minimal_raw()))
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out-dir", str(run_dir)]) == 0
        assert (run_dir / "checkpoint.zip").exists()
        log_lines = (run_dir / "log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == 3
        assert set(json.loads(log_lines[0])) >= {"iter", "bce", "gen_loss", "disc_loss"}

        # infer on a volume equal to one patch
        vol = np.random.default_rng(0).random((4, 16, 16)).astype(np.float32)
        save_volume(tmp_path / "vol", vol)
        code = main([
            "infer", "--ckpt", str(run_dir / "checkpoint.zip"),
            "--in", str(tmp_path / "vol"), "--out", str(tmp_path / "pred"),
            "--scores", str(tmp_path / "scores.json"),
        ])
        assert code == 0
        pred = load_label_volume(tmp_path / "pred")
        scores = json.loads((tmp_path / "scores.json").read_text())
        assert len(scores) == pred.instance_count

        # eval gt against itself: perfect report
        gt_path = save_label_volume(tmp_path / "gt", labels)
        json_out = tmp_path / "report.json"
        assert main(["eval", "--pred", str(gt_path), "--gt", str(gt_path), "--json", str(json_out)]) == 0
        report = json.loads(json_out.read_text())
        assert report["ap75"] == report["jaccard"] == report["dsc"] == 1.0

    def test_eval_all_background_scores_zero(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = np.zeros((4, 8, 8), dtype=np.int32)
        arr[1, 2:5, 2:5] = 1
        gt = LabelVolume.from_array(arr)
        empty = LabelVolume.from_array(np.zeros((4, 8, 8), dtype=np.int32))
        save_label_volume(tmp_path / "gt", gt)
        save_label_volume(tmp_path / "pred", empty)
        json_out = tmp_path / "r.json"
        assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--json", str(json_out)]) == 0
        report = json.loads(json_out.read_text())
        assert report["ap75"] == report["jaccard"] == report["dsc"] == 0.0

    def test_eval_dimension_mismatch_exits_2(self, tmp_path, capsys):
        a = LabelVolume.from_array(np.zeros((2, 4, 4), dtype=np.int32))
        b = LabelVolume.from_array(np.zeros((2, 4, 8), dtype=np.int32))
        save_label_volume(tmp_path / "a", a)
        save_label_volume(tmp_path / "b", b)
        assert main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b")]) == 2

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg6 = minimal_raw(iterations=6)
        cfg3 = minimal_raw(iterations=3)
        (tmp_path / "c6.json").write_text(json.dumps(cfg6))
        (tmp_path / "c3.json").write_text(json.dumps(cfg3))
        assert main(["train", "--config", str(tmp_path / "c6.json"), "--out-dir", str(tmp_path / "full")]) == 0
        assert main(["train", "--config", str(tmp_path / "c3.json"), "--out-dir", str(tmp_path / "half")]) == 0
        assert main([
            "train", "--config", str(tmp_path / "c6.json"), "--out-dir", str(tmp_path / "rest"),
            "--resume", str(tmp_path / "half" / "checkpoint.zip"),
        ]) == 0
        full = (tmp_path / "full" / "log.jsonl").read_text().strip().splitlines()
        rest = (tmp_path / "rest" / "log.jsonl").read_text().strip().splitlines()
        assert full[3:] == rest
