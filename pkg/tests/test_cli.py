import csv
import json

import numpy as np
import pytest

from qcontrast import config
from qcontrast.cli import main
from qcontrast.config import RunConfig
from qcontrast.errors import ConfigurationError

SMOKE = """{
  // smoke run: 2 classes, 64-sample windows, 2 epochs
  "schema_version": 1,
  "seed": 3,
  "out_dir": "run",
  "data": {"n_classes": 2, "window": 64, "recording_length": 4000, "noise_std": 0.3},
  "split": {"n_normal": 20, "ib_rate": 2, "n_eval_per_class": 8},
  "model": {"channels": [4, 4, 8]},
  "train": {"epochs": 2, "batch_size": 8}  # comments after values too
}
"""


@pytest.fixture
def smoke(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "smoke.json"
    path.write_text(SMOKE)
    return path


class TestConfig:
    def test_round_trip(self):
        cfg = config.loads(SMOKE)
        again = config.loads(cfg.dumps())
        assert again == cfg
        assert again.to_dict() == cfg.to_dict()

    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg

    def test_comment_markers_inside_strings(self):
        text = SMOKE.replace('"out_dir": "run"', '"out_dir": "runs/#1//a"')
        assert config.loads(text).out_dir == "runs/#1//a"

    def test_parse_error_has_line(self):
        text = SMOKE.replace('"seed": 3,', '"seed": 3')
        with pytest.raises(ConfigurationError, match=r"<config>:5:3:"):
            config.loads(text)

    def test_schema_version_mandatory(self):
        with pytest.raises(ConfigurationError, match="schema_version"):
            config.loads('{"seed": 1}')
        with pytest.raises(ConfigurationError, match="unsupported"):
            config.loads('{"schema_version": 9}')

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="train.epoch"):
            config.loads('{"schema_version": 1, "train": {"epoch": 3}}')

    def test_seed_only_at_top(self):
        with pytest.raises(ConfigurationError, match="top level"):
            config.loads('{"schema_version": 1, "train": {"seed": 3}}')

    def test_seed_flows_to_train(self):
        cfg = config.loads(SMOKE)
        assert cfg.train_config().seed == 3
        assert cfg.model_config().backbone.input_len == 64


def run(*args):
    return main([str(a) for a in args])


class TestGenData:
    def test_files_and_refusal(self, smoke, tmp_path, capsys):
        assert run("gen-data", "--config", smoke, "--out", "ds") == 0
        names = sorted(p.name for p in (tmp_path / "ds").iterdir())
        assert names == ["class_00.f32", "class_01.f32", "manifest.json"]
        assert "period" in capsys.readouterr().out
        assert run("gen-data", "--config", smoke, "--out", "ds") != 0
        assert run("gen-data", "--config", smoke, "--out", "ds", "--force") == 0

    def test_same_seed_same_bytes(self, smoke, tmp_path):
        run("gen-data", "--config", smoke, "--out", "a")
        run("gen-data", "--config", smoke, "--out", "b")
        run("gen-data", "--config", smoke, "--out", "c", "--seed", "4")
        a, b, c = ((tmp_path / d / "class_01.f32").read_bytes() for d in "abc")
        assert a == b and a != c

    def test_ten_classes(self, smoke, tmp_path):
        cfg = json.loads(config.strip_comments(SMOKE))
        cfg["data"]["n_classes"] = 10
        (tmp_path / "ten.json").write_text(json.dumps(cfg))
        assert run("gen-data", "--config", tmp_path / "ten.json", "--out", "ten") == 0
        manifest = json.loads((tmp_path / "ten" / "manifest.json").read_text())
        assert len(manifest["files"]) == 10


class TestTrainEval:
    def test_smoke_pipeline(self, smoke, tmp_path):
        assert run("train", "--config", smoke) == 0
        out = tmp_path / "run"
        assert {"config.json", "stats.csv", "best.ckpt", "report.json", "split.log"} <= {p.name for p in out.iterdir()}
        rows = list(csv.DictReader((out / "stats.csv").open()))
        assert len(rows) == 2
        log = (out / "split.log").read_text()
        assert "train\tclass 1\t10" in log

        assert run("eval", out) == 0
        report = json.loads((out / "eval" / "report.json").read_text())
        trained = json.loads((out / "report.json").read_text())
        assert report["f1"] == trained["f1"]
        cm = np.loadtxt(out / "eval" / "confusion.csv", delimiter=",", skiprows=1)[:, 1:]
        np.testing.assert_array_equal(cm.sum(axis=1), [8, 8])
        features = list(csv.reader((out / "eval" / "features.csv").open()))
        assert len(features) == 1 + 16 and len(features[0]) == 2 + 64

        assert run("eval", out, "--variant", "no_power", "--force") == 2

    def test_train_from_generated_dataset(self, smoke, tmp_path):
        run("gen-data", "--config", smoke, "--out", "ds")
        assert run("train", "--config", smoke, "--data", "ds", "--out", "r2", "--neuron", "conventional") == 0
        saved = json.loads((tmp_path / "r2" / "config.json").read_text())
        assert saved["model"]["neuron"] == "conventional"

    def test_ib_flag(self, smoke, tmp_path):
        assert run("train", "--config", smoke, "--ib-rate", "4", "--out", "r3") == 0
        assert "train\tclass 1\t5" in (tmp_path / "r3" / "split.log").read_text()

    def test_divergence_exit_code(self, smoke, tmp_path):
        text = SMOKE.replace('"epochs": 2', '"epochs": 2, "base_lr": 1e200')
        (tmp_path / "bad.json").write_text(text)
        with np.errstate(all="ignore"):
            assert run("train", "--config", tmp_path / "bad.json", "--out", "r4") == 3

    def test_parse_error_exit(self, smoke, tmp_path, capsys):
        (tmp_path / "broken.json").write_text(SMOKE.replace('"seed": 3,', '"seed": 3'))
        assert run("train", "--config", tmp_path / "broken.json") == 2
        assert "broken.json:5:3:" in capsys.readouterr().err


class TestAutocorrCommand:
    def test_analytic(self, smoke, tmp_path):
        assert run("autocorr", "--config", smoke, "--analytic", "--out", "ac", "--length", "128", "--trials", "100") == 0
        ac = np.loadtxt(tmp_path / "ac" / "autocorr.csv", delimiter=",", skiprows=1)
        np.testing.assert_allclose(ac[:, 1], ac[:, 2], atol=1e-9)
        dec = np.loadtxt(tmp_path / "ac" / "decomposition.csv", delimiter=",", skiprows=1)
        np.testing.assert_allclose(dec[:, 4], dec[:, 5], atol=1e-10)

    def test_clean_run_zero_deviation(self, smoke, tmp_path):
        args = ("autocorr", "--config", smoke, "--analytic", "--length", "128", "--trials", "100", "--noise-std", "0")
        assert run(*args, "--out", "ac") == 0
        noise = np.loadtxt(tmp_path / "ac" / "noise_report.csv", delimiter=",", skiprows=1)
        assert not noise[:, 3].any()

    def test_checkpoint_slice(self, smoke, tmp_path):
        run("train", "--config", smoke)
        args = ("autocorr", "--config", tmp_path / "run" / "config.json", "--checkpoint", tmp_path / "run" / "best.ckpt")
        assert run(*args, "--out", "ac", "--length", "128", "--trials", "100", "--channel", "2") == 0
        dec = np.loadtxt(tmp_path / "ac" / "decomposition.csv", delimiter=",", skiprows=1)
        assert len(dec) == 64  # stride-2 stem
        np.testing.assert_allclose(dec[:, 4], dec[:, 5], atol=1e-10)

    def test_conventional_checkpoint_refused(self, smoke, tmp_path, capsys):
        run("train", "--config", smoke, "--neuron", "conventional")
        args = ("autocorr", "--config", tmp_path / "run" / "config.json", "--checkpoint", tmp_path / "run" / "best.ckpt")
        assert run(*args, "--out", "ac", "--length", "128", "--trials", "100") == 2
        assert "quadratic" in capsys.readouterr().err
