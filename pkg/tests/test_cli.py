import json

import numpy as np
import pytest

from crm_toolkit.cli import main
from crm_toolkit.storage import load_dataset, read_csv

SMALL = {
    "Seeds": [0],
    "Aed": {"Kind": "orthogonal", "Cardinalities": [2, 2], "AmbientDim": 6},
    "Scenario": {"Drop": [[0, 0]], "TrainSamples": 2000, "TestSamples": 500},
    "Train": {"Steps": 200, "LearningRate": 0.01, "BatchSize": 128},
}


class TestHull:
    def test_member(self, capsys):
        code = main(["hull", "member", "--cards", "2", "2", "--train", "1,1;1,0;0,0", "--candidate", "0,1"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["is_member"] is True
        np.testing.assert_allclose(out["coefficients"], [1.0, -1.0, 1.0], atol=1e-9)

    def test_enumerate(self, capsys):
        assert main(["hull", "enumerate", "--cards", "3", "3", "--train", "0,0;1,1;2,2"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out == {"hull": [[0, 0], [1, 1], [2, 2]], "size": 3, "grid": 9}

    def test_components_and_span(self, capsys):
        assert main(["hull", "components", "--cards", "3", "3", "--train", "0,0;0,1;2,2"]) == 0
        assert json.loads(capsys.readouterr().out) == {"components": [[[0, 0], [0, 1]], [[2, 2]]]}
        assert main(["hull", "span", "--cards", "3", "3"]) == 0
        assert len(json.loads(capsys.readouterr().out)["groups"]) == 5

    def test_witness(self, capsys):
        assert main(["hull", "witness", "--cards", "3", "3", "--train", "0,0;1,1", "--candidate", "0,1"]) == 0
        assert len(json.loads(capsys.readouterr().out)["witness"]) == 7

    def test_witness_uses_configured_tolerance(self, settings_file, capsys):
        cfg = settings_file({"MembershipTolerance": 10.0})
        args = ["hull", "witness", "--cards", "3", "3", "--train", "0,0;1,1", "--candidate", "0,1"]
        assert main(["--config", str(cfg)] + args) == 0
        assert json.loads(capsys.readouterr().out) == {"witness": None}

    def test_input_errors_exit_2(self, capsys):
        assert main(["hull", "member", "--cards", "2", "2", "--train", "0,0"]) == 2
        assert main(["hull", "member", "--cards", "2", "2", "--train", "0,x", "--candidate", "0,1"]) == 2
        assert main(["hull", "member", "--cards", "2", "2", "--train", "0,3", "--candidate", "0,1"]) == 2
        assert main(["hull", "span", "--cards", "2", "2", "2"]) == 2
        assert main(["hull", "enumerate", "--cards", "2", "2", "--train", ""]) == 2


class TestConfigErrors:
    def test_missing_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json"), "hull", "span", "--cards", "2", "2"]) == 2

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        assert main(["--config", str(bad), "hull", "span", "--cards", "2", "2"]) == 2

    @pytest.mark.parametrize("section", ["Train", "HullGrowth", "Aed"])
    def test_null_section(self, settings_file, tmp_path, section):
        cfg = settings_file({**SMALL, section: None})
        assert main(["--config", str(cfg), "--out", str(tmp_path / "o"), "gen"]) == 2

    def test_bad_threads(self, settings_file, tmp_path):
        cfg = settings_file(SMALL)
        assert main(["--config", str(cfg), "--threads", "0", "--out", str(tmp_path / "o"), "gen"]) == 2

    def test_unknown_log_level(self):
        assert main(["--log-level", "LOUD", "hull", "span", "--cards", "2", "2"]) == 2


class TestDataRoundTrip:
    def test_gen_train_predict_eval(self, settings_file, tmp_path, capsys):
        cfg = str(settings_file(SMALL))
        data, bundle = tmp_path / "data", tmp_path / "bundle"
        assert main(["--config", cfg, "--out", str(data), "gen"]) == 0
        assert (data / "scenario.json").exists()
        assert len(load_dataset(data / "train")) == 2000
        assert len(load_dataset(data / "test")) == 500

        assert main(["--config", cfg, "train", "--data", str(data), "--bundle", str(bundle)]) == 0
        assert (bundle / "predictor.json").exists()
        assert (bundle / "b_star.csv").exists()

        out_csv = tmp_path / "post.csv"
        assert main(["--config", cfg, "predict", "--bundle", str(bundle), "--data", str(data / "test"),
                     "--output", str(out_csv)]) == 0
        rows = read_csv(out_csv)
        assert rows[0] == ["0 0", "0 1", "1 0", "1 1"]
        assert len(rows) == 501
        np.testing.assert_allclose([sum(float(v) for v in r) for r in rows[1:]], 1.0)

        capsys.readouterr()
        report_dir = tmp_path / "report"
        assert main(["--config", cfg, "--out", str(report_dir), "eval", "--bundle", str(bundle),
                     "--data", str(data / "test")]) == 0
        assert "worst-group" in capsys.readouterr().out
        report = json.loads((report_dir / "report.json").read_text(encoding="utf-8"))
        assert report["method"] == "CRM"
        assert len(report["groups"]) == 4

    def test_gen_is_deterministic(self, settings_file, tmp_path):
        cfg = str(settings_file(SMALL))
        assert main(["--config", cfg, "--out", str(tmp_path / "a"), "gen"]) == 0
        assert main(["--config", cfg, "--out", str(tmp_path / "b"), "gen"]) == 0
        for rel in ("scenario.json", "train/features.bin", "train/labels.csv", "test/header.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_missing_bundle(self, tmp_path):
        data = tmp_path / "nothing"
        assert main(["predict", "--bundle", str(tmp_path / "none"), "--data", str(data)]) == 2


class TestExp:
    def test_check_failure_exits_4(self, settings_file, tmp_path):
        cfg = settings_file({"Seeds": [0], "HullGrowth": {"Cardinalities": [[10, 10]], "Trials": 20,
                                                          "MaxSamples": 5, "C": [2], "RandomizedTrials": 200}})
        args = ["--config", str(cfg), "--out", str(tmp_path / "o")]
        assert main(args + ["exp", "hull-growth"]) == 0
        assert main(args + ["--check", "exp", "hull-growth"]) == 4
        acceptance = json.loads((tmp_path / "o" / "hull-growth" / "acceptance.json").read_text(encoding="utf-8"))
        assert acceptance["passed"] is False
        assert acceptance["checks"]["10x10:seed0:markov_c2"]["passed"] is False

    def test_seed_flag_overrides_seed_list(self, settings_file, tmp_path):
        cfg = settings_file({"Seeds": [0, 1, 2], "HullGrowth": {"Cardinalities": [[2, 2]], "Trials": 4000,
                                                                "MaxSamples": 200, "C": [2]}})
        assert main(["--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o"), "--check",
                     "exp", "hull-growth"]) == 0
        manifest = json.loads((tmp_path / "o" / "hull-growth" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seeds"] == [5]

    def test_unknown_kind_is_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(["exp", "everything"])
