import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from softquant.cli import NO_SHIFT_THRESHOLD, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated source/target files and a trained model, shared by the module."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--scenario", "subclass", "--n", "6000", "--seed", "1", "--out", str(d), "--name", "source"]) == 0
    assert main(["generate", "--scenario", "subclass", "--n", "3000", "--seed", "2", "--out", str(d), "--name", "target"]) == 0
    assert main(["train", "--data", str(d / "source.csv"), "--classes", "8", "--hidden", "16", "--epochs", "4",
                 "--learning-rate", "0.2", "--seed", "0", "--out", str(d)]) == 0
    return d


class TestGenerate:
    def test_outputs(self, workdir):
        header = (workdir / "source.csv").read_text().splitlines()[0]
        assert header.endswith(",label") and header.startswith("f0,f1,")
        side = json.loads((workdir / "source.json").read_text())
        assert side["n"] == 6000 and len(side["true_priors"]) == 8
        assert "timestamp" in json.loads((workdir / "meta.json").read_text())

    def test_rerun_byte_identical(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "generate", "--scenario", "subclass", "--n", 6000, "--seed", 1,
                         "--out", tmp_path, "--name", "source")
        assert code == 0
        for f in ("source.csv", "source.json"):
            assert digest(tmp_path / f) == digest(workdir / f)

    def test_custom_spec_and_shift(self, tmp_path, capsys):
        spec = {"num_classes": 2, "class_priors": [0.5, 0.5],
                "subclasses": [[{"weight": 1.0, "probs": [1.0, 0.5]}], [{"weight": 1.0, "probs": [0.0, 0.5]}]]}
        shift = {"keep_ratios": [1.0, 0.0]}
        code, _, _ = run(capsys, "generate", "--config", write(tmp_path / "g.json", spec),
                           "--shift", write(tmp_path / "s.json", shift), "--n", 200, "--out", tmp_path)
        assert code == 0
        labels = np.loadtxt(tmp_path / "dataset.csv", delimiter=",", skiprows=1)[:, -1]
        assert set(labels) == {0.0}

    def test_invalid_spec_exit_2(self, tmp_path, capsys):
        spec = {"num_classes": 2, "class_priors": [0.5, 0.6],
                "subclasses": [[{"weight": 1.0, "probs": [0.5]}], [{"weight": 1.0, "probs": [0.5]}]]}
        code, _, err = run(capsys, "generate", "--config", write(tmp_path / "g.json", spec), "--out", tmp_path)
        assert code == 2 and "class_priors" in err


class TestTrain:
    def test_model_deterministic(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--data", workdir / "source.csv", "--classes", 8, "--hidden", 16,
                           "--epochs", 4, "--learning-rate", 0.2, "--seed", 0, "--out", tmp_path)
        assert code == 0 and "final training loss" in out
        assert digest(tmp_path / "model.json") == digest(workdir / "model.json")

    def test_bad_csv_line_context(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("f0,label\n1,0\n1\n")
        code, _, err = run(capsys, "train", "--data", tmp_path / "bad.csv", "--out", tmp_path)
        assert code == 2 and "line 3" in err


class TestQuantify:
    @pytest.fixture
    def hand_files(self, tmp_path):
        c = write(tmp_path / "C.json", {"matrix": [[0.7, 0.3], [0.3, 0.7]], "support": [2, 1], "method": "soft"})
        p = write(tmp_path / "phat.json", {"probs": [0.6, 0.4]})
        return c, p

    def test_hand_example(self, hand_files, tmp_path, capsys):
        c, p = hand_files
        code, out, _ = run(capsys, "quantify", "--confusion", c, "--phat", p, "--out", tmp_path / "q")
        assert code == 0
        assert out.strip() == "(0.75, 0.25)"
        d = json.loads((tmp_path / "q" / "quantification.json").read_text())
        assert d["prior"] == pytest.approx([0.75, 0.25])
        assert d["clipped_mass"] == 0.0 and d["method"] == "soft"

    def test_singular_exit_3(self, tmp_path, capsys):
        c = write(tmp_path / "C.json", {"matrix": [[0.5, 0.5], [0.5, 0.5]]})
        p = write(tmp_path / "p.json", [0.5, 0.5])
        code, _, err = run(capsys, "quantify", "--confusion", c, "--phat", p)
        assert code == 3 and "singular" in err

    def test_ill_conditioned_exit_3(self, hand_files, capsys):
        c, p = hand_files
        code, _, err = run(capsys, "quantify", "--confusion", c, "--phat", p, "--cond-threshold", 2)
        assert code == 3 and "ill-conditioned" in err

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code, _, _ = run(capsys, "quantify", "--confusion", tmp_path / "nope.json", "--phat", tmp_path / "p.json")
        assert code == 2

    def test_malformed_json_line_context(self, tmp_path, capsys):
        (tmp_path / "C.json").write_text('{\n "matrix": [1,\n}')
        p = write(tmp_path / "p.json", [1.0])
        code, _, err = run(capsys, "quantify", "--confusion", tmp_path / "C.json", "--phat", p)
        assert code == 2 and "line 3" in err

    def test_needs_inputs(self, capsys):
        code, _, _ = run(capsys, "quantify")
        assert code == 2

    def test_from_model(self, workdir, capsys):
        code, out, _ = run(capsys, "quantify", "--model", workdir / "model.json", "--source", workdir / "source.csv",
                           "--target", workdir / "target.csv", "--method", "soft")
        assert code == 0
        est = np.array([float(v) for v in out.strip().strip("()").split(",")])
        assert len(est) == 8 and est.sum() == pytest.approx(1.0, abs=1e-5)


class TestAdapt:
    def test_no_shift_round_trip(self, workdir, tmp_path, capsys):
        # the source file itself as target: the estimate must reproduce the source prior
        code, out, _ = run(capsys, "adapt", "--model", workdir / "model.json", "--source", workdir / "source.csv",
                           "--target", workdir / "source.csv", "--method", "global-soft", "--out", tmp_path)
        assert code == 0
        assert "no significant shift detected" in out
        rep = json.loads((tmp_path / "adaptation.json").read_text())
        assert rep["no_significant_shift"] and rep["shift_score"] < NO_SHIFT_THRESHOLD
        cal = np.loadtxt(tmp_path / "calibrated.csv", delimiter=",", skiprows=1)
        assert cal.shape == (6000, 8)
        np.testing.assert_allclose(cal.sum(axis=1), 1.0, atol=1e-9)

    def test_rerun_byte_identical(self, workdir, tmp_path, capsys):
        args = ["adapt", "--model", workdir / "model.json", "--source", workdir / "source.csv",
                "--target", workdir / "target.csv", "--method", "subspace-soft", "--dims", 4, "--clusters", 3]
        assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
        for f in ("adaptation.json", "calibrated.csv"):
            assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
        rep = json.loads((tmp_path / "a" / "adaptation.json").read_text())
        assert len(rep["partition"]["components"][0]) == 4

    def test_shifted_target_reported(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "generate", "--scenario", "subclass", "--n", 6000, "--seed", 3, "--out", tmp_path,
                         "--name", "shifted", "--shift", write(tmp_path / "s.json", {"keep_ratios": [1, 0.1, 1, 0.1, 1, 0.1, 1, 0.1]}))
        assert code == 0
        code, out, _ = run(capsys, "adapt", "--model", workdir / "model.json", "--source", workdir / "source.csv",
                           "--target", tmp_path / "shifted.csv", "--method", "global-soft", "--out", tmp_path)
        assert code == 0 and "shift detected" in out and "no significant" not in out


class TestEval:
    def test_equal_priors_score_zero(self, tmp_path, capsys):
        pri = write(tmp_path / "p.json", {"estimated": [0.2, 0.8], "actual": [0.2, 0.8], "source": [0.5, 0.5]})
        code, out, _ = run(capsys, "eval", "--priors", pri, "--out", tmp_path)
        assert code == 0 and out.strip() == "quantification score 0"
        assert json.loads((tmp_path / "eval.json").read_text())["score"] == 0.0

    def test_with_predictions(self, tmp_path, capsys):
        pri = write(tmp_path / "p.json", {"estimated": [0.5, 0.5], "actual": [0.5, 0.5], "source": [0.5, 0.5]})
        (tmp_path / "preds.csv").write_text("p0,p1\n0.9,0.1\n0.2,0.8\n0.6,0.4\n")
        (tmp_path / "d.csv").write_text("f0,label\n0,0\n0,1\n0,1\n")
        code, out, _ = run(capsys, "eval", "--priors", pri, "--preds", tmp_path / "preds.csv", "--labels", tmp_path / "d.csv")
        assert code == 0 and "top1 0.6667" in out

    def test_missing_key(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--priors", write(tmp_path / "p.json", {"estimated": [1.0]}))
        assert code == 2 and "actual" in err


def noise_band(source_prior, n_source, n_target):
    """Three sigma of the ratio score when nothing shifted: binomial noise of
    both empirical priors, propagated to the per-class ratio."""
    p = np.asarray(source_prior)
    p = p[p > 0]
    var = (1 - p) / p * (1 / n_source + 1 / n_target)
    return 3 * np.sqrt(var.sum()) / len(p)


class TestExperiments:
    def test_label_shift_no_shift_scores_near_zero(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {"n_source": 100000, "n_target": 20000, "seeds": [0, 1], "keep_override": 1.0})
        before = digest(cfg)
        code, _, _ = run(capsys, "exp-label-shift", "--config", cfg, "--out", tmp_path / "out")
        assert code == 0
        assert digest(cfg) == before
        summary = json.loads((tmp_path / "out" / "label_shift" / "summary.json").read_text())
        assert set(summary) == {"none", "global-hard", "global-soft"}
        for seed in (0, 1):
            rep = json.loads((tmp_path / "out" / "label_shift" / f"seed_{seed}.json").read_text())
            band = noise_band(rep["none"]["source_prior"], 100000, 20000)
            for m in summary:
                assert rep[m]["score"] < band, (seed, m)
        files = sorted(os.listdir(tmp_path / "out" / "label_shift"))
        assert files == ["ratios_seed_0.csv", "ratios_seed_1.csv", "seed_0.json", "seed_1.json",
                         "summary.csv", "summary.json"]

    def test_label_shift_rerun_byte_identical(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {"n_source": 5000, "n_target": 2000, "seeds": [3]})
        for d in ("a", "b"):
            assert run(capsys, "exp-label-shift", "--config", cfg, "--out", tmp_path / d)[0] == 0
        for f in ("seed_3.json", "summary.json", "ratios_seed_3.csv", "summary.csv"):
            assert digest(tmp_path / "a" / "label_shift" / f) == digest(tmp_path / "b" / "label_shift" / f)

    def test_cond_shift_disabled_methods_agree(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {"n_source": 70000, "n_target": 30000, "seeds": [0], "shift_enabled": False,
                                            "methods": ["none", "global-soft", "subspace-soft"]})
        code, out, _ = run(capsys, "exp-cond-shift", "--config", cfg, "--out", tmp_path, "--clusters", 3)
        assert code == 0
        rep = json.loads((tmp_path / "conditional_shift" / "seed_0.json").read_text())
        # the raw classifier mean keeps its small training bias, so only the
        # quantified estimates are held to the sampling band
        band = noise_band(rep["none"]["source_prior"], 70000, 30000)
        assert rep["global-soft"]["score"] < band and rep["subspace-soft"]["score"] < band
        top1 = [rep[m]["top1"] for m in ("none", "global-soft", "subspace-soft")]
        acc = np.mean(top1)
        assert max(top1) - min(top1) < 3 * np.sqrt(2 * acc * (1 - acc) / 30000)
        assert len(rep["subspace-soft"]["detail"]["subspace_weights"]) <= 3
        assert "oracle" in out

    def test_noise_scaling(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {"seeds": [0], "noise": {"p": 0.1, "eps": [0.3, 0.0], "resamples": 10,
                                                                     "n_source": 2000, "n_target": 2000}})
        code, out, _ = run(capsys, "noise-scaling", "--config", cfg, "--out", tmp_path)
        assert code == 0 and "monotone trend" in out
        res = json.loads((tmp_path / "noise_scaling.json").read_text())
        assert res["excluded_eps"] == [0.0]
        assert res["eps_sweep"][0]["resamples"] == 10

    @pytest.mark.parametrize("cfg, needle", [
        ({"bogus": 1}, "unknown config keys"),
        ({"methods": ["magic"]}, "unknown methods"),
        ({"seeds": []}, "seeds"),
        ({"generator": "missing.json"}, "file not found"),
        ({"keep_range": [0.5, 0.2]}, "keep_range"),
    ])
    def test_config_validation_exit_2(self, tmp_path, capsys, cfg, needle):
        code, _, err = run(capsys, "exp-label-shift", "--config", write(tmp_path / "cfg.json", cfg))
        assert code == 2 and needle in err

    def test_stage_failure_names_stage(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {"n_source": 500, "n_target": 200, "seeds": [0], "keep_override": 0.0})
        code, _, err = run(capsys, "exp-label-shift", "--config", cfg)
        assert code == 2 and "stage 'shift'" in err and "empty shifted dataset" in err


def test_module_entry_point(tmp_path):
    c = tmp_path / "C.json"
    c.write_text(json.dumps({"matrix": [[0.7, 0.3], [0.3, 0.7]]}))
    p = tmp_path / "p.json"
    p.write_text("[0.6, 0.4]")
    res = subprocess.run([sys.executable, "-m", "softquant", "quantify", "--confusion", str(c), "--phat", str(p)],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.strip() == "(0.75, 0.25)"
