import csv
import json

import numpy as np
import pytest

from dalight3d import cli
from dalight3d.data import read_case, write_case
from dalight3d.gradsuite import CheckResult

TINY_MODEL = {"base_width": 4, "bottleneck_width": 16, "ssfb_rank": 2}
TINY_TRAIN = {"epochs": 2, "steps_per_case": 1, "patch": 8, "lr": 1e-3, "val_every": 1, "val_patches_per_case": 1}


def write_config(path, **kw):
    doc = {"model": TINY_MODEL, "train": TINY_TRAIN, "extents": [16, 16, 16]}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = write_config(root / "tiny.json")
    assert cli.main(["synth", "--config", conf, "--n", "3", "--out", str(root / "data")]) == 0
    return root, conf


class TestSynth:
    def test_files_and_manifest(self, workdir):
        root, _ = workdir
        doc = json.loads((root / "data" / "manifest.json").read_text())
        assert [c["id"] for c in doc["cases"]] == ["case_000", "case_001", "case_002"]
        assert doc["cases"][0]["bucket"] == 6
        for c in doc["cases"]:
            case = read_case(root / "data" / c["file"])
            assert case.extents == (16, 16, 16)
            assert case.bucket == c["bucket"]
        assert (root / "data" / "config.json").exists()

    def test_zero_cases(self, tmp_path):
        assert cli.main(["synth", "--n", "0", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["cases"] == []
        assert not list(tmp_path.glob("*.dl3d"))

    def test_rerun_identical(self, workdir, tmp_path):
        root, conf = workdir
        assert cli.main(["synth", "--config", conf, "--n", "3", "--out", str(tmp_path)]) == 0
        for f in (root / "data").glob("*.dl3d"):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_requires_out(self, capsys):
        assert cli.main(["synth"]) == 1
        assert "out: required" in capsys.readouterr().err


class TestParams:
    def test_full_total(self, capsys):
        assert cli.main(["params"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["total"] == 2_705_250
        assert sum(doc["per_stage"].values()) == doc["total"]
        for row in doc["separable_vs_dense"]:
            assert row["separable"] == row["c_in"] * 27 + row["c_in"] * row["c_out"] + row["c_out"]

    def test_writes_effective_config(self, tmp_path, capsys):
        assert cli.main(["params", "--variant", "no_csa", "--out", str(tmp_path)]) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["variant"] == "no_csa" and cfg["model"]["ablation"] == "no_csa"
        assert json.loads((tmp_path / "params.json").read_text())["total"] == 2_509_410

    def test_unknown_variant(self, capsys):
        assert cli.main(["params", "--variant", "tiny"]) == 1
        err = capsys.readouterr().err
        assert err.count("error:") == 1 and "tiny" in err


class TestConfigErrors:
    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert cli.main(["params", "--config", str(tmp_path / "c.json")]) == 1

    def test_unknown_fields_listed(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"sead": 1, "model": {"widht": 3}}))
        assert cli.main(["params", "--config", str(tmp_path / "c.json")]) == 1
        assert "sead" in capsys.readouterr().err

    def test_every_problem_reported(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", train={"patch": 12, "lr": -1.0})
        assert cli.main(["train", "--config", path]) == 1
        err = capsys.readouterr().err
        for word in ("data: required", "out: required", "patch", "lr"):
            assert word in err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["params", "--config", str(tmp_path / "absent.json")]) == 3


@pytest.fixture(scope="module")
def trained(workdir):
    root, conf = workdir
    out = root / "run"
    assert cli.main(["train", "--config", conf, "--data", str(root / "data"), "--out", str(out)]) == 0
    return root, conf, out


class TestTrainEval:
    def test_outputs(self, trained):
        _, _, out = trained
        assert {p.name for p in out.iterdir()} == {"best.ckpt", "final.ckpt", "history.csv", "config.json"}
        rows = list(csv.DictReader((out / "history.csv").open()))
        # two training cases, one step each, two epochs
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]

    def test_effective_config_reproduces_run(self, trained, tmp_path):
        root, _, out = trained
        assert cli.main(["train", "--config", str(out / "config.json"), "--out", str(tmp_path)]) == 0
        for name in ("history.csv", "best.ckpt", "final.ckpt", "config.json"):
            if name == "config.json":
                a = json.loads((tmp_path / name).read_text())
                b = json.loads((out / name).read_text())
                a.pop("out"), b.pop("out")
                assert a == b
            else:
                assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_eval_outputs(self, trained, tmp_path):
        root, _, out = trained
        args = ["eval", "--data", str(root / "data"), "--checkpoint", str(out / "best.ckpt"), "--out", str(tmp_path)]
        assert cli.main(args) == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        cm = np.loadtxt(tmp_path / "confusion.csv", delimiter=",", dtype=np.int64)
        assert cm.shape == (4, 4) and cm.sum() == 3 * 16 ** 3 == metrics["voxels"]
        assert metrics["params"] > 0
        calib = json.loads((tmp_path / "calibration.json").read_text())
        assert calib["bins"] == 15 and sum(calib["counts"]) == cm.sum()
        assert calib["overall_accuracy"] == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)

    def test_eval_fresh_model_predicts_uniform(self, workdir, tmp_path):
        root, conf = workdir
        assert cli.main(["eval", "--config", conf, "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
        calib = json.loads((tmp_path / "calibration.json").read_text())
        # zero-initialized head: every voxel gets probability 1/4 for each class
        assert calib["counts"][3] == 3 * 16 ** 3

    def test_eval_without_out_prints(self, workdir, capsys):
        root, conf = workdir
        assert cli.main(["eval", "--config", conf, "--data", str(root / "data")]) == 0
        assert "tumor_macro" in json.loads(capsys.readouterr().out)

    def test_corrupt_checkpoint_is_io_error(self, trained, tmp_path):
        root, _, out = trained
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((out / "best.ckpt").read_bytes()[:100])
        assert cli.main(["eval", "--data", str(root / "data"), "--checkpoint", str(bad)]) == 3

    def test_missing_data_dir(self, tmp_path):
        assert cli.main(["eval", "--data", str(tmp_path / "nowhere")]) == 3

    def test_too_few_cases(self, workdir, tmp_path):
        root, conf = workdir
        data = tmp_path / "one"
        data.mkdir()
        (data / "case_000.dl3d").write_bytes((root / "data" / "case_000.dl3d").read_bytes())
        assert cli.main(["train", "--config", conf, "--data", str(data), "--out", str(tmp_path / "o")]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_exit_code(self, workdir, tmp_path, capsys):
        root, conf = workdir
        data = tmp_path / "nan"
        data.mkdir()
        for f in sorted((root / "data").glob("*.dl3d")):
            case = read_case(f)
            case.image[:] = np.nan
            write_case(data / f.name, case)
        assert cli.main(["train", "--config", conf, "--data", str(data), "--out", str(tmp_path / "o")]) == 2
        assert "non-finite" in capsys.readouterr().err


class TestGradcheck:
    def test_clean_build(self, tmp_path, capsys):
        conf = write_config(tmp_path / "c.json", gradcheck_instances=1)
        assert cli.main(["gradcheck", "--config", conf, "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "SepConv" in out
        rows = list(csv.DictReader((tmp_path / "gradcheck.csv").open()))
        assert all(r["status"] == "PASS" for r in rows)

    def test_failure_exits_2(self, monkeypatch, capsys):
        import dalight3d.gradsuite as gs

        fake = [CheckResult("ok", 5, 1e-9, 0.0), CheckResult("broken", 5, 3e-2, 0.0)]
        monkeypatch.setattr(gs, "run_suite", lambda *a, **k: fake)
        assert cli.main(["gradcheck"]) == 2
        assert "broken,5,3.000e-02,FAIL" in capsys.readouterr().out


class TestAblate:
    def test_five_rows(self, workdir, tmp_path):
        root, conf = workdir
        conf2 = write_config(tmp_path / "c.json", train={**TINY_TRAIN, "epochs": 1})
        assert cli.main(["ablate", "--config", conf2, "--data", str(root / "data"), "--out", str(tmp_path / "a")]) == 0
        rows = list(csv.DictReader((tmp_path / "a" / "ablation.csv").open()))
        assert [r["variant"] for r in rows] == ["full", "no_sepconv", "no_scanner_norm", "no_csa", "no_ssfb"]
        params = {r["variant"]: int(r["params"]) for r in rows}
        assert params["no_sepconv"] > params["full"] > params["no_csa"]
        for r in rows:
            assert r["mean_tumor_dice"] == "" or 0.0 <= float(r["mean_tumor_dice"]) <= 1.0


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [["bogus"], ["params", "--seed", "abc"], []])
    def test_exit_1(self, argv):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 1
