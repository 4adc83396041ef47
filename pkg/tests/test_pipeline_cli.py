import json

import numpy as np
import pytest
import yaml

from eenn_avcs import pipeline
from eenn_avcs.backbone import load_features
from eenn_avcs.cli import main
from eenn_avcs.config import config_hash, load_config
from eenn_avcs.errors import InvalidArgument


def _cfg(tmp_path, name="run", **over):
    base = {
        "seed": 1,
        "dataset": {"generator": "wiggle", "params": {"n": 240}},
        "backbone": {"exits": 4, "hidden": 8, "epochs": 40, "lr": 1e-2},
        "ood": {"n_test": 30},
        "output": str(tmp_path / name),
    }
    for key, val in over.items():
        if isinstance(val, dict):
            base.setdefault(key, {}).update(val)
        else:
            base[key] = val
    return base


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def regression_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("reg")
    cfg = load_config(overrides=_cfg(tmp))
    return pipeline.run_experiment(cfg), cfg


class TestConfig:
    def test_defaults_resolved(self):
        cfg = load_config(overrides={"seed": 7})
        assert cfg["avcs"]["parallel"] == 10 and cfg["avcs"]["seed"] == 7
        assert cfg["calibration"]["alpha"] == cfg["avcs"]["alpha"]

    def test_classification_defaults(self):
        cfg = load_config(overrides={"dataset": {"generator": "blobs"}})
        assert cfg["avcs"]["parallel"] == 1

    def test_hash_ignores_output_and_threads(self):
        a = load_config(overrides={"output": "a", "threads": 1})
        b = load_config(overrides={"output": "b", "threads": 4})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(load_config(overrides={"seed": 3}))

    @pytest.mark.parametrize("over", [
        {"avcs": {"alpha": 1.5}},
        {"avcs": {"parallel": 0}},
        {"avcs": {"clip": [2, 1]}},
        {"dataset": {"generator": "spiral"}},
        {"dataset": {"external": {"train": "/nonexistent", "test": "/nonexistent"}}},
    ])
    def test_invalid(self, over):
        with pytest.raises(InvalidArgument):
            load_config(overrides=over)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidArgument):
            load_config(tmp_path / "absent.yaml")


class TestRegressionRun:
    def test_outputs(self, regression_run):
        res, _ = regression_run
        names = {p.name for p in res.out_dir.iterdir()}
        assert {"manifest.json", "metrics.csv", "metrics.json", "points.jsonl", "posteriors.json",
                "model.json", "dataset.csv", "ood_points.jsonl"} <= names

    def test_avcs_nested(self, regression_run):
        res, _ = regression_run
        rec = next(r for r in res.metrics if r.method == "eenn-avcs")
        ok = ~np.isnan(rec.nestedness)
        np.testing.assert_array_equal(rec.nestedness[ok], 1.0)
        assert rec.exits == 4

    def test_methods_present(self, regression_run):
        res, _ = regression_run
        assert {r.method for r in res.metrics} == {"eenn-avcs", "eenn-bayes", "eenn-bayes-intersection"}

    def test_manifest(self, regression_run):
        res, cfg = regression_run
        man = json.loads((res.out_dir / "manifest.json").read_text())
        assert man["config_hash"] == config_hash(cfg)
        assert man["seeds"] == {"dataset": 1, "backbone": 1, "avcs": 1, "calibration": 1}
        assert man["decisions"] and "metrics.csv" in man["files"]

    def test_rerun_and_threads(self, regression_run, tmp_path):
        res, _ = regression_run
        again = pipeline.run_experiment(load_config(overrides=_cfg(tmp_path, threads=2)))
        assert (again.out_dir / "metrics.csv").read_bytes() == (res.out_dir / "metrics.csv").read_bytes()
        assert (again.out_dir / "points.jsonl").read_bytes() == (res.out_dir / "points.jsonl").read_bytes()

    def test_report_reproduces(self, regression_run, tmp_path):
        res, _ = regression_run
        _, out = pipeline.report(res.out_dir, tmp_path / "rep")
        assert (out / "metrics.csv").read_bytes() == (res.out_dir / "metrics.csv").read_bytes()

    def test_ood_records(self, regression_run):
        res, _ = regression_run
        lines = (res.out_dir / "ood_points.jsonl").read_text().splitlines()
        assert len(lines) == 30
        rec = json.loads(lines[0])
        assert len(rec["epistemic_var"]) == 4 and "x" in rec


class TestClassificationRun:
    def test_blobs(self, tmp_path):
        cfg = load_config(overrides=_cfg(tmp_path, dataset={"generator": "blobs", "params": {"n": 300, "sep": 10.0}}))
        res = pipeline.run_experiment(cfg)
        sched = json.loads((res.out_dir / "schedule.json").read_text())
        assert len(sched["taus"]) == 4
        methods = {r.method for r in res.metrics}
        assert {"eenn-avcs", "eenn-avcs-val", "eenn-bayes", "eenn-bayes-intersection"} <= methods
        rec = next(r for r in res.metrics if r.method == "eenn-avcs")
        ok = ~np.isnan(rec.nestedness)
        np.testing.assert_array_equal(rec.nestedness[ok], 1.0)
        assert np.all(rec.mean_size <= 3)


class TestExternal:
    def test_feature_directories(self, tmp_path, regression_run):
        res, _ = regression_run
        out = tmp_path / "stage"
        assert main(["features", "--data", str(res.out_dir / "dataset.csv"), "--model",
                     str(res.out_dir / "model.json"), "--out", str(out)]) == 0
        before = (out / "features" / "train" / "targets.csv").read_bytes()
        cfg = load_config(overrides={
            "dataset": {"external": {"train": str(out / "features" / "train"), "test": str(out / "features" / "test")}},
            "output": str(tmp_path / "ext"), "seed": 1,
        })
        ext = pipeline.run_experiment(cfg)
        assert (out / "features" / "train" / "targets.csv").read_bytes() == before
        assert not (ext.out_dir / "ood_points.jsonl").exists()
        n_test = load_features(out / "features" / "test").n
        assert all(r.n_points == n_test for r in ext.metrics)

    def test_missing_targets_tagged(self, tmp_path, regression_run):
        res, _ = regression_run
        out = tmp_path / "stage"
        main(["features", "--data", str(res.out_dir / "dataset.csv"), "--model",
              str(res.out_dir / "model.json"), "--out", str(out)])
        (out / "features" / "train" / "targets.csv").unlink()
        cfg = load_config(overrides={
            "dataset": {"external": {"train": str(out / "features" / "train"), "test": str(out / "features" / "test")}},
            "output": str(tmp_path / "ext"),
        })
        with pytest.raises(pipeline.StageError) as info:
            pipeline.run_experiment(cfg)
        assert info.value.stage == "data"


class TestCli:
    def test_synth_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["synth", "--generator", "3clusters", "--n", "90", "--seed", "4", "--out", str(d)]) == 0
        assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()

    def test_unknown_generator(self, tmp_path, capsys):
        assert main(["synth", "--generator", "spiral", "--out", str(tmp_path)]) == 2
        assert "spiral" in capsys.readouterr().err

    def test_stagewise(self, tmp_path):
        cfg = _write(tmp_path, _cfg(tmp_path, "stage"))
        out = str(tmp_path / "stage")
        assert main(["synth", "--config", str(cfg)]) == 0
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["features", "--config", str(cfg)]) == 0
        assert main(["fit", "--config", str(cfg), "--features", out + "/features/train",
                     "--model", out + "/model.json"]) == 0
        blob = json.loads((tmp_path / "stage" / "posteriors.json").read_text())
        assert len(blob["exits"]) == 4

    @pytest.mark.filterwarnings("ignore:exit .* no threshold")
    def test_calibrate(self, tmp_path):
        cfg = _write(tmp_path, _cfg(tmp_path, "cls", dataset={"generator": "blobs", "params": {"n": 300}}))
        out = tmp_path / "cls"
        for cmd in ("synth", "train", "features"):
            assert main([cmd, "--config", str(cfg)]) == 0
        assert main(["calibrate", "--config", str(cfg), "--logits", str(out / "features" / "val")]) == 0
        assert len(json.loads((out / "schedule.json").read_text())["taus"]) == 4

    def test_run_and_report(self, tmp_path):
        cfg = _write(tmp_path, _cfg(tmp_path, "full"))
        assert main(["run", "--config", str(cfg), "--threads", "2"]) == 0
        assert main(["report", str(tmp_path / "full")]) == 0
        assert (tmp_path / "full" / "report" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()

    def test_missing_features_dir(self, tmp_path):
        assert main(["fit", "--features", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 1

    def test_verify_single_suite(self, capsys):
        assert main(["verify", "--suite", "kl"]) == 0
        out = capsys.readouterr().out
        assert "PASS kl" in out and "martingale" not in out


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["wiggle", "3clusters", "blobs"])
    def test_loads(self, name):
        from pathlib import Path
        cfg = load_config(Path(__file__).parents[1] / "configs" / f"{name}.yaml")
        assert cfg["dataset"]["generator"] == name and cfg["backbone"]["exits"] == 15
