"""Command-line interface and the end-to-end pipeline."""

import json
import shutil

import pytest
from click.testing import CliRunner

from dragonfly.cli import main
from dragonfly.config import validate_config
from dragonfly.pipeline import STAGES, StageError, run_pipeline

TINY = {
    "experiment": 1,
    "dataset": {"counts": [6, 2, 4], "size": 16, "previews": 1},
    "train": {"epochs": 1, "batch_size": 8},
    "montecarlo": {"trials": 2, "lrs": [0.005]},
    "analysis": {"bins": 10},
}


def invoke(*args, **kw):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False, **kw)


def _json(result):
    return json.loads(result.output)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    r = invoke("synth", "--experiment", 1, "--counts", "6,2,4", "--size", 16, "--previews", 1,
               "--out", out, "--format", "json")
    assert r.exit_code == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    r = invoke("train", "--data", data_dir, "--epochs", 1, "--batch-size", 8, "--out", out, "--format", "json")
    assert r.exit_code == 0, r.output
    return out, _json(r)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "config.in.json"
    cfg.write_text(json.dumps(TINY | {"out": str(out / "artifacts")}))
    r = invoke("run", "--config", cfg, "--format", "json")
    assert r.exit_code == 0, r.output
    return cfg, out / "artifacts", _json(r)


class TestSubcommands:
    def test_synth_json(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["counts_per_class"] == {"train": 6, "val": 2, "test": 4}
        assert (data_dir / "train_images.dft1").exists()

    def test_synth_bad_counts_is_config_error(self, tmp_path):
        r = invoke("synth", "--counts", "1,2", "--out", tmp_path)
        assert r.exit_code == 2

    def test_init_writes_valid_template(self, tmp_path):
        r = invoke("init", "--experiment", 3, "--out", tmp_path, "--format", "json")
        assert r.exit_code == 0
        cfg = validate_config(_json(r)["config"])
        assert cfg.experiment == 3
        assert invoke("init", "--out", tmp_path).exit_code == 2

    def test_train_payload(self, trained):
        out, payload = trained
        assert set(payload["accuracy"]) == {"train", "val", "test"}
        assert (out / "checkpoint" / "index.json").exists()
        assert (out / "trial.json").exists()

    def test_eval(self, trained, tmp_path):
        r = invoke("eval", "--checkpoint", trained[0] / "checkpoint", "--out", tmp_path, "--format", "json")
        assert r.exit_code == 0
        payload = _json(r)
        assert payload["accuracy"] == trained[1]["accuracy"]["test"]
        assert len(payload["confusion"]["N17"]) == 2

    def test_sld(self, trained, tmp_path):
        r = invoke("sld", "--checkpoint", trained[0] / "checkpoint", "--bins", 5, "--out", tmp_path,
                   "--format", "json")
        assert r.exit_code == 0
        assert (tmp_path / "report.csv").exists()
        assert len(list((tmp_path / "histograms").glob("*.svg"))) == 16
        assert json.loads((tmp_path / "failures.json").read_text()) is not None
        assert _json(r)["summary"]["split"] == "test"

    def test_corrupt_checkpoint_exit_three(self, trained, tmp_path):
        ck = tmp_path / "ck"
        shutil.copytree(trained[0] / "checkpoint", ck)
        f = sorted((ck / "tensors").glob("*.dft1"))[0]
        f.write_bytes(f.read_bytes()[:-4] + b"\0\0\0\1")
        r = invoke("eval", "--checkpoint", ck, "--out", tmp_path / "e")
        assert r.exit_code == 3
        assert "evaluate" in r.output

    def test_montecarlo_and_perf(self, data_dir, tmp_path):
        r = invoke("montecarlo", "--data", data_dir, "--epochs", 1, "--batch-size", 8, "--trials", 1,
                   "--lrs", "0.001,0.01", "--out", tmp_path, "--format", "json")
        assert r.exit_code == 0, r.output
        payload = _json(r)
        assert len(payload["z"]) == 2 and set(payload["z_by_lr"]) == {"0.001", "0.01"}
        assert (tmp_path / "perf.csv").exists() and (tmp_path / "perf_by_lr.csv").exists()
        r2 = invoke("perf", "--trials", tmp_path / "trials.json", "--out", tmp_path / "p", "--format", "json")
        assert r2.exit_code == 0
        assert len(_json(r2)["rows"]) == 17

    def test_perf_from_z(self, tmp_path):
        r = invoke("perf", "--z", "83.3,94.0,100", "--out", tmp_path, "--format", "json")
        row = _json(r)["rows"][0]
        assert row["min"] == 83.3 and row["max"] == 100.0
        assert (tmp_path / "perf.csv").read_text().startswith("experiment,head,n_trials")

    def test_perf_needs_one_source(self, tmp_path):
        assert invoke("perf", "--out", tmp_path).exit_code == 2

    def test_montecarlo_rejects_bad_lrs(self, data_dir, tmp_path):
        r = invoke("montecarlo", "--data", data_dir, "--lrs", "0,-1", "--out", tmp_path)
        assert r.exit_code == 2

    def test_train_zero_width_is_config_error(self, data_dir, tmp_path):
        r = invoke("train", "--data", data_dir, "--scale", "0.001", "--out", tmp_path)
        assert r.exit_code == 2

    def test_gradcheck_layers(self, tmp_path):
        r = invoke("gradcheck", "--target", "layers", "--out", tmp_path, "--format", "json")
        assert r.exit_code == 0
        payload = _json(r)
        assert all(v["passed"] for v in payload.values())
        assert (tmp_path / "gradcheck.json").exists()

    def test_gradcheck_failing_threshold_exit_three(self):
        r = invoke("gradcheck", "--target", "layers", "--threshold", "1e-30")
        assert r.exit_code == 3

    @pytest.mark.parametrize("cmd", ["init", "synth", "train", "montecarlo", "eval", "perf", "sld",
                                     "gradcheck", "run"])
    def test_every_subcommand_has_json_format(self, cmd):
        assert "--format" in invoke(cmd, "--help").output


class TestRun:
    def test_check_echoes_defaults(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"experiment": 1}')
        r = invoke("run", "--config", cfg, "--check", "--format", "json")
        assert r.exit_code == 0
        assert _json(r)["train"]["lr"] == 0.005

    def test_bad_config_exit_two(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"experiment": 1, "ensemble": {"width_scale": 0}}')
        r = invoke("run", "--config", cfg, "--format", "json")
        assert r.exit_code == 2
        assert "ensemble.width_scale" in r.output

    def test_index_has_five_groups(self, pipeline_run):
        _, out, payload = pipeline_run
        assert payload["ran"] == list(STAGES)
        index = json.loads((out / "index.json").read_text())
        assert set(index["artifacts"]) == {"manifest", "checkpoints", "perf", "sld", "figures"}
        for group, files in index["artifacts"].items():
            assert files, group
            assert all((out / f).exists() for f in files)

    def test_rerun_skips_everything(self, pipeline_run):
        cfg, out, _ = pipeline_run
        before = (out / "trials.json").read_text()
        r = invoke("run", "--config", cfg, "--format", "json")
        assert _json(r)["ran"] == [] and _json(r)["skipped"] == list(STAGES)
        assert (out / "trials.json").read_text() == before

    def test_changed_analysis_reruns_only_sld(self, pipeline_run):
        cfg, out, _ = pipeline_run
        c = validate_config(cfg)
        c.data["analysis"]["bins"] = 12
        res = run_pipeline(c)
        assert res.ran == ["sld"]

    def test_corrupt_checkpoint_fails_in_evaluate(self, pipeline_run, tmp_path):
        cfg, out, _ = pipeline_run
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        f = sorted((copy / "checkpoints").rglob("*.dft1"))[0]
        blob = bytearray(f.read_bytes())
        blob[-1] ^= 0xFF
        f.write_bytes(bytes(blob))
        r = invoke("run", "--config", cfg, "--out", copy, "--format", "json")
        assert r.exit_code == 3
        assert "evaluate" in r.output
        with pytest.raises(StageError) as exc:
            run_pipeline(validate_config(cfg), out=copy)
        assert exc.value.stage == "evaluate"
        # earlier artifacts are kept
        assert (copy / "trials.json").exists()

    def test_nothing_written_outside_out(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        out = tmp_path / "o"
        invoke("synth", "--counts", "1,1,1", "--size", 16, "--out", out)
        invoke("perf", "--z", "1,2", "--out", out)
        invoke("gradcheck", "--target", "layers")
        assert [p.name for p in tmp_path.iterdir()] == ["o"]
