import json

import pytest

from dragonfly.config import DEFAULTS, ConfigError, strip_comments, template, validate_config
from dragonfly.frustum import EnsembleSpec


def _issues(source, **kw):
    with pytest.raises(ConfigError) as exc:
        validate_config(source, **kw)
    return exc.value.issues


class TestValidate:
    def test_minimal_is_fully_defaulted(self):
        cfg = validate_config({"experiment": 1})
        d = cfg.to_dict()
        assert set(d) == set(DEFAULTS)
        assert d["train"] == DEFAULTS["train"]
        assert d["montecarlo"]["lrs"] == [0.001, 0.005, 0.01]
        assert cfg.classes() == 2

    def test_experiment_two_has_four_classes(self):
        assert validate_config({"experiment": 2}).ensemble_spec().classes == 4

    def test_bad_pool_token_reported_at_key(self):
        text = json.dumps({"experiment": 1, "ensemble": {"final_pools": {"N1": ["G5[x2]", "G11[v5]"]}}},
                          indent=2)
        issues = _issues(None, text=text)
        assert len(issues) == 1
        assert issues[0].key.startswith("ensemble.final_pools")
        assert "position" in issues[0].message
        assert text.splitlines()[issues[0].line - 1].strip().startswith('"N1"')

    def test_bad_block_pool(self):
        issues = _issues({"experiment": 1, "ensemble": {"block_pool": "C3[8]"}})
        assert issues[0].key == "ensemble.block_pool"

    def test_zero_width_scale(self):
        issues = _issues(None, text='{\n  "experiment": 1,\n  "ensemble": {"width_scale": 0}\n}')
        assert [i.key for i in issues] == ["ensemble.width_scale"]
        assert issues[0].line == 3

    def test_errors_are_aggregated(self):
        issues = _issues({"experiment": 7, "train": {"lr": -1, "epochs": 0}, "bogus": 1})
        keys = {i.key for i in issues}
        assert {"experiment", "train.lr", "train.epochs", "bogus"} <= keys

    def test_invalid_json(self):
        issues = _issues(None, text='{"experiment": 1,,}')
        assert issues[0].line == 1

    def test_file_path(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"experiment": 3}')
        cfg = validate_config(p)
        assert cfg.experiment == 3

    def test_missing_file(self, tmp_path):
        issues = _issues(tmp_path / "nope.json")
        assert "cannot read" in issues[0].message

    def test_valid_padding_too_small_input(self):
        issues = _issues({"experiment": 1, "dataset": {"size": 16}, "ensemble": {"padding": "valid"}})
        assert issues[0].key == "ensemble.padding"

    def test_ensemble_spec_carries_notation(self):
        spec = validate_config({"experiment": 1, "ensemble": {"width_scale": 0.25}}).ensemble_spec()
        d = spec.to_dict()
        assert d["branches"][2]["channels"] == [24, 16, 8]
        assert EnsembleSpec.from_dict(d).to_dict() == d

    def test_final_pool_override_applies(self):
        cfg = validate_config({"experiment": 1, "ensemble": {"final_pools": {"N1": ["F5[v1]", "G5[v2]"]}}})
        b1 = cfg.ensemble_spec().branches[0]
        assert [p.format() for p in b1.final_pools] == ["F5[v1]", "G5[v2]"]

    def test_train_config_overrides(self):
        tc = validate_config({"experiment": 1}).train_config(lr=0.01)
        assert tc.lr == 0.01 and tc.width_scale == 0.125

    def test_section_hash_tracks_content(self):
        a = validate_config({"experiment": 1})
        b = validate_config({"experiment": 1, "train": {"epochs": 3}})
        assert a.section_hash("dataset") == b.section_hash("dataset")
        assert a.section_hash("train") != b.section_hash("train")


class TestTemplate:
    def test_template_validates(self):
        t = template(2, "runs/x")
        cfg = validate_config(json.loads(json.dumps(t)))
        assert cfg.experiment == 2 and str(cfg.out) == "runs/x"

    def test_comments_stripped(self):
        t = template()
        assert any(k.startswith("_") for k in t)
        assert not any(k.startswith("_") for k in strip_comments(t))
        assert not any(k.startswith("_") for k in strip_comments(t)["dataset"])
