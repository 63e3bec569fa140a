import pytest

from advtextgen.config import (ExperimentConfig, TrainingConfig, config_as_dict, derive_seed,
                               load_config, resolve_target_class_map, save_config)


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(num_texts=123, d_z=16, filter_widths=(2, 3))
        cfg.training.phi = 7.5
        cfg.training.disable_disc = True
        p = tmp_path / "run.cfg"
        save_config(cfg, p)
        got = load_config(p)
        assert got.num_texts == 123
        assert got.d_z == 16
        assert got.filter_widths == (2, 3)
        assert got.training.phi == 7.5
        assert got.training.disable_disc is True

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("nonsense = 4\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(p)

    def test_comments_and_blanks_ok(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# a comment\n\nphi = 2.0\n")
        assert load_config(p).training.phi == 2.0

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("phi 2.0\n")
        with pytest.raises(ValueError, match="key = value"):
            load_config(p)

    def test_every_training_field_serialized(self, tmp_path):
        from dataclasses import fields
        p = tmp_path / "run.cfg"
        save_config(ExperimentConfig(), p)
        text = p.read_text()
        for f in fields(TrainingConfig):
            assert f"{f.name} =" in text


class TestValidation:
    def test_negative_phi(self):
        cfg = ExperimentConfig()
        cfg.training.phi = -1.0
        with pytest.raises(ValueError, match="phi"):
            cfg.validate()

    def test_ramp_order(self):
        cfg = ExperimentConfig()
        cfg.training.kl_ramp_start = 10
        cfg.training.kl_ramp_end = 5
        with pytest.raises(ValueError, match="ramp"):
            cfg.validate()

    def test_keep_rate_range(self):
        cfg = ExperimentConfig()
        cfg.training.keep_rate = 1.5
        with pytest.raises(ValueError, match="keep_rate"):
            cfg.validate()

    def test_temperature_order(self):
        cfg = ExperimentConfig()
        cfg.training.t_end = 2.0
        with pytest.raises(ValueError, match="t_end"):
            cfg.validate()

    def test_self_map_rejected(self):
        cfg = ExperimentConfig()
        cfg.training.target_class_map = "0:0,1:0"
        with pytest.raises(ValueError, match="itself"):
            cfg.validate()

    def test_modify_fraction(self):
        cfg = ExperimentConfig(modify_fraction=0.0)
        with pytest.raises(ValueError, match="modify_fraction"):
            cfg.validate()


class TestTargetClassMap:
    def test_flip(self):
        assert resolve_target_class_map("flip", 2) == {0: 1, 1: 0}

    def test_flip_needs_binary(self):
        with pytest.raises(ValueError, match="flip"):
            resolve_target_class_map("flip", 3)

    def test_cycle(self):
        assert resolve_target_class_map("cycle", 3) == {0: 1, 1: 2, 2: 0}

    def test_explicit(self):
        assert resolve_target_class_map("0:2,1:0,2:1", 3) == {0: 2, 1: 0, 2: 1}

    def test_explicit_missing_class(self):
        with pytest.raises(ValueError, match="misses"):
            resolve_target_class_map("0:1", 2)


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed(0, "x") == derive_seed(0, "x")

    def test_tag_sensitivity(self):
        assert derive_seed(0, "x") != derive_seed(0, "y")
        assert derive_seed(0, "x") != derive_seed(1, "x")

    def test_fixed_len(self):
        cfg = ExperimentConfig(max_len=20)
        assert cfg.fixed_len == 21

    def test_config_as_dict_flat(self):
        d = config_as_dict(ExperimentConfig())
        assert "phi" in d and "num_texts" in d and "training" not in d
