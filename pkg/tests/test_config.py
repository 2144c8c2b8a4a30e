import json

import pytest

from config import (
    ConfigError,
    RunConfig,
    env_progress,
    env_threads,
    load_config_file,
    merge,
    parse_override,
    resolve_config,
)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"data": {"Q": 4}, "train": {"batch_size": 16}}))
    return str(path)


class TestParseOverride:
    def test_section_key(self):
        assert parse_override("train.lam=0.5") == ("train", "lam", 0.5)

    def test_json_values(self):
        assert parse_override("data.n_values=[1,4]") == ("data", "n_values", [1, 4])
        assert parse_override("train.freeze_fen=true") == ("train", "freeze_fen", True)

    def test_bare_strings(self):
        assert parse_override("model.fen=vgg") == ("model", "fen", "vgg")

    def test_top_level(self):
        assert parse_override("seed=3") == ("seed", None, 3)

    @pytest.mark.parametrize("text", ["train.lam", "lam=0.1", "a.b.c=1"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)


class TestMerge:
    def test_sections_merge_key_by_key(self):
        merged = merge({"train": {"lr": 1.0, "lam": 0.1}}, {"train": {"lam": 0.5}, "seed": 2})
        assert merged == {"train": {"lr": 1.0, "lam": 0.5}, "seed": 2}

    def test_base_is_not_mutated(self):
        base = {"train": {"lr": 1.0}}
        merge(base, {"train": {"lr": 2.0}})
        assert base == {"train": {"lr": 1.0}}


# ============================================================================
# Layer resolution
# ============================================================================

class TestResolveConfig:
    def test_defaults(self):
        config = resolve_config()
        assert config.model.N == 2
        assert config.train.lam == pytest.approx(0.1)
        assert config.data.n_values == [1, 4, 9, 16]

    def test_layer_precedence(self, config_file):
        config = resolve_config(
            preset="full",
            config_path=config_file,
            overrides=["data.density_profile=sparse", "train.batch_size=2"],
            flags={"data": {"resize_to": 64}},
        )
        # preset
        assert config.train.lr == pytest.approx(1e-5)
        # profile sets lam and Q; the file overrides Q
        assert config.train.lam == pytest.approx(0.01)
        assert config.data.Q == 4
        # --set beats the file
        assert config.train.batch_size == 2
        # flags beat the preset
        assert config.data.resize_to == 64

    def test_override_beats_profile(self):
        config = resolve_config(overrides=["data.density_profile=dense", "train.lam=0.3"])
        assert config.train.lam == pytest.approx(0.3)
        assert config.data.Q == 5

    def test_full_preset(self):
        config = resolve_config(preset="full")
        assert config.model.fen == "vgg"
        assert config.model.input_channels == 3
        assert config.model.downsample == 8
        assert config.data.resize_to == 720

    def test_seed_reaches_training(self):
        config = resolve_config(overrides=["seed=11", "train.seed=99"])
        assert config.seed == 11
        assert config.train.seed == 11

    def test_progress_follows_environment(self, monkeypatch):
        monkeypatch.setenv("PANDENSE_PROGRESS", "off")
        assert resolve_config().train.progress is False
        monkeypatch.setenv("PANDENSE_PROGRESS", "1")
        assert resolve_config().train.progress is True

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            resolve_config(preset="cluster")

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            resolve_config(overrides=["train.momentum=0.9"])

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            resolve_config(overrides=["optim.lr=0.1"])

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="density_profile"):
            resolve_config(overrides=["data.density_profile=extreme"])

    def test_invalid_value(self):
        with pytest.raises(ConfigError, match="N must be between"):
            resolve_config(overrides=["model.N=6"])

    def test_odd_resize_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            resolve_config(flags={"data": {"resize_to": 63}})


# ============================================================================
# Files and environment
# ============================================================================

class TestFiles:
    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "train": {"lr": }\n}\n')
        with pytest.raises(ConfigError, match="line 2"):
            load_config_file(str(path))

    def test_unknown_key_names_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": {"layers": 3}}))
        with pytest.raises(ConfigError, match="run.json"):
            load_config_file(str(path))

    def test_resolved_config_reloads(self, tmp_path, config_file):
        config = resolve_config(config_path=config_file)
        path = config.save(str(tmp_path / "run"))
        with open(path, encoding="utf-8") as f:
            restored = RunConfig.from_dict(json.load(f))
        assert restored == config


class TestEnvironment:
    def test_threads(self, monkeypatch):
        monkeypatch.setenv("PANDENSE_THREADS", "3")
        assert env_threads() == 3
        monkeypatch.setenv("PANDENSE_THREADS", "0")
        assert env_threads() == 1

    def test_bad_thread_count(self, monkeypatch):
        monkeypatch.setenv("PANDENSE_THREADS", "many")
        with pytest.raises(ConfigError, match="PANDENSE_THREADS"):
            env_threads()

    def test_progress_flag(self, monkeypatch):
        monkeypatch.setenv("PANDENSE_PROGRESS", "0")
        assert env_progress() is False
        monkeypatch.delenv("PANDENSE_PROGRESS")
        assert env_progress() is True
