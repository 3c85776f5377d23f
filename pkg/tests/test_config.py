"""Run-config serialization, hashing, and overrides."""
from __future__ import annotations

import json
from dataclasses import replace

import pytest

from graphnav.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    config_to_json,
    load_config,
)
from graphnav.floorplan import GenParams


def sample_config() -> RunConfig:
    return RunConfig(
        seed=7,
        out_dir="runs/demo",
        n_scenes=2,
        gen=GenParams(width=18.0, n_side_rooms=(3, 5)),
    )


class TestSerialization:
    def test_json_roundtrip(self):
        cfg = sample_config()
        assert config_from_dict(json.loads(config_to_json(cfg))) == cfg

    def test_every_section_serialized(self):
        data = json.loads(config_to_json(RunConfig()))
        assert set(data) == {
            "seed", "out_dir", "n_scenes", "gen", "dsg", "episode",
            "obs", "ppo", "noise", "camera",
        }
        assert data["camera"] == {"fov_deg": 90.0, "max_range_m": 5.0}

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(config_to_json(sample_config()))
        assert load_config(path) == sample_config()

    def test_missing_file_and_bad_json(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigError, match="unknown config fields"):
            config_from_dict({"seeed": 1})
        with pytest.raises(ConfigError, match="ppo"):
            config_from_dict({"ppo": {"warmup": 10}})

    def test_section_validation_becomes_config_error(self):
        with pytest.raises(ConfigError, match="ppo"):
            config_from_dict({"ppo": {"gamma": 0.0}})
        with pytest.raises(ConfigError, match="gen"):
            config_from_dict({"gen": {"door_width": 0.1}})
        with pytest.raises(ConfigError):
            config_from_dict({"n_scenes": 0})


class TestHash:
    def test_stable_under_field_reordering(self):
        cfg = sample_config()
        data = json.loads(config_to_json(cfg))
        shuffled = json.dumps(dict(reversed(list(data.items()))))
        assert config_hash(config_from_dict(json.loads(shuffled))) == config_hash(cfg)

    def test_sensitive_to_any_value(self):
        cfg = sample_config()
        assert config_hash(replace(cfg, seed=8)) != config_hash(cfg)
        assert config_hash(
            replace(cfg, gen=replace(cfg.gen, corridor_width=2.5))
        ) != config_hash(cfg)

    def test_short_hex_form(self):
        h = config_hash(RunConfig())
        assert len(h) == 16
        int(h, 16)


class TestOverrides:
    def test_nested_and_scalar(self):
        cfg = apply_overrides(
            RunConfig(), ["ppo.total_steps=5000", "seed=3", "out_dir=elsewhere"]
        )
        assert cfg.ppo.total_steps == 5000
        assert cfg.seed == 3
        assert cfg.out_dir == "elsewhere"

    def test_tuple_and_null_values(self):
        cfg = apply_overrides(
            RunConfig(), ["gen.n_side_rooms=[4,4]", "gen.side_room_classes=null"]
        )
        assert cfg.gen.n_side_rooms == (4, 4)
        assert cfg.gen.side_room_classes is None

    def test_bad_overrides(self):
        with pytest.raises(ConfigError, match="KEY=VALUE"):
            apply_overrides(RunConfig(), ["ppo.total_steps"])
        with pytest.raises(ConfigError, match="unknown config field"):
            apply_overrides(RunConfig(), ["ppo.warmup=3"])
        with pytest.raises(ConfigError, match="unknown config section"):
            apply_overrides(RunConfig(), ["ppq.gamma=0.5"])
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), ["ppo.gamma=1.5"])  # section validator

    def test_override_changes_hash(self):
        base = RunConfig()
        assert config_hash(apply_overrides(base, ["episode.max_steps=100"])) != config_hash(base)
