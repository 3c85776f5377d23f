"""One serializable bundle of every knob a run depends on.

A RunConfig nests the scene-generation, episode, observation, training,
noise, and camera settings plus the master seed and output directory. The
JSON form is canonical (sorted keys), so the config hash is stable no matter
how the file on disk orders its fields; the hash is embedded in checkpoints
and re-checked at evaluation time.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .floorplan import GenParams
from .observation import ObsConfig
from .rl import PpoConfig
from .scenegraph import DsgParams, NoiseConfig
from .spatial import Camera
from .world import EpisodeConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    n_scenes: int = 1
    gen: GenParams = field(default_factory=GenParams)
    dsg: DsgParams = field(default_factory=DsgParams)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    camera: Camera = field(default_factory=Camera)

    def __post_init__(self) -> None:
        if self.n_scenes < 1:
            raise ConfigError(f"n_scenes must be positive: {self.n_scenes}")


_SECTIONS = {
    "gen": GenParams,
    "dsg": DsgParams,
    "episode": EpisodeConfig,
    "obs": ObsConfig,
    "ppo": PpoConfig,
    "noise": NoiseConfig,
    "camera": Camera,
}


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown fields {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except Exception as exc:  # section __post_init__ validators differ in base class
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = set(_SECTIONS) | {"seed", "out_dir", "n_scenes"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}")
    kwargs: dict = {}
    for key in ("seed", "n_scenes"):
        if key in data:
            kwargs[key] = int(data[key])
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    return RunConfig(**kwargs)


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n"


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.field=value`` strings; values parse as JSON, with a
    bare-string fallback so ``out_dir=run7`` needs no quoting."""
    data = asdict(cfg)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override needs KEY=VALUE form: {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section in override: {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field in override: {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
