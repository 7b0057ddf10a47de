"""
Lab configuration: presets, TOML files, environment overrides.

Resolution order (later wins): preset file -> user TOML -> environment (``.env``
via python-dotenv) -> CLI flags. Every TOML key maps to one dataclass field;
unknown keys raise ``ConfigValidationError`` naming ``section.key``.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

import tomli_w
from dotenv import load_dotenv

from core import __version__
from core.errors import ConfigValidationError
from core.physics import EngineParams
from core.rollout import RolloutConfig, TransformerSpec
from core.savi import EncoderConfig
from core.scene import GeneratorParams
from core.training import TrainConfig
from core.utils import content_hash

logger = logging.getLogger(__name__)

# Base directory (root of project)
BASE_DIR = Path(__file__).resolve().parents[2]
CONFIG_DIR = BASE_DIR / "configs"
EXPERIMENT_DIR = CONFIG_DIR / "experiments"
PRESETS = ("paper", "desk")
SECTIONS = ("paths", "engine", "generator", "encoder", "savi_train", "rollout", "train", "experiment")

T = TypeVar("T")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data/desk"
    runs_dir: str = "runs"
    device: str = "auto"
    num_workers: int = 0
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        if self.device not in ("auto", "cpu", "cuda", "mps") and not self.device.startswith("cuda:"):
            raise ConfigValidationError("paths.device", "must be auto, cpu, cuda[:N] or mps", self.device)
        if self.num_workers < 0:
            raise ConfigValidationError("paths.num_workers", "must be >= 0", self.num_workers)

    def resolve(self, value: str) -> Path:
        path = Path(value).expanduser()
        return path if path.is_absolute() else BASE_DIR / path

    @property
    def data_path(self) -> Path:
        return self.resolve(self.data_dir)

    @property
    def runs_path(self) -> Path:
        return self.resolve(self.runs_dir)


@dataclass(frozen=True)
class LabConfig:
    preset: str = "desk"
    paths: PathsConfig = field(default_factory=PathsConfig)
    engine: EngineParams = field(default_factory=EngineParams)
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    savi_train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: Dict[str, Any] = field(default_factory=dict)

    def to_toml_dict(self) -> Dict[str, Any]:
        generator = self.generator.to_dict()
        generator.pop("engine")
        generator["palette"] = [list(rgb) for rgb in self.generator.palette]
        encoder = self.encoder.to_dict()
        encoder.pop("image_size")
        rollout = self.rollout.to_dict()
        for derived in ("engine", "slot_dim", "num_slots"):
            rollout.pop(derived)
        payload = {
            "preset": self.preset,
            "paths": dataclasses.asdict(self.paths),
            "engine": self.engine.to_dict(),
            "generator": generator,
            "encoder": encoder,
            "savi_train": self.savi_train.to_dict(),
            "rollout": rollout,
            "train": self.train.to_dict(),
        }
        if self.experiment:
            payload["experiment"] = copy.deepcopy(self.experiment)
        return payload

    def with_section(self, **sections: Any) -> "LabConfig":
        return dataclasses.replace(self, **sections)


# ------------------------------
# Section builders
# ------------------------------
def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def build_section(cls: Type[T], section: str, data: Mapping[str, Any], **fixed: Any) -> T:
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigValidationError(f"{section}.{key}", "unknown key", value)
        if key in fixed:
            raise ConfigValidationError(f"{section}.{key}", "derived from another section, do not set it here", value)
        spec = known[key]
        default = spec.default if spec.default is not dataclasses.MISSING else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigValidationError(f"{section}.{key}", "must be a boolean", value)
        if _is_number(default) and not _is_number(value):
            raise ConfigValidationError(f"{section}.{key}", "must be a number", value)
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigValidationError(f"{section}.{key}", "must be an integer", value)
            value = int(value)
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigValidationError(f"{section}.{key}", "must be a string", value)
        kwargs[key] = value
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except ConfigValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(section, str(exc)) from exc


def engine_from_dict(data: Mapping[str, Any]) -> EngineParams:
    return build_section(EngineParams, "engine", data)


def generator_from_dict(data: Mapping[str, Any], engine: Optional[EngineParams] = None) -> GeneratorParams:
    data = dict(data)
    engine_data = data.pop("engine", None)
    if engine is None:
        engine = engine_from_dict(engine_data or {})
    return build_section(GeneratorParams, "generator", data, engine=engine)


def encoder_from_dict(data: Mapping[str, Any], **fixed: Any) -> EncoderConfig:
    return build_section(EncoderConfig, "encoder", data, **fixed)


def train_from_dict(data: Mapping[str, Any], section: str = "train") -> TrainConfig:
    return build_section(TrainConfig, section, data)


def rollout_from_dict(data: Mapping[str, Any], engine: Optional[EngineParams] = None, **fixed: Any) -> RolloutConfig:
    data = dict(data)
    engine_data = data.pop("engine", None)
    if engine is None:
        engine = engine_from_dict(engine_data or {})
    transformer = build_section(TransformerSpec, "rollout.transformer", data.pop("transformer", {}))
    return build_section(RolloutConfig, "rollout", data, engine=engine, transformer=transformer, **fixed)


# ------------------------------
# TOML
# ------------------------------
def load_toml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError("config", f"file not found: {path}")
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigValidationError("config", f"invalid TOML in {path.name}: {exc}") from exc


def dump_config(config: LabConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tomli_w.dumps(config.to_toml_dict()).encode("utf-8"))
    return path


def merge_dicts(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursive key-by-key merge; tables merge, everything else is replaced."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def preset_path(preset: str) -> Path:
    if preset not in PRESETS:
        raise ConfigValidationError("preset", f"must be one of {list(PRESETS)}", preset)
    return CONFIG_DIR / f"{preset}.toml"


# ------------------------------
# Assembly
# ------------------------------
def _env_overrides() -> Dict[str, Any]:
    load_dotenv()
    paths: Dict[str, Any] = {}
    for env, key in (("LAB_DATA_DIR", "data_dir"), ("LAB_RUNS_DIR", "runs_dir"), ("LAB_DEVICE", "device"), ("LAB_LOG_LEVEL", "log_level")):
        value = os.getenv(env)
        if value:
            paths[key] = value
    workers = os.getenv("LAB_NUM_WORKERS")
    if workers:
        try:
            paths["num_workers"] = int(workers)
        except ValueError as exc:
            raise ConfigValidationError("paths.num_workers", "LAB_NUM_WORKERS must be an integer", workers) from exc
    return {"paths": paths} if paths else {}


def config_from_dict(data: Mapping[str, Any], preset: str = "desk") -> LabConfig:
    unknown = set(data) - set(SECTIONS) - {"preset"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigValidationError(key, f"unknown section (expected one of {list(SECTIONS)})")

    paths = build_section(PathsConfig, "paths", data.get("paths", {}))
    engine = engine_from_dict(data.get("engine", {}))
    generator = generator_from_dict(data.get("generator", {}), engine=engine)
    encoder = encoder_from_dict(data.get("encoder", {}), image_size=(generator.height, generator.width))
    rollout = rollout_from_dict(
        data.get("rollout", {}), engine=engine, slot_dim=encoder.slot_dim, num_slots=encoder.num_slots
    )
    if generator.k_max > encoder.num_slots:
        raise ConfigValidationError("generator.k_max", "must not exceed encoder.num_slots", generator.k_max)
    if generator.num_frames < rollout.context_len + max(rollout.train_horizon, rollout.eval_horizon):
        raise ConfigValidationError(
            "generator.num_frames", "must cover context_len + the longest horizon", generator.num_frames
        )
    experiment = dict(data.get("experiment", {}))
    if experiment:
        from core.experiments import ExperimentSpec

        ExperimentSpec.from_dict(experiment)
    return LabConfig(
        preset=preset,
        paths=paths,
        engine=engine,
        generator=generator,
        encoder=encoder,
        savi_train=train_from_dict(data.get("savi_train", {}), "savi_train"),
        rollout=rollout,
        train=train_from_dict(data.get("train", {})),
        experiment=experiment,
    )


def apply_seed(config: LabConfig, seed: int) -> LabConfig:
    return config.with_section(
        generator=dataclasses.replace(config.generator, seed=seed),
        savi_train=dataclasses.replace(config.savi_train, seed=seed),
        train=dataclasses.replace(config.train, seed=seed),
    )


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True,
) -> LabConfig:
    user = load_toml(path) if path else {}
    preset = preset or user.get("preset") or "desk"
    data = merge_dicts(load_toml(preset_path(preset)), user)
    if use_env:
        data = merge_dicts(data, _env_overrides())
    if overrides:
        data = merge_dicts(data, overrides)
    data["preset"] = preset
    config = config_from_dict(data, preset=preset)
    if seed is not None:
        config = apply_seed(config, seed)
    logger.debug("Resolved %s config from %s", preset, path or "preset only")
    return config


def config_hash(config: Union[LabConfig, Mapping[str, Any]], sections: Optional[tuple] = None) -> str:
    """Content hash of the resolved config (optionally a subset of sections) plus the code version."""
    payload = config.to_toml_dict() if isinstance(config, LabConfig) else dict(config)
    if sections is not None:
        payload = {key: payload.get(key) for key in sections}
    return content_hash({"version": __version__, "config": payload})
