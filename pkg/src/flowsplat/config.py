"""Flat ``section.key=value`` configuration files.

Every dataclass field of :class:`PipelineConfig` is addressable by its dotted
path, e.g. ``tracking.max_iterations=100``, ``mapping.learning_rates.static.colors=0.02``
or ``synth.objects.0.waypoints=-0.4,0,0.9;0.2,0,0.9``. Values are parsed by
the type of the field's default. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data.synthetic import ObjectSpec, SyntheticSceneConfig
from .errors import ConfigError
from .mapping import MappingConfig
from .motion import RobustFitConfig
from .render import RenderConfig
from .tracking import TrackingConfig

SYNTHETIC = "synthetic"


@dataclass
class DataConfig:
    # "synthetic" or the path of a TUM-layout directory
    source: str = SYNTHETIC
    max_frames: int | None = None
    association_tolerance: float = 0.02
    depth_scale: float = 5000.0
    intrinsics: str | None = None  # intrinsics.txt overriding the dataset's own
    use_semantic_masks: bool = True


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticSceneConfig = field(default_factory=lambda: SyntheticSceneConfig(objects=[ObjectSpec()]))
    motion: RobustFitConfig = field(default_factory=RobustFitConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    output_dir: str = "output"
    seed: int = 0
    deterministic: bool = False
    gmm_components: int = 3
    temporal_model: str = "gmm"
    use_motion_decomposition: bool = True
    color_refinement: bool = True
    write_renders: bool = True
    write_snapshots: bool = True
    # seconds covered by normalized time; defaults to the loaded sequence span
    sequence_duration: float | None = None

    def validate(self) -> "PipelineConfig":
        if self.data.source != SYNTHETIC and not Path(self.data.source).is_dir():
            raise ConfigError(f"data.source {self.data.source!r} is not a directory")
        if self.data.intrinsics is not None and not Path(self.data.intrinsics).is_file():
            raise ConfigError(f"data.intrinsics {self.data.intrinsics!r} does not exist")
        if self.temporal_model not in ("gmm", "constant"):
            raise ConfigError(f"unknown temporal_model {self.temporal_model!r}")
        if self.gmm_components < 1:
            raise ConfigError("gmm_components must be at least 1")
        if self.sequence_duration is not None and self.sequence_duration <= 0:
            raise ConfigError("sequence_duration must be positive")
        # the shared render settings drive both tracking and mapping
        self.tracking.render = self.render
        self.mapping.render = self.render
        return self


# -- value parsing ------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tuple(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


def _parse_points(text: str) -> list:
    return [_parse_tuple(p) for p in text.split(";") if p.strip()]


def _annotation(obj, name: str) -> str:
    for f in dataclasses.fields(obj):
        if f.name == name:
            return str(f.type)
    return ""


def _convert(current, annotation: str, text: str):
    text = text.strip()
    if text.lower() == "none" and ("None" in annotation or current is None):
        return None
    if isinstance(current, bool) or annotation.startswith("bool"):
        return _parse_bool(text)
    if isinstance(current, int) or annotation.startswith("int"):
        return int(text)
    if isinstance(current, float) or annotation.startswith("float"):
        return float(text)
    if isinstance(current, tuple):
        return _parse_tuple(text)
    if isinstance(current, list):
        return _parse_points(text)
    return text


def _set_objects(scene: SyntheticSceneConfig, rest: list[str], text: str) -> None:
    if not rest:
        count = int(text)
        if count < 0:
            raise ValueError("object count must be non-negative")
        scene.objects = scene.objects[:count] + [ObjectSpec() for _ in range(count - len(scene.objects))]
        return
    idx = int(rest[0])
    while len(scene.objects) <= idx:
        scene.objects.append(ObjectSpec())
    _assign(scene.objects[idx], rest[1:], text)


def _assign(obj, parts: list[str], text: str) -> None:
    name = parts[0]
    if isinstance(obj, dict):
        key = ".".join(parts)
        if key not in obj:
            raise KeyError(key)
        obj[key] = _convert(obj[key], "", text)
        return
    if not dataclasses.is_dataclass(obj) or not hasattr(obj, name):
        raise KeyError(name)
    if isinstance(obj, SyntheticSceneConfig) and name == "objects":
        _set_objects(obj, parts[1:], text)
        return
    if isinstance(obj, (TrackingConfig, MappingConfig)) and name == "render":
        raise KeyError("render settings are shared; use render.*")
    current = getattr(obj, name)
    if len(parts) > 1:
        _assign(current, parts[1:], text)
        return
    if dataclasses.is_dataclass(current) or isinstance(current, dict):
        raise KeyError(f"{name} is a section, not a value")
    setattr(obj, name, _convert(current, _annotation(obj, name), text))


def apply_override(cfg: PipelineConfig, key: str, value: str) -> None:
    try:
        _assign(cfg, key.strip().split("."), value)
    except KeyError as exc:
        raise ConfigError(f"unknown config key {key!r} ({exc})") from None
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        apply_override(cfg, key, value)
    _revalidate(cfg)
    return cfg


def _revalidate(cfg: PipelineConfig) -> None:
    # re-run dataclass checks on the sub-configs after field assignment
    for sub in (cfg.motion, cfg.tracking, cfg.mapping):
        try:
            sub.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path, overrides: list[str] | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cfg = parse_config(path.read_text())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        apply_override(cfg, *item.split("=", 1))
    _revalidate(cfg)
    return cfg


# -- serialization --------------------------------------------------------------


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(x)) for x in value)
    if isinstance(value, list):
        return ";".join(_format(tuple(p)) for p in value)
    return str(value)


def _flatten(obj, prefix: str, out: list[str]) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.append(f"{prefix}{k}={_format(v)}")
        return
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if isinstance(obj, SyntheticSceneConfig) and f.name == "objects":
            out.append(f"{key}={len(value)}")
            for i, o in enumerate(value):
                _flatten(o, f"{key}.{i}.", out)
        elif dataclasses.is_dataclass(value) or isinstance(value, dict):
            if isinstance(value, RenderConfig) and prefix in ("tracking.", "mapping."):
                continue  # shared copy lives under render.*
            _flatten(value, key + ".", out)
        else:
            out.append(f"{key}={_format(value)}")


def dump_config(cfg: PipelineConfig) -> str:
    lines: list[str] = []
    _flatten(cfg, "", lines)
    return "\n".join(lines) + "\n"
