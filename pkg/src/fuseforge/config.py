"""Run configuration: dataclasses plus a small ``section.key = value`` text format.

Example::

    # comments start with '#'
    tracker.lambda_photo = 0.1
    tracker.iters_per_level = 10, 5, 4
    tracker.angle_reject = 20        # degrees in files, radians in memory
    volume.voxel_size = 0.01
    camera.fx = 520.9
"""
from dataclasses import dataclass, field, fields, replace
import math
from pathlib import Path

from .camera import PinholeIntrinsics
from .nonrigid import NonRigidConfig
from .tracking import TrackerConfig

# keys written in degrees in config files
DEGREE_KEYS = {"tracker.angle_reject", "nonrigid.angle_reject"}


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def intrinsics(self) -> PinholeIntrinsics:
        return PinholeIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class VolumeConfig:
    voxel_size: float = 0.01
    truncation: float = 0.04
    w_max: float = 128.0
    table_size: int = 1 << 20


@dataclass
class PreprocessConfig:
    levels: int = 3
    bilateral: bool = True
    sigma_spatial: float = 2.0
    sigma_range: float = 0.05
    normal_step: int = 1
    depth_min: float = 0.1
    depth_max: float = 4.0


@dataclass
class GraphConfig:
    node_count: int = 273
    k: int = 4
    radius_scale: float = 1.5


@dataclass
class SuiteConfig:
    rows: int = 21
    cols: int = 13
    extent: float = 1.0
    amplitude: float = 0.02
    kinds: tuple = ("sinusoid", "bend", "fold")


@dataclass
class RunConfig:
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    nonrigid: NonRigidConfig = field(default_factory=NonRigidConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)


def _convert(raw: str, current):
    """Parse `raw` into the type of the current default value."""
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw)
    if isinstance(current, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if current and isinstance(current[0], (int, float)) and not isinstance(current[0], bool):
            kind = type(current[0])
            return tuple(kind(x) for x in items)
        return tuple(items)
    return raw


def parse_config_text(text: str, base: RunConfig = None, source: str = "<config>") -> RunConfig:
    cfg = base or RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in s.split("=", 1))
        if key == "seed":
            try:
                cfg = replace(cfg, seed=int(raw))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or not hasattr(sections[sec], name) or sec == "seed":
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            val = _convert(raw, getattr(sections[sec], name))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        if key in DEGREE_KEYS:
            val = math.radians(val)
        updates.setdefault(sec, {})[name] = val
    for sec, vals in updates.items():
        try:
            sections[sec] = replace(sections[sec], **vals)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: invalid {sec} settings: {exc}") from exc
    return replace(cfg, **{k: v for k, v in sections.items() if k in updates})


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text, source=str(p))


def format_config(cfg: RunConfig) -> str:
    """Inverse of parse_config_text (angles written back in degrees)."""
    lines = [f"seed = {cfg.seed}"]
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        if not hasattr(sec, "__dataclass_fields__"):
            continue
        for sf in fields(sec):
            val = getattr(sec, sf.name)
            key = f"{f.name}.{sf.name}"
            if key in DEGREE_KEYS:
                val = math.degrees(val)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
    return "\n".join(lines) + "\n"


__all__ = ["RunConfig", "CameraConfig", "VolumeConfig", "PreprocessConfig", "GraphConfig", "SuiteConfig",
           "ConfigError", "parse_config_text", "load_config", "format_config"]
