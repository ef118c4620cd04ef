"""Run configuration: typed sections, two shipped profiles, and a line-based text format.

The text format is ``[section]`` headers followed by ``key = value`` lines;
``#`` starts a comment. Tuples are written comma-separated. Unknown sections
or keys raise :class:`ConfigError` naming the offender.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import get_type_hints

KMH = 1000.0 / 3600.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    width_m: float = 60.0
    height_m: float = 60.0
    cell_size: float = 0.5
    n_classes: int = 4
    # area shares of the non-obstacle classes, smooth first
    class_fractions: tuple = (0.5, 0.3, 0.2)
    terrain_scale: float = 3.0
    canopy_fraction: float = 0.2
    grass_fraction: float = 0.2
    mask_scale: float = 5.0
    tree_density: float = 0.06
    rock_density: float = 0.004
    rock_cluster: int = 3
    border: bool = True
    max_retries: int = 20


@dataclass(frozen=True)
class SimConfig:
    speed: float = 6.0 * KMH
    wheelbase: float = 0.5
    max_steer_deg: float = 30.0
    dt: float = 1.0 / 6.0
    collision_range: float = 0.4
    n_beams: int = 9
    fan_deg: float = 90.0
    max_range: float = 4.0


@dataclass(frozen=True)
class CameraConfig:
    ground_height: int = 24
    ground_width: int = 32
    aerial_height: int = 24
    aerial_width: int = 32
    hfov_deg: float = 90.0
    cam_height: float = 0.4
    pitch_deg: float = 33.0
    view_depth: float = 8.0
    march_step: float = 0.1
    grass_view_depth: float = 0.8
    obstacle_height: float = 1.5
    grass_height: float = 1.0
    patch_length: float = 9.0
    patch_width: float = 12.0
    patch_offset: float = 1.5
    noise_amplitude: float = 20.0 / 255.0


@dataclass(frozen=True)
class ImuConfig:
    n_samples: int = 20
    rate: float = 60.0
    # RMS acceleration (m/s^2) of each clustered class at the reference speed
    amplitudes: tuple = (0.3, 1.0, 2.5)
    frequencies: tuple = (6.0, 12.0, 21.0)
    freq_jitter: float = 1.0
    amp_jitter: float = 0.1
    noise: float = 0.15
    ref_speed: float = 6.0 * KMH
    speed_exponent: float = 1.0


@dataclass(frozen=True)
class LabelConfig:
    n_bins: int = 15
    max_freq: float = 30.0
    restarts: int = 10
    max_iter: int = 100
    obstacle_threshold: float = 0.75


@dataclass(frozen=True)
class ExploreConfig:
    hold_mean: float = 1.5
    hold_std: float = 0.5
    hold_min: float = 0.2
    jitter_std: float = 0.05


@dataclass(frozen=True)
class CollectConfig:
    episodes: int = 60
    max_steps: int = 720
    sample_mode: str = "time"
    sample_distance: float = 0.35
    spawn_clearance: float = 2.0
    train_fraction: float = 0.75


@dataclass(frozen=True)
class ArchConfig:
    n_classes: int = 4
    horizon: int = 8
    history: int = 4
    ground_shape: tuple = (24, 32)
    aerial_shape: tuple = (24, 32)
    channels: tuple = (16, 32, 32, 32)
    kernels: tuple = (4, 3, 3, 3)
    strides: tuple = (2, 2, 1, 1)
    paddings: tuple = (0, 0, 0, 0)
    hidden: int = 64
    embed: int = 16
    mode: str = "fusion"
    dropout: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    l2: float = 1e-6
    steps: int = 3000
    eval_every: int = 250
    eval_samples: int = 512


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 128
    scheme: str = "held_interval"
    collision_veto: bool = False
    veto_threshold: float = 0.5


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 30
    max_steps: int = 720
    spawn_smooth_only: bool = True


@dataclass(frozen=True)
class SeedConfig:
    train_world: int = 1
    test_world: int = 2
    collect: int = 11
    label: int = 12
    train: int = 13
    eval: int = 14


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    world: WorldConfig = field(default_factory=WorldConfig)
    test_world: WorldConfig = field(default_factory=WorldConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    labeling: LabelConfig = field(default_factory=LabelConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def with_section(self, name, **changes):
        return replace(self, **{name: replace(getattr(self, name), **changes)})


SECTIONS = [f.name for f in fields(RunConfig) if f.name != "profile"]


def desk_profile() -> RunConfig:
    """Small images and short horizon; the whole pipeline fits a CI budget."""
    # dense canopy and grass so that each view is blind somewhere
    world = WorldConfig(canopy_fraction=0.5, grass_fraction=0.2)
    return RunConfig(
        profile="desk",
        world=world,
        test_world=world,
        camera=CameraConfig(grass_view_depth=0.3),
        collect=CollectConfig(episodes=600),
        train=TrainConfig(steps=6000),
        eval=EvalConfig(episodes=60, max_steps=240),
    )


def paper_profile() -> RunConfig:
    """Full-size network and the simulation hyperparameters reported for it."""
    arch = ArchConfig(
        n_classes=4, horizon=12, history=4,
        ground_shape=(72, 128), aerial_shape=(72, 128),
        channels=(32, 64, 64, 64), kernels=(8, 4, 4, 3), strides=(4, 2, 2, 1),
        # a valid 3x3 on the 2-row map would collapse it; pad only that layer
        paddings=(0, 0, 0, 1),
    )
    camera = CameraConfig(ground_height=72, ground_width=128, aerial_height=72, aerial_width=128)
    return RunConfig(
        profile="paper",
        test_world=WorldConfig(canopy_fraction=0.12, grass_fraction=0.28),
        camera=camera,
        arch=arch,
        train=TrainConfig(learning_rate=1e-4, steps=28000),
        collect=CollectConfig(episodes=600),
    )


def real_profile() -> RunConfig:
    """Field-trial settings: three classes, longer horizon, distance-based sampling."""
    base = paper_profile()
    return replace(
        base,
        profile="real",
        world=replace(base.world, n_classes=3, class_fractions=(0.6, 0.4)),
        test_world=replace(base.test_world, n_classes=3, class_fractions=(0.6, 0.4)),
        imu=replace(base.imu, amplitudes=(0.4, 1.6), frequencies=(6.0, 15.0)),
        arch=replace(base.arch, n_classes=3, horizon=16),
        collect=replace(base.collect, sample_mode="distance"),
        train=replace(base.train, steps=8000),
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile, "real": real_profile}


def get_profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


# --------------------------------------------------------------------------- #
# text round trip


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, kind, default, key):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            elem = type(default[0]) if default else float
            return tuple(elem(t) for t in text.split(",") if t.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def dumps(config: RunConfig) -> str:
    lines = [f"profile = {config.profile}"]
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config document; values not mentioned keep ``base`` (or the
    document's ``profile``) defaults."""
    entries: dict[str, dict[str, str]] = {}
    profile = None
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}] (line {lineno})")
            entries.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if section is None:
            if key != "profile":
                raise ConfigError(f"unknown key {key!r} outside any section (line {lineno})")
            profile = value
        else:
            entries[section][key] = value
    if base is None:
        base = get_profile(profile or "desk")
    elif profile is not None and profile != base.profile:
        base = get_profile(profile)
    return apply_overrides(base, entries)


def apply_overrides(config: RunConfig, entries: dict) -> RunConfig:
    for name, values in entries.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(config, name)
        hints = get_type_hints(type(section))
        known = {f.name: f for f in fields(section)}
        changes = {}
        for key, text in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            default = getattr(section, key)
            kind = hints[key]
            if not isinstance(kind, type):
                kind = type(default)
            changes[key] = text if not isinstance(text, str) else \
                _parse_value(text, kind, default, f"{name}.{key}")
        config = replace(config, **{name: replace(section, **changes)})
    return config


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dumps(config).encode()).hexdigest()


def section_text(section) -> str:
    """``key = value`` lines for one section, used in artifact headers."""
    return "".join(f"{f.name} = {_format_value(getattr(section, f.name))}\n"
                   for f in dataclasses.fields(section))


def section_from_text(cls, text: str):
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = (t.strip() for t in line.split("=", 1))
            kv[k] = v
    hints = get_type_hints(cls)
    default = cls()
    out = {}
    for f in fields(cls):
        if f.name in kv:
            kind = hints[f.name]
            out[f.name] = _parse_value(kv[f.name], kind, getattr(default, f.name), f.name)
    unknown = set(kv) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) for {cls.__name__}: {sorted(unknown)}")
    return cls(**out)
