"""Run configuration: flat-sectioned key=value files and flag overrides.

The file format is a deliberately small TOML-compatible subset: [section]
headers, one `key = value` per line, values limited to ints, floats,
true/false, double-quoted strings, and flat lists of numbers. Every field
has a default; unknown sections or keys are rejected; the fully-resolved
config is echoed into the run directory so a run is reproducible from its
own artifacts.
"""

from dataclasses import dataclass, field, fields
import re

import numpy as np

from .envs import PointMassEnv, TierSpec
from .trainer import Td3BcConfig


class ConfigError(Exception):
    pass


@dataclass
class EnvSection:
    kind: str = "point_mass"          # point_mass | point_mass_4d
    bounds_min: tuple = (0.0, 0.0)
    bounds_max: tuple = (1.0, 1.0)
    goal: tuple = (0.8, 0.8)
    dt: float = 1.0
    max_steps: int = 200
    action_scale: float = 0.05
    noise_std: float = 0.0
    sparse_reward: bool = False
    goal_tolerance: float = 0.0       # 0 -> 0.05 * box diagonal


@dataclass
class DataSection:
    tier: str = "medium"
    n_transitions: int = 5000
    seed: int = 7
    path: str = "dataset.orld"


@dataclass
class TrainSection:
    dataset: str = "dataset.orld"
    gamma: float = 0.99
    policy_lr: float = 3e-4
    qf_lr: float = 3e-4
    tau: float = 5e-3
    batch_size: int = 256
    max_epochs: int = 50
    steps_per_epoch: int = 1000
    phi: float = 2.5
    delta: int = 5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    eval_episodes: int = 10
    seed: int = 0
    use_hypercube: bool = True
    norm_eps: float = 1e-3
    hidden: tuple = (64, 64)


@dataclass
class OracleSection:
    n_states: int = 64
    n_actions: int = 4
    state_dim: int = 2
    gamma: float = 0.95
    seed: int = 0
    n_mdps: int = 10
    noise: float = 0.1                # fraction of the exact-Q range
    deltas: tuple = (1, 2, 4, 8, 16, 32)
    tol: float = 1e-9
    vi_tol: float = 1e-10
    mode: str = "oracle"              # oracle | empirical


@dataclass
class OutputSection:
    root: str = "runs"
    dir: str = ""                     # empty -> timestamped under root
    force: bool = False


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    output: OutputSection = field(default_factory=OutputSection)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# Value grammar

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_]+)\]$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_]+)\s*=\s*(.+)$")


def _parse_scalar(text: str):
    text = text.strip()
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse value {text!r}")


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return ()
        return tuple(_parse_scalar(p) for p in inner.split(","))
    return _parse_scalar(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_sections(text: str) -> dict:
    """Raw parse: {section: {key: value}} with no schema applied."""
    out: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#") else ""
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1)
            out.setdefault(current, {})
            continue
        m = _KEY_RE.match(line)
        if m:
            if current is None:
                raise ConfigError(f"line {lineno}: key outside any [section]")
            out[current][m.group(1)] = _parse_value(m.group(2))
            continue
        raise ConfigError(f"line {lineno}: cannot parse {raw!r}")
    return out


def format_sections(data: dict) -> str:
    lines = []
    for section, kv in data.items():
        lines.append(f"[{section}]")
        for key, value in kv.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Schema application

def _coerce(section: str, key: str, default, value):
    kind = type(default)
    where = f"{section}.{key}"
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, tuple):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = type(default[0]) if default else float
        if elem is float:
            return tuple(float(v) for v in value)
        if elem is int:
            for v in value:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{where}: expected integers, got {value!r}")
            return tuple(value)
        return value
    raise ConfigError(f"{where}: unsupported field type {kind}")


def apply_sections(config: RunConfig, data: dict) -> RunConfig:
    known = config.sections()
    for section, kv in data.items():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        target = known[section]
        valid = {f.name: getattr(target, f.name) for f in fields(target)}
        for key, value in kv.items():
            if key not in valid:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, valid[key], value))
    return config


def load_config(path) -> RunConfig:
    with open(path) as f:
        text = f.read()
    return apply_sections(RunConfig(), parse_sections(text))


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """overrides: {'train.seed': '3', ...} with raw string values."""
    data: dict = {}
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        data.setdefault(section, {})[key] = _parse_value(raw)
    return apply_sections(config, data)


def resolved_text(config: RunConfig) -> str:
    data = {}
    for name, section in config.sections().items():
        data[name] = {f.name: getattr(section, f.name) for f in fields(section)}
    return format_sections(data)


def dotted_keys(config: RunConfig) -> list:
    out = []
    for name, section in config.sections().items():
        for f in fields(section):
            out.append(f"{name}.{f.name}")
    return out


# ---------------------------------------------------------------------------
# Construction of domain objects

def build_env(section: EnvSection) -> PointMassEnv:
    if section.kind not in ("point_mass", "point_mass_4d"):
        raise ConfigError(f"env.kind {section.kind!r} unknown")
    return PointMassEnv(
        bounds_min=np.asarray(section.bounds_min, dtype=np.float64),
        bounds_max=np.asarray(section.bounds_max, dtype=np.float64),
        goal=np.asarray(section.goal, dtype=np.float64),
        dt=section.dt,
        max_steps=section.max_steps,
        action_scale=section.action_scale,
        noise_std=section.noise_std,
        sparse_reward=section.sparse_reward,
        include_velocity=section.kind == "point_mass_4d",
        goal_tolerance=section.goal_tolerance,
    )


def build_tier_spec(section: DataSection) -> TierSpec:
    return TierSpec(tier=section.tier, n_transitions=section.n_transitions,
                    seed=section.seed)


def build_train_config(section: TrainSection) -> Td3BcConfig:
    return Td3BcConfig(
        gamma=section.gamma,
        policy_lr=section.policy_lr,
        qf_lr=section.qf_lr,
        tau=section.tau,
        batch_size=section.batch_size,
        max_epochs=section.max_epochs,
        steps_per_epoch=section.steps_per_epoch,
        phi=section.phi,
        delta=section.delta,
        policy_noise=section.policy_noise,
        noise_clip=section.noise_clip,
        policy_delay=section.policy_delay,
        eval_episodes=section.eval_episodes,
        seed=section.seed,
        use_hypercube=section.use_hypercube,
        norm_eps=section.norm_eps,
        hidden=tuple(section.hidden),
    )
