"""Run configuration: dataclasses plus a flat TOML loader.

Preset files live in ``svlab/configs``. Every key is top level; unknown keys
and type errors are reported with the line they appear on.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

PRESET_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    delta_v: float = math.inf
    k_min: int = 1
    k_max: int = 1
    static_mode: bool = False
    kmin_decay_fraction: float = 0.0

    def __post_init__(self):
        if self.static_mode:
            # a static interval K is k_min = k_max = K with every round counted stable
            object.__setattr__(self, "k_min", self.k_max)
            object.__setattr__(self, "delta_v", math.inf)
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= k_min <= k_max, got k_min={self.k_min}, k_max={self.k_max}")
        if not self.delta_v >= 0:
            raise ConfigError(f"delta_v must be >= 0, got {self.delta_v}")
        if not 0.0 <= self.kmin_decay_fraction <= 1.0:
            raise ConfigError("kmin_decay_fraction must be in [0, 1]")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    rho_bar: float = 5.0
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    lr_initial: float = 3e-4
    lr_final: float = 1e-5
    epochs: int = 4
    minibatch_size: int = 256
    num_envs: int = 16
    horizon: int = 128
    max_grad_norm: float = 1.0
    hidden: int = 64

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("epochs", "minibatch_size", "num_envs", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.hidden < 0:
            raise ConfigError("hidden must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.horizon


@dataclass(frozen=True)
class EnvConfig:
    env: str = "four_rooms"
    slip_prob: float = 0.8
    # random MDP settings, used when env == "random"
    num_states: int = 10
    num_actions: int = 3
    mdp_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    name: str = "unnamed"
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    total_rounds: int = 100
    seed: int = 0
    track_exact: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


_SECTIONS = {"env": EnvConfig, "ppo": PpoConfig, "gate": GateConfig}
_TOP = {"name", "total_rounds", "seed", "track_exact"}


def _key_lines(text: str) -> dict:
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if "=" in stripped:
            lines.setdefault(stripped.split("=", 1)[0].strip(), lineno)
    return lines


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _key_lines(text)
    owner = {f.name: sec for sec, cls in _SECTIONS.items() for f in fields(cls)}
    parts = {sec: {} for sec in _SECTIONS}
    top = {}
    for key, value in doc.items():
        if key in _TOP:
            top[key] = value
        elif key in owner:
            parts[owner[key]][key] = value
        else:
            raise ConfigError(f"{source}:{where.get(key, '?')}: unknown key {key!r}")
    try:
        for sec, cls in _SECTIONS.items():
            types = {f.name: f.type for f in fields(cls)}
            for key, value in parts[sec].items():
                parts[sec][key] = _coerce(key, value, types[key], source, where)
            parts[sec] = cls(**parts[sec])
        for key in ("total_rounds", "seed"):
            if key in top:
                top[key] = _coerce(key, top[key], "int", source, where)
        return RunConfig(**parts, **top)
    except ConfigError as exc:
        if str(exc).startswith(source):
            raise
        raise ConfigError(f"{source}: {exc}") from None


def _coerce(key, value, type_name, source, where):
    loc = f"{source}:{where.get(key, '?')}"
    if type_name == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{loc}: {key} must be an integer, got {value!r}")
        return value
    if type_name == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{loc}: {key} must be a number, got {value!r}")
        return float(value)
    if type_name == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{loc}: {key} must be true or false, got {value!r}")
        return value
    if type_name == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{loc}: {key} must be a string, got {value!r}")
        return value
    return value


def load_config(path_or_preset: str) -> RunConfig:
    """Load a config file, or a shipped preset by bare name."""
    path = Path(path_or_preset)
    if not path.exists():
        candidate = PRESET_DIR / f"{path_or_preset}.toml"
        if not candidate.exists():
            raise ConfigError(f"no config file or preset named {path_or_preset!r}")
        path = candidate
    return parse_config(path.read_text(), source=str(path))


def list_presets() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))
