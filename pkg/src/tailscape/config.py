"""Training configuration and ``key = value`` config-file resolution."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("CE", "CE+SAM", "CE+GKP", "CE+GSA", "CE+GKP+GSA", "GSA-proj")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "CE+GKP+GSA"
    lam: float = 100.0
    beta: float = 0.5
    groups: int = 4
    z: float = 1e-2
    alpha_start: float = 0.95
    alpha_end: float = 0.6
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    warmup_frac: float = 0.25
    batch_size: int = 64
    seed: int = 0
    hidden: tuple = (32, 32)
    regularizer: bool = False
    gkp_per_group: bool = True
    size_mode: str = "samples"
    radius_exponent: float = 0.25
    max_perturb: float = 0.05
    regroup_every: int = 0
    probe_iters: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not 0 <= self.alpha_end <= self.alpha_start <= 1:
            raise ConfigError("need 0 <= alpha_end <= alpha_start <= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        # one group is allowed: it reduces the method to its CE counterpart
        if self.groups < 1:
            raise ConfigError("groups must be >= 1")
        if self.lam < 0 or self.z < 0 or self.beta < 0 or self.max_perturb < 0:
            raise ConfigError("lam, z, beta and max_perturb must be non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.size_mode not in ("samples", "classes"):
            raise ConfigError("size_mode must be 'samples' or 'classes'")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden must list positive layer widths")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @property
    def warmup_epochs(self) -> int:
        return int(self.warmup_frac * self.epochs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(TrainConfig, key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r}") from None


def parse_lines(lines, source="<config>") -> dict:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(key, val)
    return out


def resolve_config(path=None, overrides=()) -> TrainConfig:
    """Defaults, then the config file, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        values.update(parse_lines(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_lines(overrides, "--set"))
    return TrainConfig(**values)
