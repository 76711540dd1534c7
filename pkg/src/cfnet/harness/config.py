"""Training configuration and the plain-text ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..network import ArchConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 5e-5
    lambda_init: float = 0.5
    halving_period: int | None = None  # None -> max_iters // 4
    cosine_floor: float = 0.1
    warmup: int = 0
    batch_size: int = 8
    patch_size: int = 32
    max_iters: int = 1000
    seed: int = 0
    mode: str = "nonblind"  # nonblind | blind | hetero
    sigma: float = 25.0
    sigma_lo: float = 0.0
    sigma_hi: float = 55.0
    sigma_d_range: tuple[float, float] = (0.0, 0.16)
    sigma_s_range: tuple[float, float] = (0.0, 0.06)
    gamma: float = 2.2
    quantize: int = 0
    alpha: float = 0.35
    rec_norm: str = "l2"
    real_ratio: float = 0.0
    val_every: int = 100
    val_count: int = 8
    val_seed: int = 1234
    ckpt_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_size % 4:
            raise ConfigError(f"patch_size must be a multiple of 4, got {self.patch_size}")
        if self.batch_size <= 0 or self.max_iters < 0:
            raise ConfigError("batch_size must be positive and max_iters non-negative")
        if self.mode not in ("nonblind", "blind", "hetero"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.alpha < 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError("real_ratio must lie in [0, 1]")

    @property
    def period(self) -> int:
        if self.halving_period:
            return int(self.halving_period)
        return max(1, self.max_iters // 4)


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(type(target[0])(v) for v in value.replace(",", " ").split())
    return value.strip()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def train_config_from(kv: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    updates = {}
    for k, v in kv.items():
        if k not in fields:
            continue
        cur = fields[k]
        if cur is None:
            updates[k] = int(v) if v.lower() != "none" else None
        else:
            updates[k] = _coerce(v, cur)
    return dataclasses.replace(base, **updates)


_ARCH_KEYS = {"width_plan", "t", "k", "g", "input_channels", "nem_width", "seed", "zero_residual", "variant", "base_channels", "atb", "cfb", "dne"}


def arch_config_from(kv: dict[str, str], base: ArchConfig | None = None) -> ArchConfig:
    d = (base or ArchConfig()).to_dict()
    for k, v in kv.items():
        key = k[5:] if k.startswith("arch.") else k
        if key not in _ARCH_KEYS or (key == "seed" and not k.startswith("arch.")):
            continue
        if key == "width_plan":
            d[key] = tuple(int(x) for x in v.replace(",", " ").split())
        elif key == "variant":
            d["variant"] = v
            for flag in ("atb", "cfb", "dne"):
                d.pop(flag, None)
        elif key == "base_channels":
            d.pop("width_plan", None)
            d[key] = int(v)
        elif key in ("zero_residual", "atb", "cfb", "dne"):
            d[key] = v.lower() in ("1", "true", "yes", "on")
        else:
            d[key] = int(v)
    return ArchConfig.from_dict(d)


def arch_to_text(arch: ArchConfig) -> str:
    d = arch.to_dict()
    lines = []
    for k, v in d.items():
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"arch.{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config_file(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())
