"""Benchmark configuration: a flat dataclass read from a line-oriented ``key = value`` file."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..ransac import MODES


class ConfigError(ValueError):
    pass


@dataclass
class BenchmarkConfig:
    seed: int = 0
    pairs: int = 50
    trials: int = 1
    # scene
    base_shape: str = "terrain"
    point_count: int = 30000
    extent: float = 2.0
    overlap: float = 0.7
    noise_sigma: float = 0.025
    dropout: float = 0.0
    outliers: float = 0.0
    max_angle_deg: float = 180.0
    max_translation: float = 1.0
    # features
    voxel: float = 0.05
    radius: float = 0.4
    keypoints: int = 500
    min_eig: float = 0.03
    weights: str = ""  # empty: bundled default weights
    refine: str = "auto"  # auto | regressor | geometric | none
    # estimation
    modes: tuple[str, ...] = MODES
    iterations: int = 1000
    tau: float = 0.1  # RANSAC inlier threshold
    refit: bool = True
    distance_check: bool = False
    icp: bool = False
    icp_max_iter: int = 50
    # evaluation
    tau_c: float = 0.1
    tau_r: float = 0.2
    rr_use_mean: bool = False
    curve_budgets: tuple[int, ...] = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)
    threads: int = 1
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {self.modes}")
        if self.refine not in ("auto", "regressor", "geometric", "none"):
            raise ConfigError(f"unknown refine option {self.refine!r}")
        for name in ("pairs", "trials", "keypoints", "iterations", "threads", "point_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("voxel", "radius", "tau", "tau_c", "tau_r", "extent"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.overlap <= 1:
            raise ConfigError("overlap must be in (0, 1]")

    @property
    def max_angle(self) -> float:
        return math.radians(self.max_angle_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d["modes"] = list(self.modes)
        d["curve_budgets"] = list(self.curve_budgets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkConfig:
        known = {f.name: f for f in fields(cls) if f.name != "extra"}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: _coerce(known[k].type, v, k) for k, v in d.items()}
        return cls(**kw)

    def replace(self, **overrides) -> BenchmarkConfig:
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return BenchmarkConfig.from_dict(d)


def _coerce(type_name, v, key):
    t = str(type_name)
    try:
        if t.startswith("tuple[str"):
            items = v.split(",") if isinstance(v, str) else v
            return tuple(s.strip() for s in items if str(s).strip())
        if t.startswith("tuple[int"):
            items = v.split(",") if isinstance(v, str) else v
            return tuple(int(s) for s in items if str(s).strip())
        if t == "bool":
            if isinstance(v, bool):
                return v
            s = str(v).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {v!r}")
        if t == "int":
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(f"not an integer: {v!r}")
            return int(v)
        if t == "float":
            return float(v)
        return str(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored; later keys win."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def load_config(path: str | Path | None = None, **overrides) -> BenchmarkConfig:
    """Defaults, then the file (if any), then non-None keyword overrides."""
    d = parse_config_text(Path(path).read_text()) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return BenchmarkConfig.from_dict(d)


def dump_config(cfg: BenchmarkConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
