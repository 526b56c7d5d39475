"""Flat ``key=value`` config files and the merged run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _int_list(value: str) -> list[int]:
    return [int(v) for v in value.replace(",", " ").split()]


@dataclass
class RunConfig:
    # data
    data: str = ""
    min_count: int = 5
    split_seed: int = 0
    eval_ratio: float = 0.8
    # model (defaults follow the reported setup)
    d: int = 64
    n: int = 20
    K: int = 4
    L: int = 3
    p: int = 64
    heads: int = 2
    dropout: float = 0.2
    disable_periodicity: bool = False
    disable_interactivity: bool = False
    disable_central_node: bool = False
    # training
    lr: float = 1e-3
    batch_size: int = 128
    negatives: int = 10
    negative_sampling: str = "uniform"
    max_iterations: int = 1_000_000
    eval_every: int = 1000
    patience: int = 5
    early_stop_metric: str = "recall@50"
    topn: list[int] = field(default_factory=lambda: [20, 50])
    seed: int = 0

    def validate(self, check_paths: bool = True) -> None:
        if check_paths:
            if not self.data:
                raise ConfigError("data: required (path to interaction CSV)")
            if not Path(self.data).is_file():
                raise ConfigError(f"data: file {self.data!r} does not exist")
        for name in ("min_count", "d", "n", "K", "p", "heads", "batch_size", "negatives",
                     "max_iterations", "eval_every", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.L < 0:
            raise ConfigError(f"L: must be >= 0, got {self.L}")
        if self.d % self.heads:
            raise ConfigError(f"heads: d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        if not 0.0 < self.eval_ratio < 1.0:
            raise ConfigError(f"eval_ratio: must be in (0, 1), got {self.eval_ratio}")
        if self.negative_sampling not in ("uniform", "popularity"):
            raise ConfigError(f"negative_sampling: expected uniform|popularity, got {self.negative_sampling!r}")
        if not self.topn or any(t < 1 for t in self.topn):
            raise ConfigError(f"topn: must be a non-empty list of positive ints, got {self.topn}")
        metric, _, at = self.early_stop_metric.partition("@")
        if metric not in ("recall", "ndcg", "hit_rate") or not at.isdigit() or int(at) not in self.topn:
            raise ConfigError(f"early_stop_metric: {self.early_stop_metric!r} must be recall|ndcg|hit_rate@N with N in topn")

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "RunConfig":
        cfg = cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"{key}: unknown config key")
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    parsed = _parse_bool(value)
                elif isinstance(current, list):
                    parsed = _int_list(value)
                else:
                    parsed = type(current)(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            setattr(cfg, key, parsed)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(parse_kv_file(path))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)
