"""Run configuration backed by TOML."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import DomainError
from .fields import BACKENDS, HashGridConfig
from .occupancy import DEFAULT_THRESHOLD, PAPER_POOL

ITERATIONS_PER_FRAME = 300


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    backend: str = "humanrf"
    levels: int = 8
    features_per_level: int = 2
    min_resolution: int = 16
    max_resolution: int = 256
    table_size_log2: int = 15
    match_budget: bool = False
    threshold: float = DEFAULT_THRESHOLD
    pool: tuple = PAPER_POOL
    segment_size: int = 0  # > 0 replaces adaptive partitioning with fixed-length segments
    occupancy_resolution: int = 128
    dilation_px: int = 1
    skip_empty: bool = True
    iterations: int = -1  # negative means frames x ITERATIONS_PER_FRAME
    max_samples: int = 65536
    n_steps: int = 256
    frames_per_batch: int = 8
    lr_start: float = 1e-2
    lr_end: float = 5e-3
    checkpoint_every: int = 1000
    log_every: int = 1
    deterministic: bool = True
    threads: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(tuple(int(v) for v in p) for p in self.pool))
        if self.backend not in BACKENDS:
            raise DomainError(f"unknown backend {self.backend!r}")
        if self.dtype not in ("float32", "float64"):
            raise DomainError("dtype must be float32 or float64")
        if self.max_samples < 1 or self.n_steps < 1 or self.frames_per_batch < 1:
            raise DomainError("max_samples, n_steps and frames_per_batch must be positive")
        if self.segment_size < 0 or self.threads < 1:
            raise DomainError("segment_size must be >= 0 and threads >= 1")
        if self.threshold <= 1:
            raise DomainError("threshold must exceed 1")
        self.grid  # validates the grid fields

    @property
    def grid(self) -> HashGridConfig:
        return HashGridConfig(self.levels, self.features_per_level, self.min_resolution,
                              self.max_resolution, self.table_size_log2)

    def total_iterations(self, num_frames: int) -> int:
        return self.iterations if self.iterations >= 0 else num_frames * ITERATIONS_PER_FRAME

    def resolved(self, num_frames: int) -> "RunConfig":
        return replace(self, iterations=self.total_iterations(num_frames))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool"] = [list(p) for p in self.pool]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise DomainError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_toml(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml(), encoding="utf-8")

    def override(self, **kwargs) -> "RunConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})
