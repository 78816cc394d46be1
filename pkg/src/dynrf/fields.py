"""Trainable feature functions: multi-resolution grids and the 4D decompositions.

Three interchangeable 4D backends are provided:

``humanrf``
    four 3D hash grids (xyz, xyt, xzt, yzt) each modulated elementwise by a
    dense 1D vector field over the remaining axis (t, z, y, x), summed.
``hex4d``
    six multi-resolution dense planes, paired as xy*zt + yz*xt + xz*yt.
``tngp``
    a single 4D hash grid over (x, y, z, t).

Inputs are normalized coordinates in [0, 1]; values outside are clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import DomainError
from .occupancy import Segment

BACKENDS = ("humanrf", "hex4d", "tngp")
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 2
    min_resolution: int = 16
    max_resolution: int = 256
    table_size_log2: int = 15
    # count every level at full table capacity, even when it would fit densely
    hash_all_levels: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise DomainError("levels and features_per_level must be positive")
        if not 1 <= self.min_resolution <= self.max_resolution:
            raise DomainError("need 1 <= min_resolution <= max_resolution")
        if self.features_per_level > 16:
            raise DomainError("at most 16 features per level")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self) -> list[int]:
        """Per-level lattice resolution, a floored geometric progression."""
        if self.levels == 1:
            return [self.min_resolution]
        lo, hi = math.log(self.min_resolution), math.log(self.max_resolution)
        step = (hi - lo) / (self.levels - 1)
        # the tolerance keeps the last level exactly at max_resolution
        return [int(math.floor(math.exp(lo + l * step) * (1 + 1e-12))) for l in range(self.levels)]


PAPER_GRID = HashGridConfig(16, 2, 32, 2048, 19, hash_all_levels=True)
DESK_GRID = HashGridConfig()


class MultiResGrid:
    """Stack of ``dim``-dimensional lattices, stored densely or in a hash table.

    Level ``l`` has ``K_l + 1`` vertices per axis. A level is stored densely
    when ``(K_l + 1) ** dim <= 2 ** T`` (unless ``hash_all_levels``), otherwise
    vertices are hashed into ``2 ** T`` slots. ``dense_only`` forces dense
    storage at every level regardless of ``T``.
    """

    def __init__(self, dim: int, config: HashGridConfig, dense_only: bool = False,
                 dtype=np.float32, rng: np.random.Generator | None = None):
        if not 1 <= dim <= 4:
            raise DomainError("grid dimension must be 1..4")
        self.dim = dim
        self.config = config
        self.dense_only = dense_only
        self.dtype = np.dtype(dtype)
        T = config.table_size_log2
        res = config.resolutions()
        sizes, hashed = [], []
        for K in res:
            n_dense = (K + 1) ** dim
            if dense_only or (not config.hash_all_levels and n_dense <= 2 ** T):
                sizes.append(n_dense)
                hashed.append(False)
            else:
                sizes.append(2 ** T)
                hashed.append(True)
        F = config.features_per_level
        self.resolution = np.array(res, dtype=np.int64)
        self.hashed = np.array(hashed, dtype=np.bool_)
        self.level_sizes = np.array(sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.level_sizes * F)]).astype(np.int64)
        self.mask = np.uint64(2 ** T - 1)
        self.params = np.zeros(int(self.offsets[-1]), dtype=self.dtype)
        self.grad = np.zeros_like(self.params)
        if rng is not None:
            self.params[:] = rng.uniform(-INIT_RANGE, INIT_RANGE, self.params.size)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    def level_table(self, level: int) -> np.ndarray:
        """View of one level's entries as (entries, F)."""
        F = self.config.features_per_level
        return self.params[self.offsets[level]:self.offsets[level + 1]].reshape(-1, F)

    def encode(self, x) -> np.ndarray:
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).reshape(-1, self.dim))
        out = np.empty((len(x), self.output_dim), dtype=self.dtype)
        fwd = _kernels.grid3_forward if self.dim == 3 else _kernels.grid_forward
        fwd(x, self.params, self.offsets, self.resolution, self.hashed,
                              self.mask, self.config.features_per_level, out)
        return out

    def backward(self, x, grad_out) -> None:
        """Accumulate d(loss)/d(params) into ``self.grad``."""
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).reshape(-1, self.dim))
        g = np.ascontiguousarray(np.asarray(grad_out, dtype=self.dtype).reshape(len(x), -1))
        bwd = _kernels.grid3_backward if self.dim == 3 else _kernels.grid_backward
        bwd(x, g, self.offsets, self.resolution, self.hashed,
                               self.mask, self.config.features_per_level, self.grad)

    def config_ints(self) -> list[int]:
        c = self.config
        return [self.dim, c.levels, c.features_per_level, c.min_resolution, c.max_resolution,
                c.table_size_log2, int(c.hash_all_levels), int(self.dense_only)]


class HashGrid3D(MultiResGrid):
    def __init__(self, config: HashGridConfig, dtype=np.float32, rng=None):
        super().__init__(3, config, dtype=dtype, rng=rng)


class DenseGrid1D:
    """``R`` feature vectors at positions i / (R - 1), linearly interpolated."""

    def __init__(self, resolution: int, dim: int, dtype=np.float32, rng=None):
        if resolution < 2:
            raise DomainError("a 1D grid needs at least two vectors")
        self.resolution = int(resolution)
        self.dim = int(dim)
        self.dtype = np.dtype(dtype)
        self.params = np.zeros(self.resolution * self.dim, dtype=self.dtype)
        self.grad = np.zeros_like(self.params)
        if rng is not None:
            self.params[:] = rng.uniform(-INIT_RANGE, INIT_RANGE, self.params.size)

    @property
    def vectors(self) -> np.ndarray:
        return self.params.reshape(self.resolution, self.dim)

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    def sample(self, x) -> np.ndarray:
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).reshape(-1))
        out = np.empty((len(x), self.dim), dtype=self.dtype)
        _kernels.lerp1d_forward(x, self.params, self.resolution, out)
        return out

    def backward(self, x, grad_out) -> None:
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).reshape(-1))
        g = np.ascontiguousarray(np.asarray(grad_out, dtype=self.dtype).reshape(len(x), self.dim))
        _kernels.lerp1d_backward(x, g, self.resolution, self.grad)

    def config_ints(self) -> list[int]:
        return [self.resolution, self.dim]


# (3D grid axes, 1D grid axis) for each term of the humanrf decomposition
_HUMANRF_TERMS = (((0, 1, 2), 3), ((0, 1, 3), 2), ((0, 2, 3), 1), ((1, 2, 3), 0))
# (plane a axes, plane b axes) for the hex4d decomposition
_HEX4D_TERMS = (((0, 1), (2, 3)), ((1, 2), (0, 3)), ((0, 2), (1, 3)))

SPATIAL_VECTOR_RESOLUTION = 64


class FeatureField4D:
    """One segment's trainable 4D feature function.

    ``components`` lists the trainable grids in declaration order (the order
    used by checkpoints and the optimizer).
    """

    def __init__(self, backend: str, segment: Segment, config: HashGridConfig,
                 dtype=np.float32, rng: np.random.Generator | None = None,
                 plane_config: HashGridConfig | None = None,
                 tngp_config: HashGridConfig | None = None,
                 time_resolution: int | None = None,
                 spatial_resolution: int = SPATIAL_VECTOR_RESOLUTION):
        if backend not in BACKENDS:
            raise DomainError(f"unknown backend {backend!r}")
        self.backend = backend
        self.segment = segment
        self.config = config
        self.dtype = np.dtype(dtype)
        m = config.output_dim
        self.components: list[tuple[str, object]] = []
        if backend == "humanrf":
            for name in ("xyz", "xyt", "xzt", "yzt"):
                self.components.append((name, HashGrid3D(config, dtype, rng)))
            R_t = time_resolution or max(segment.length, 2)
            for name, R in (("t", R_t), ("z", spatial_resolution),
                            ("y", spatial_resolution), ("x", spatial_resolution)):
                self.components.append((name, DenseGrid1D(R, m, dtype, rng)))
        elif backend == "hex4d":
            pc = plane_config or config
            if pc.output_dim != m:
                raise DomainError("plane config must keep the feature dimension")
            for name in ("xy", "zt", "yz", "xt", "xz", "yt"):
                self.components.append((name, MultiResGrid(2, pc, True, dtype, rng)))
        else:
            tc = tngp_config or config
            if tc.output_dim != m:
                raise DomainError("tngp config must keep the feature dimension")
            self.components.append(("xyzt", MultiResGrid(4, tc, False, dtype, rng)))

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def component(self, name: str):
        return dict(self.components)[name]

    def grids(self):
        return [g for _, g in self.components]

    def zero_grad(self) -> None:
        for g in self.grids():
            g.grad[:] = 0

    def local_time(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if np.any(frames < self.segment.start) or np.any(frames >= self.segment.stop):
            raise DomainError(f"frame outside segment [{self.segment.start}, {self.segment.stop})")
        return self.segment.local_time(frames)

    def _inputs(self, p, t_local):
        p = np.asarray(p).reshape(-1, 3)
        t = np.asarray(t_local).reshape(-1)
        q = np.empty((len(p), 4), dtype=self.dtype)
        q[:, :3] = p
        q[:, 3] = t
        return q

    def query(self, p, t_local, return_cache: bool = False):
        """Features at normalized points ``p`` (n, 3) and local times (n,)."""
        q = self._inputs(p, t_local)
        if self.backend == "humanrf":
            parts = []
            out = np.zeros((len(q), self.output_dim), dtype=self.dtype)
            for k, (axes3, axis1) in enumerate(_HUMANRF_TERMS):
                a = self.components[k][1].encode(q[:, axes3])
                b = self.components[4 + k][1].sample(q[:, axis1])
                out += a * b
                parts.append((a, b))
        elif self.backend == "hex4d":
            parts = []
            out = np.zeros((len(q), self.output_dim), dtype=self.dtype)
            for k, (ax_a, ax_b) in enumerate(_HEX4D_TERMS):
                a = self.components[2 * k][1].encode(q[:, ax_a])
                b = self.components[2 * k + 1][1].encode(q[:, ax_b])
                out += a * b
                parts.append((a, b))
        else:
            out = self.components[0][1].encode(q)
            parts = None
        if return_cache:
            return out, (q, parts)
        return out

    def query_frame(self, p, frame, return_cache: bool = False):
        return self.query(p, self.local_time(frame), return_cache)

    def backward(self, cache, grad_out) -> None:
        q, parts = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if self.backend == "humanrf":
            for k, (axes3, axis1) in enumerate(_HUMANRF_TERMS):
                a, b = parts[k]
                self.components[k][1].backward(q[:, axes3], g * b)
                self.components[4 + k][1].backward(q[:, axis1], g * a)
        elif self.backend == "hex4d":
            for k, (ax_a, ax_b) in enumerate(_HEX4D_TERMS):
                a, b = parts[k]
                self.components[2 * k][1].backward(q[:, ax_a], g * b)
                self.components[2 * k + 1][1].backward(q[:, ax_b], g * a)
        else:
            self.components[0][1].backward(q, g)


def count_parameters(obj) -> int:
    """Exact number of trainable scalars in a grid, field, or list of fields."""
    if isinstance(obj, (list, tuple)):
        return sum(count_parameters(o) for o in obj)
    if isinstance(obj, FeatureField4D):
        return sum(g.num_params for g in obj.grids())
    return int(obj.num_params)


def grid_parameter_count(dim: int, config: HashGridConfig, dense_only: bool = False) -> int:
    """Parameter count of a multi-resolution grid without allocating it."""
    total = 0
    for K in config.resolutions():
        n = (K + 1) ** dim
        if not dense_only and (config.hash_all_levels or n > 2 ** config.table_size_log2):
            n = 2 ** config.table_size_log2
        total += n * config.features_per_level
    return total


def field_parameter_count(backend: str, length: int, config: HashGridConfig,
                          plane_config=None, tngp_config=None,
                          spatial_resolution: int = SPATIAL_VECTOR_RESOLUTION) -> int:
    m = config.output_dim
    if backend == "humanrf":
        return 4 * grid_parameter_count(3, config) + (max(length, 2) + 3 * spatial_resolution) * m
    if backend == "hex4d":
        return 6 * grid_parameter_count(2, plane_config or config, dense_only=True)
    return grid_parameter_count(4, tngp_config or config)


def matched_configs(config: HashGridConfig, length: int) -> dict[str, HashGridConfig]:
    """Per-backend grid configs whose parameter counts approximate the humanrf budget.

    tngp varies its table size; hex4d varies the finest plane resolution.
    """
    target = field_parameter_count("humanrf", length, config)
    best_t = min(range(8, 25), key=lambda T: abs(
        grid_parameter_count(4, replace(config, table_size_log2=T)) - target))
    tngp = replace(config, table_size_log2=best_t)
    lo = config.min_resolution
    candidates = range(lo, 4 * config.max_resolution + 1)
    best_k = min(candidates, key=lambda K: abs(
        6 * grid_parameter_count(2, replace(config, max_resolution=K), True) - target))
    plane = replace(config, max_resolution=best_k)
    return {"humanrf": config, "hex4d": plane, "tngp": tngp}
