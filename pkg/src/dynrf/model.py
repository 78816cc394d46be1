"""The full radiance model: per-segment feature fields plus the two shared heads."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .fields import FeatureField4D, HashGridConfig, matched_configs
from .geometry import Aabb
from .heads import (
    density_head, density_head_backward, density_mlp, radiance_head,
    radiance_head_backward, radiance_mlp, sh_encode,
)
from .occupancy import OccupancyGrid, SegmentPlan

PAPER_MAX_CAPACITY = 19


def segment_config(config: HashGridConfig, capacity_log2: int,
                   max_capacity: int = PAPER_MAX_CAPACITY) -> HashGridConfig:
    """Table size for one segment: the plan's capacity shifted so the largest
    pool entry maps onto ``config.table_size_log2``."""
    T = config.table_size_log2 - (max_capacity - capacity_log2)
    return replace(config, table_size_log2=max(T, 1))


@dataclass
class RadianceModel:
    box: Aabb
    plan: SegmentPlan
    fields: list
    density: object
    radiance: object
    occupancy: np.ndarray | None = None  # (frames, nx, ny, nz) bool, or None for no skipping
    dtype: np.dtype = field(default=np.dtype(np.float32))
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, box: Aabb, plan: SegmentPlan, backend: str = "humanrf",
               grid: HashGridConfig | None = None, seed: int = 0, dtype=np.float32,
               occupancy=None, match_budget: bool = False,
               max_capacity: int = PAPER_MAX_CAPACITY) -> "RadianceModel":
        """Initialise every segment field and both heads from one seed.

        With ``match_budget`` the hex4d / tngp grids are resized to roughly the
        humanrf parameter count of the same segment.
        """
        grid = grid or HashGridConfig()
        rng = np.random.default_rng(seed)
        fields = []
        for seg in plan.segments:
            cfg = segment_config(grid, seg.capacity_log2, max_capacity)
            kwargs = {}
            if match_budget and backend != "humanrf":
                matched = matched_configs(cfg, seg.length)[backend]
                kwargs = {"plane_config": matched} if backend == "hex4d" else {"tngp_config": matched}
            fields.append(FeatureField4D(backend, seg, cfg, dtype, rng, **kwargs))
        dens = density_mlp(grid.output_dim, dtype, rng)
        rad = radiance_mlp(dtype, rng)
        model = cls(box, plan, fields, dens, rad, None, np.dtype(dtype))
        if occupancy is not None:
            model.set_occupancy(occupancy)
        return model

    @property
    def backend(self) -> str:
        return self.fields[0].backend

    def set_occupancy(self, grids) -> None:
        if grids is None:
            self.occupancy = None
            return
        if isinstance(grids, np.ndarray):
            self.occupancy = grids.astype(bool)
            return
        if len(grids) != self.plan.num_frames:
            raise DomainError("need one occupancy grid per frame")
        for g in grids:
            if g.box != self.box:
                raise DomainError("occupancy box differs from the model box")
        self.occupancy = np.stack([g.bits for g in grids])

    def packed_occupancy(self):
        """Brick-packed occupancy for the sampler, rebuilt when the array is replaced."""
        if self.occupancy is None:
            return None
        if self._packed is None or self._packed[0] is not self.occupancy:
            from .render import pack_occupancy

            self._packed = (self.occupancy, pack_occupancy(self.occupancy))
        return self._packed[1]

    def occupancy_grid(self, frame: int) -> OccupancyGrid | None:
        if self.occupancy is None:
            return None
        return OccupancyGrid(self.occupancy.shape[1:], self.box, self.occupancy[frame])

    def heads(self):
        return [self.density, self.radiance]

    def parameter_arrays(self):
        """(param, grad) pairs in checkpoint declaration order."""
        pairs = []
        for f in self.fields:
            for g in f.grids():
                pairs.append((g.params, g.grad))
        for mlp in self.heads():
            pairs += list(zip(mlp.params, mlp.grads))
        return pairs

    def zero_grad(self) -> None:
        for f in self.fields:
            f.zero_grad()
        for mlp in self.heads():
            mlp.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p, _ in self.parameter_arrays())

    def occupied(self, points, frames) -> np.ndarray:
        """Occupancy of world points at their frames (True everywhere without grids).

        Points are assumed to come from box-clipped rays; indices are clamped.
        """
        points = np.asarray(points)
        if self.occupancy is None:
            return np.ones(points.shape[:-1], dtype=bool)
        res = np.array(self.occupancy.shape[1:])
        u = self.box.normalize(points)
        idx = np.clip(np.floor(u * res).astype(np.int64), 0, res - 1)
        hit = self.occupancy[np.asarray(frames), idx[..., 0], idx[..., 1], idx[..., 2]]
        return hit

    def forward_points(self, points, dirs, frames, return_cache: bool = False, ray_index=None):
        """Density and radiance at world points seen along unit ``dirs``.

        With ``ray_index``, ``dirs`` holds one direction per ray and sample
        ``i`` uses ``dirs[ray_index[i]]``.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        n = len(points)
        seg = self.plan.segment_indices(frames)
        u = self.box.normalize(points).astype(self.dtype)
        feat = np.empty((n, self.fields[0].output_dim), dtype=self.dtype)
        groups = []
        for k in np.unique(seg):
            sel = np.nonzero(seg == k)[0]
            f = self.fields[k]
            t_local = f.local_time(frames[sel])
            out, fcache = f.query(u[sel], t_local, return_cache=True)
            feat[sel] = out
            groups.append((k, sel, fcache))
        sigma, geo, dcache = density_head(self.density, feat, return_cache=True)
        if not n:
            sh = np.zeros((0, 16), self.dtype)
        elif ray_index is not None:
            sh = sh_encode(dirs).astype(self.dtype)[ray_index]
        else:
            sh = sh_encode(dirs).astype(self.dtype)
        rgb, rcache = radiance_head(self.radiance, sh, geo, return_cache=True)
        if return_cache:
            return sigma, rgb, (groups, dcache, rcache, feat.shape)
        return sigma, rgb

    def backward_points(self, cache, g_sigma, g_rgb) -> None:
        groups, dcache, rcache, shape = cache
        _, g_geo = radiance_head_backward(self.radiance, rcache, g_rgb, need_sh=False)
        g_feat = density_head_backward(self.density, dcache, g_sigma, g_geo)
        for k, sel, fcache in groups:
            self.fields[k].backward(fcache, g_feat[sel])
