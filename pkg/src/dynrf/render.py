"""Quadrature volume rendering with occupancy-based empty-space skipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DomainError
from .geometry import Aabb, Camera, Image, Ray, intersect_aabb_batch, pixel_grid, rays_for_pixels
from .occupancy import OccupancyGrid

TRANSMITTANCE_EPS = 1e-4
DEFAULT_STEPS = 256


@dataclass(frozen=True)
class RaySampleSet:
    """Retained samples of one ray. ``skip_mask`` covers all candidates."""

    distances: np.ndarray
    deltas: np.ndarray
    positions: np.ndarray
    skip_mask: np.ndarray

    def __len__(self):
        return len(self.distances)


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray
    acc_weight: float
    weights: np.ndarray


@dataclass
class PackedSamples:
    """Retained samples of many rays, stored contiguously per ray."""

    offsets: np.ndarray  # (rays + 1,) int64
    distances: np.ndarray
    deltas: np.ndarray
    positions: np.ndarray
    ray_index: np.ndarray

    @property
    def num_rays(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return len(self.distances)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def _stratify(lo, hi, n_steps, jitter):
    """Sample distances and step sizes for rays spanning [lo, hi]."""
    h = (hi - lo) / n_steps
    alpha = lo[:, None] + (np.arange(n_steps)[None, :] + jitter[:, None]) * h[:, None]
    delta = np.empty_like(alpha)
    delta[:, :-1] = np.diff(alpha, axis=1)
    delta[:, -1] = hi - alpha[:, -1]
    return alpha, delta


def sample_rays(origins, directions, box: Aabb, n_steps: int = DEFAULT_STEPS,
                occupied=None, rng: np.random.Generator | None = None) -> PackedSamples:
    """Stratified samples along every ray inside the box.

    ``occupied(points, ray_ids) -> bool mask`` filters candidates; rejected
    samples are dropped. Without ``rng`` samples sit at bin midpoints,
    otherwise each ray gets one uniform offset shared by all its bins.
    """
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    R = len(o)
    lo, hi, hit = intersect_aabb_batch(o, d, box)
    rays = np.nonzero(hit)[0]
    if rng is None:
        jitter = np.full(len(rays), 0.5)
    else:
        jitter = rng.random(len(rays))
    alpha, delta = _stratify(lo[rays], hi[rays], n_steps, jitter)
    pos = o[rays, None, :] + alpha[..., None] * d[rays, None, :]
    ray_ids = np.broadcast_to(rays[:, None], alpha.shape)
    keep = np.ones(alpha.shape, dtype=bool)
    if occupied is not None and len(rays):
        keep = occupied(pos.reshape(-1, 3), ray_ids.reshape(-1)).reshape(alpha.shape)
    counts = np.zeros(R, dtype=np.int64)
    counts[rays] = keep.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return PackedSamples(offsets, alpha[keep], delta[keep], pos[keep], ray_ids[keep].astype(np.int64))


BRICK = 8


def pack_occupancy(occupancy):
    """Repack (frames, nx, ny, nz) bits into 8x8x8 bricks of eight uint64 words.

    Returns ``(bricks, coarse)`` where ``coarse`` marks bricks with any bit set.
    A brick is one cache line, so marching a ray touches one line per brick.
    """
    occ = np.asarray(occupancy, dtype=bool)
    F, *dims = occ.shape
    padded = [-(-n // BRICK) * BRICK for n in dims]
    if padded != dims:
        occ = np.pad(occ, [(0, 0)] + [(0, p - n) for p, n in zip(padded, dims)])
    cx, cy, cz = (p // BRICK for p in padded)
    blocks = occ.reshape(F, cx, BRICK, cy, BRICK, cz, BRICK).transpose(0, 1, 3, 5, 2, 4, 6)
    coarse = blocks.any(axis=(4, 5, 6))
    bits = np.packbits(blocks.reshape(F, cx, cy, cz, BRICK, BRICK * BRICK), axis=-1, bitorder="little")
    bricks = np.ascontiguousarray(bits).view("<u8").astype(np.uint64).reshape(F, cx, cy, cz, BRICK)
    return bricks, np.ascontiguousarray(coarse)


def sample_rays_occupancy(origins, directions, box: Aabb, occupancy, frames,
                          n_steps: int = DEFAULT_STEPS,
                          rng: np.random.Generator | None = None, packed=None) -> PackedSamples:
    """Compiled equivalent of :func:`sample_rays` filtering by per-frame
    occupancy bits ``occupancy[frame, i, j, k]`` with clamped voxel indices.

    ``packed`` is ``pack_occupancy(occupancy)``, passed in when cached.
    """
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    o = np.ascontiguousarray(np.asarray(origins, np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, np.float64).reshape(-1, 3))
    frames = np.ascontiguousarray(np.broadcast_to(np.asarray(frames, np.int64), (len(o),)))
    R = len(o)
    lo, hi, hit = intersect_aabb_batch(o, d, box)
    rays = np.nonzero(hit)[0]
    jitter = np.full(len(rays), 0.5) if rng is None else rng.random(len(rays))
    bricks, coarse = pack_occupancy(occupancy) if packed is None else packed
    dims = np.asarray(np.shape(occupancy)[1:], np.int64)
    bmin = np.asarray(box.min, np.float64)
    bsize = np.asarray(box.size, np.float64)
    counts = np.zeros(R, dtype=np.int64)
    _kernels.count_occupied(o, d, lo, hi, rays, jitter, n_steps, bricks, coarse, dims, frames,
                            bmin, bsize, counts)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    n = int(offsets[-1])
    alpha, delta = np.empty(n), np.empty(n)
    pos, ray_ids = np.empty((n, 3)), np.empty(n, np.int64)
    _kernels.fill_occupied(o, d, lo, hi, rays, jitter, n_steps, bricks, coarse, dims, frames,
                           bmin, bsize, offsets, alpha, delta, pos, ray_ids)
    return PackedSamples(offsets, alpha, delta, pos, ray_ids)


def sample_ray(ray: Ray, box: Aabb, occ: OccupancyGrid | None, n_steps: int = DEFAULT_STEPS,
               rng: np.random.Generator | None = None) -> RaySampleSet:
    """Single-ray version of :func:`sample_rays`; a miss yields no samples."""
    lo, hi, hit = intersect_aabb_batch(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        empty = np.zeros(0)
        return RaySampleSet(empty, empty, np.zeros((0, 3)), np.zeros(0, bool))
    jitter = np.array([0.5 if rng is None else rng.random()])
    alpha, delta = _stratify(lo[:1], hi[:1], n_steps, jitter)
    alpha, delta = alpha[0], delta[0]
    pos = ray.origin + alpha[:, None] * ray.direction
    keep = np.ones(n_steps, bool) if occ is None else occ.lookup(pos)
    return RaySampleSet(alpha[keep], delta[keep], pos[keep], keep)


def composite_packed(sigma, rgb, deltas, offsets, t_min: float = TRANSMITTANCE_EPS):
    """Batched quadrature; returns (color, acc, weights, stop)."""
    sigma = np.ascontiguousarray(sigma)
    rgb = np.ascontiguousarray(rgb).reshape(-1, 3)
    deltas = np.ascontiguousarray(deltas, dtype=sigma.dtype)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    R = len(offsets) - 1
    weights = np.empty(len(sigma), dtype=sigma.dtype)
    color = np.empty((R, 3), dtype=sigma.dtype)
    acc = np.empty(R, dtype=sigma.dtype)
    stop = np.empty(R, dtype=np.int64)
    _kernels.composite_forward(sigma, rgb, deltas, offsets, t_min, weights, color, acc, stop)
    return color, acc, weights, stop


def composite_packed_backward(sigma, rgb, deltas, offsets, weights, stop, g_color, g_acc):
    sigma = np.ascontiguousarray(sigma)
    rgb = np.ascontiguousarray(rgb).reshape(-1, 3)
    deltas = np.ascontiguousarray(deltas, dtype=sigma.dtype)
    g_color = np.ascontiguousarray(g_color, dtype=sigma.dtype).reshape(-1, 3)
    g_acc = np.ascontiguousarray(g_acc, dtype=sigma.dtype).reshape(-1)
    g_sigma = np.empty_like(sigma)
    g_rgb = np.empty_like(rgb)
    _kernels.composite_backward(sigma, rgb, deltas, np.asarray(offsets, np.int64), weights,
                                stop, g_color, g_acc, g_sigma, g_rgb)
    return g_sigma, g_rgb


def composite(samples, sigma, rgb) -> RenderResult:
    """Composite one ray. ``samples`` is a RaySampleSet or an array of step sizes."""
    deltas = samples.deltas if isinstance(samples, RaySampleSet) else np.asarray(samples)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if np.any(sigma < 0):
        raise DomainError("negative density")
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    if not (len(sigma) == len(rgb) == len(deltas)):
        raise DomainError("sample arrays are not aligned")
    color, acc, weights, _ = composite_packed(sigma, rgb, deltas, np.array([0, len(sigma)]))
    return RenderResult(color[0], float(acc[0]), weights)


def composite_backward(samples, sigma, rgb, g_color, g_acc=0.0):
    """Gradients of (color, acc) w.r.t. per-sample densities and colors."""
    deltas = samples.deltas if isinstance(samples, RaySampleSet) else np.asarray(samples)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    offsets = np.array([0, len(sigma)])
    _, _, weights, stop = composite_packed(sigma, rgb, deltas, offsets)
    return composite_packed_backward(sigma, rgb, deltas, offsets, weights, stop,
                                     np.asarray(g_color, float)[None], np.array([g_acc], float))


class RayBatchRender:
    """Forward render of many rays with everything kept for the reverse pass."""

    def __init__(self, model, origins, directions, frames, n_steps=DEFAULT_STEPS,
                 rng=None, skip: bool = True):
        self.model = model
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        if frames.size and (frames.min() < 0 or frames.max() >= model.plan.num_frames):
            raise DomainError("frame outside the segment plan")
        if skip and model.occupancy is not None:
            s = sample_rays_occupancy(origins, directions, model.box, model.occupancy, frames,
                                      n_steps, rng, model.packed_occupancy())
        else:
            s = sample_rays(origins, directions, model.box, n_steps, None, rng)
        self.samples = s
        dirs = np.asarray(directions, np.float64).reshape(-1, 3)
        self.sigma, self.rgb, self.cache = model.forward_points(
            s.positions, dirs, frames[s.ray_index], return_cache=True, ray_index=s.ray_index)
        self.color, self.acc, self.weights, self.stop = composite_packed(
            self.sigma, self.rgb, s.deltas, s.offsets)

    def backward(self, g_color, g_acc) -> None:
        """Accumulate parameter gradients for upstream d/d color and d/d acc."""
        g_sigma, g_rgb = composite_packed_backward(
            self.sigma, self.rgb, self.samples.deltas, self.samples.offsets,
            self.weights, self.stop, g_color, g_acc)
        self.model.backward_points(self.cache, g_sigma, g_rgb)


def render_rays(model, origins, directions, frames, n_steps=DEFAULT_STEPS,
                chunk: int = 4096, skip: bool = True):
    """Deterministic (midpoint) render; returns (color (R, 3), acc (R,))."""
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    frames = np.broadcast_to(np.asarray(frames, np.int64), (len(o),))
    color = np.zeros((len(o), 3))
    acc = np.zeros(len(o))
    for a in range(0, len(o), chunk):
        b = min(a + chunk, len(o))
        r = RayBatchRender(model, o[a:b], d[a:b], frames[a:b], n_steps, None, skip)
        color[a:b] = r.color
        acc[a:b] = r.acc
    return color, acc


def render_pixel(ray: Ray, t_frame: int, model, n_steps=DEFAULT_STEPS) -> RenderResult:
    r = RayBatchRender(model, ray.origin[None], ray.direction[None], [t_frame], n_steps)
    return RenderResult(r.color[0].astype(np.float64), float(r.acc[0]), r.weights.astype(np.float64))


def render_image(camera: Camera, t_frame: int, model, n_steps=DEFAULT_STEPS,
                 skip: bool = True) -> tuple[Image, Image]:
    """Render RGB (composited over black) and the accumulated-weight mask."""
    if not 0 <= t_frame < model.plan.num_frames:
        raise DomainError(f"frame {t_frame} outside the plan")
    o, d = rays_for_pixels(camera, pixel_grid(camera.width, camera.height))
    color, acc = render_rays(model, o, d, t_frame, n_steps, skip=skip)
    H, W = camera.height, camera.width
    rgb = np.clip(color, 0, 1).reshape(H, W, 3)
    mask = np.clip(acc, 0, 1).reshape(H, W, 1)
    return Image(rgb), Image(mask)
