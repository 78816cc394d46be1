"""Space-carved occupancy grids and greedy adaptive temporal partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .geometry import Aabb, Camera

# (segment length, log2 hash capacity) pairs, ascending by length
PAPER_POOL: tuple[tuple[int, int], ...] = ((6, 15), (12, 16), (25, 17), (50, 18), (100, 19))
DEFAULT_THRESHOLD = 1.25
DEFAULT_RESOLUTION = (128, 128, 128)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    resolution: tuple[int, int, int]
    box: Aabb
    bits: np.ndarray  # bool, shape == resolution, indexed [ix, iy, iz]

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        bits = np.asarray(self.bits, dtype=bool)
        if bits.size != int(np.prod(res)):
            raise DomainError(f"bit count {bits.size} does not match resolution {res}")
        bits = bits.reshape(res)
        bits.flags.writeable = False
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def full(cls, resolution, box: Aabb, value: bool = True) -> "OccupancyGrid":
        return cls(resolution, box, np.full(resolution, value, dtype=bool))

    def voxel_centers(self) -> np.ndarray:
        axes = [(np.arange(n) + 0.5) / n for n in self.resolution]
        u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return self.box.denormalize(u)

    def voxel_index(self, points) -> np.ndarray:
        """Integer voxel coordinates of world points (clamped to the grid)."""
        u = self.box.normalize(points)
        res = np.array(self.resolution)
        return np.clip(np.floor(u * res).astype(np.int64), 0, res - 1)

    def lookup(self, points) -> np.ndarray:
        """Occupancy at world points; anything outside the box reads empty."""
        points = np.asarray(points, dtype=np.float64)
        idx = self.voxel_index(points)
        inside = self.box.contains(points)
        return self.bits[idx[..., 0], idx[..., 1], idx[..., 2]] & inside

    def __eq__(self, other):
        return (
            isinstance(other, OccupancyGrid)
            and self.resolution == other.resolution
            and self.box == other.box
            and np.array_equal(self.bits, other.bits)
        )

    def save(self, path) -> None:
        """Raw bitset: nx, ny, nz as little-endian u64, then C-order bits packed LSB-first."""
        header = struct.pack("<3Q", *self.resolution)
        payload = np.packbits(self.bits.ravel(), bitorder="little").tobytes()
        Path(path).write_bytes(header + payload)

    @classmethod
    def load(cls, path, box: Aabb) -> "OccupancyGrid":
        raw = Path(path).read_bytes()
        if len(raw) < 24:
            raise DomainError(f"{path}: truncated occupancy header")
        res = struct.unpack("<3Q", raw[:24])
        n = int(np.prod(res))
        bits = np.unpackbits(np.frombuffer(raw[24:], np.uint8), bitorder="little")
        if bits.size < n:
            raise DomainError(f"{path}: truncated occupancy payload")
        return cls(res, box, bits[:n].astype(bool))


def _project_voxels(centers, cam: Camera):
    """Flat pixel index of every voxel center, -1 where the camera does not see it."""
    uv, z = cam.project(centers)
    with np.errstate(invalid="ignore"):
        ui = np.floor(uv[:, 0])
        vi = np.floor(uv[:, 1])
        visible = (z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    flat = np.full(len(centers), -1, dtype=np.int64)
    flat[visible] = vi[visible].astype(np.int64) * cam.width + ui[visible].astype(np.int64)
    return flat


def _foreground(mask, cam: Camera, dilation_px: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != (cam.height, cam.width):
        raise DomainError(f"mask shape {m.shape} does not match camera {cam.width}x{cam.height}")
    fg = m > 0.5
    if dilation_px > 0:
        structure = np.ones((2 * dilation_px + 1,) * 2, dtype=bool)
        fg = ndimage.binary_dilation(fg, structure=structure)
    return fg.reshape(-1)


def carve_sequence(
    masks: Sequence[Sequence[np.ndarray]],
    cameras: Sequence[Camera],
    box: Aabb,
    resolution=DEFAULT_RESOLUTION,
    dilation_px: int = 1,
) -> list[OccupancyGrid]:
    """Visual-hull carving of every frame; ``masks[f][c]`` is camera c at frame f.

    A voxel stays occupied unless some camera that sees its center reports
    background there. Masks are (H, W) or (H, W, 1) arrays; values > 0.5
    count as foreground, after dilation by ``dilation_px`` pixels.
    """
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 1:
        raise DomainError("resolution components must be >= 1")
    for frame_masks in masks:
        if len(frame_masks) != len(cameras):
            raise DomainError(f"{len(frame_masks)} masks for {len(cameras)} cameras")
    centers = OccupancyGrid.full(resolution, box).voxel_centers().reshape(-1, 3)
    occupied = np.ones((len(masks), len(centers)), dtype=bool)
    for c, cam in enumerate(cameras):
        flat = _project_voxels(centers, cam)
        seen = flat >= 0
        idx = flat[seen]
        for f, frame_masks in enumerate(masks):
            fg = _foreground(frame_masks[c], cam, dilation_px)
            occupied[f, seen] &= fg[idx]
    return [OccupancyGrid(resolution, box, o.reshape(resolution)) for o in occupied]


def carve_occupancy(
    masks: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    box: Aabb,
    resolution=DEFAULT_RESOLUTION,
    dilation_px: int = 1,
) -> OccupancyGrid:
    """Carve a single frame; see :func:`carve_sequence`."""
    return carve_sequence([masks], cameras, box, resolution, dilation_px)[0]


def union_occupancy(grids: Sequence[OccupancyGrid]) -> OccupancyGrid:
    if not grids:
        raise DomainError("union of an empty grid list")
    first = grids[0]
    for g in grids[1:]:
        if g.resolution != first.resolution or g.box != first.box:
            raise DomainError("occupancy grids differ in resolution or box")
    bits = np.logical_or.reduce([g.bits for g in grids])
    return OccupancyGrid(first.resolution, first.box, bits)


def total_occupancy(grid: OccupancyGrid) -> int:
    return int(np.count_nonzero(grid.bits))


def expansion_factor(per_frame_grids: Sequence[OccupancyGrid]) -> float:
    base = total_occupancy(per_frame_grids[0])
    if base == 0:
        raise DomainError("first frame of the run has no occupied voxels")
    return total_occupancy(union_occupancy(per_frame_grids)) / base


@dataclass(frozen=True)
class Segment:
    start: int
    length: int
    capacity_log2: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def contains(self, frame: int) -> bool:
        return self.start <= frame < self.stop

    def local_time(self, frame):
        """Position of ``frame`` inside the segment, in [0, 1]."""
        return (np.asarray(frame, dtype=np.float64) - self.start) / max(self.length - 1, 1)


@dataclass(frozen=True)
class SegmentPlan:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        pos = 0
        for s in self.segments:
            if s.start != pos or s.length < 1:
                raise DomainError(f"segments do not tile the sequence at frame {pos}")
            pos = s.stop

    @property
    def num_frames(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def segment_index(self, frame: int) -> int:
        for k, s in enumerate(self.segments):
            if s.contains(frame):
                return k
        raise DomainError(f"frame {frame} is outside the plan [0, {self.num_frames})")

    def segment_indices(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.size and (frames.min() < 0 or frames.max() >= self.num_frames):
            raise DomainError("frame outside the plan")
        starts = np.array([s.start for s in self.segments])
        return np.searchsorted(starts, frames, side="right") - 1

    def mean_length(self) -> float:
        return float(np.mean([s.length for s in self.segments]))

    def to_json(self) -> str:
        doc = {"segments": [
            {"start": s.start, "length": s.length, "capacity_log2": s.capacity_log2}
            for s in self.segments
        ]}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SegmentPlan":
        doc = json.loads(text)
        return cls(tuple(
            Segment(int(s["start"]), int(s["length"]), int(s["capacity_log2"]))
            for s in doc["segments"]
        ))

    @classmethod
    def fixed(cls, num_frames: int, size: int, pool=PAPER_POOL) -> "SegmentPlan":
        """Fixed-length segments (the last one may be shorter)."""
        segs = []
        for start in range(0, num_frames, size):
            n = min(size, num_frames - start)
            segs.append(Segment(start, n, capacity_for_length(n, pool)))
        return cls(tuple(segs))


def capacity_for_length(length: int, pool=PAPER_POOL) -> int:
    """Capacity of the smallest pool entry that can hold ``length`` frames."""
    for size, cap in pool:
        if size >= length:
            return cap
    raise DomainError(f"run length {length} exceeds the largest pool size {pool[-1][0]}")


def partition_sequence(
    per_frame_grids: Sequence[OccupancyGrid],
    threshold: float = DEFAULT_THRESHOLD,
    pool=PAPER_POOL,
) -> SegmentPlan:
    """Greedy left-to-right partition keeping each segment's expansion factor bounded.

    A segment grows frame by frame while the union occupancy stays within
    ``threshold`` times that of its first frame and the largest pool size
    is not exceeded.
    """
    if threshold <= 1:
        raise DomainError("threshold must exceed 1")
    if not per_frame_grids:
        raise DomainError("no frames to partition")
    pool = tuple((int(s), int(c)) for s, c in pool)
    if list(pool) != sorted(pool):
        raise DomainError("pool must be sorted by segment size")
    max_len = pool[-1][0]
    n = len(per_frame_grids)
    segments = []
    s = 0
    while s < n:
        base = total_occupancy(per_frame_grids[s])
        if base == 0:
            raise DomainError(f"frame {s} has no occupied voxels")
        acc = per_frame_grids[s].bits.copy()
        j = s + 1
        while j < n and j - s < max_len:
            grown = acc | per_frame_grids[j].bits
            if np.count_nonzero(grown) / base > threshold:
                break
            acc = grown
            j += 1
        length = j - s
        segments.append(Segment(s, length, capacity_for_length(length, pool)))
        s = j
    return SegmentPlan(tuple(segments))
