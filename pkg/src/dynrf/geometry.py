"""Cameras, rays, images and the scene bounding box."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise DomainError(f"degenerate box: min={lo}, max={hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def normalize(self, p):
        """Map world points into the unit cube (min -> 0, max -> 1)."""
        return (np.asarray(p) - self.min) / self.size

    def denormalize(self, u):
        return np.asarray(u) * self.size + self.min

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Aabb":
        return cls(np.array(d["min"], float), np.array(d["max"], float))

    def __eq__(self, other):
        return (
            isinstance(other, Aabb)
            and np.array_equal(self.min, other.min)
            and np.array_equal(self.max, other.max)
        )

    def __hash__(self):
        return hash((tuple(self.min), tuple(self.max)))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward).

    ``rotation`` and ``translation`` map camera coordinates to world
    coordinates, so the camera center is ``translation``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise DomainError("camera rotation is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, float)
        forward = np.asarray(target, float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, R, eye)

    def world_to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, float) - self.translation) @ self.rotation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to continuous image coordinates.

        Returns ``(uv, depth)``; pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``.
        """
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
            np.array(d["rotation"], float), np.array(d["translation"], float),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_frame: int = 0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise DomainError("ray direction is zero")
        if abs(n - 1.0) > 1e-6:
            d = d / n
        object.__setattr__(self, "origin", np.asarray(self.origin, np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def point_at(self, alpha):
        return self.origin + np.multiply.outer(alpha, self.direction)


@dataclass(frozen=True)
class Image:
    """Row-major image with values in [0, 1]; ``data`` has shape (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise DomainError(f"image must have 1 or 3 channels, got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() > 1):
            raise DomainError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All pixel indices of an image as an (H*W, 2) array of (i, j), row-major."""
    j, i = np.mgrid[0:height, 0:width]
    return np.stack([i.ravel(), j.ravel()], axis=1)


def rays_for_pixels(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ray generation; returns (origins, unit directions)."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(px < 0) or np.any(px[:, 0] >= camera.width) or np.any(px[:, 1] >= camera.height):
        raise DomainError("pixel outside the image")
    x = (px[:, 0] + 0.5 - camera.cx) / camera.fx
    y = (px[:, 1] + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.translation, d.shape).copy()
    return o, d


def ray_for_pixel(camera: Camera, px, frame: int = 0) -> Ray:
    o, d = rays_for_pixels(camera, np.asarray(px, float).reshape(1, 2))
    return Ray(o[0], d[0], int(frame))


def intersect_aabb_batch(origins, directions, box: Aabb):
    """Slab test for many rays.

    Returns ``(alpha_min, alpha_max, hit)``; entries are clipped to alpha >= 0
    and ``hit`` requires alpha_min < alpha_max.
    """
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    lo = np.full(len(o), 0.0)
    hi = np.full(len(o), np.inf)
    ok = np.ones(len(o), dtype=bool)
    for ax in range(3):
        da = d[:, ax]
        oa = o[:, ax]
        parallel = da == 0
        inside = (oa >= box.min[ax]) & (oa <= box.max[ax])
        ok &= ~parallel | inside
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (box.min[ax] - oa) / da
            t1 = (box.max[ax] - oa) / da
        tn = np.where(parallel, -np.inf, np.minimum(t0, t1))
        tf = np.where(parallel, np.inf, np.maximum(t0, t1))
        lo = np.maximum(lo, tn)
        hi = np.minimum(hi, tf)
    hit = ok & (lo < hi)
    return lo, hi, hit


def intersect_aabb(ray: Ray, box: Aabb):
    """Entry/exit distances of ``ray`` through ``box``, or None on a miss."""
    lo, hi, hit = intersect_aabb_batch(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        return None
    return float(lo[0]), float(hi[0])
