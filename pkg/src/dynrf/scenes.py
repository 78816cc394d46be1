"""Analytic dynamic scenes used to synthesize multi-view training data.

Every scene is a union of soft spheres: density is a scaled logistic of the
signed distance to the nearest sphere surface, color is a smooth function of
the surface normal of the nearest sphere. All evaluation is float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .errors import DomainError

SCENE_KINDS = ("pulsing_sphere", "orbiting_blob", "two_blobs_strong_motion",
               "expanding_sphere", "static_sphere")

SIGMA_MAX = 60.0
FALLOFF = 0.012
BOUND_RADIUS = 0.92
PULSE_PERIOD = 8
REFERENCE_T_MIN = 1e-10


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "pulsing_sphere"
    frames: int = 16
    cameras: int = 16
    width: int = 64
    height: int = 64
    seed: int = 42
    ring_radius: float = 3.0
    ring_height: float = 0.6

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise DomainError(f"unknown scene kind {self.kind!r}")
        if self.frames < 1:
            raise DomainError("frames must be >= 1")
        if self.cameras < 2:
            raise DomainError("cameras must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


class AnalyticScene:
    """Spheres with per-frame centers and radii, plus per-sphere base colors."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.palette = 0.25 + 0.5 * rng.random((2, 3))
        self.pattern_phase = rng.uniform(0, 2 * np.pi, 3)

    def spheres(self, frame: int):
        """(centers (k, 3), radii (k,)) at an integer frame."""
        kind = self.spec.kind
        if kind == "pulsing_sphere":
            phase = (frame % PULSE_PERIOD) / PULSE_PERIOD
            r = 0.45 + 0.15 * math.sin(2 * math.pi * phase)
            return np.zeros((1, 3)), np.array([r])
        if kind == "expanding_sphere":
            grow = frame / max(self.spec.frames - 1, 1)
            return np.zeros((1, 3)), np.array([0.2 + 0.55 * grow])
        if kind == "static_sphere":
            return np.zeros((1, 3)), np.array([0.5])
        if kind == "orbiting_blob":
            a = 2 * math.pi * frame / 32
            c = np.array([[0.0, 0.0, 0.0], [0.5 * math.cos(a), 0.1 * math.sin(2 * a), 0.5 * math.sin(a)]])
            return c, np.array([0.3, 0.18])
        a = 2 * math.pi * frame / 6
        c = np.array([
            [0.45 * math.cos(a), 0.25 * math.sin(2 * a), 0.2 * math.sin(a)],
            [-0.45 * math.cos(a), -0.25 * math.sin(a), 0.3 * math.cos(2 * a)],
        ])
        return c, np.array([0.25, 0.22])

    def evaluate(self, points, frame: int):
        """Density (n,) and color (n, 3) at world points."""
        centers, radii = self.spheres(frame)
        p = np.asarray(points, np.float64).reshape(-1, 3)
        rel = p[:, None, :] - centers[None]
        dist = np.linalg.norm(rel, axis=-1)
        sd = dist - radii[None]
        nearest = np.argmin(sd, axis=1)
        idx = np.arange(len(p))
        d_min = sd[idx, nearest]
        with np.errstate(over="ignore"):
            sigma = SIGMA_MAX / (1.0 + np.exp(d_min / FALLOFF))
        n = rel[idx, nearest] / np.maximum(dist[idx, nearest], 1e-12)[:, None]
        base = self.palette[np.minimum(nearest, len(self.palette) - 1)]
        stripes = 0.15 * np.sin(3.0 * n + self.pattern_phase[None])
        color = np.clip(base + 0.25 * n + stripes, 0.0, 1.0)
        return sigma, color


def reference_render(scene: AnalyticScene, origins, directions, frame: int, n_steps: int = 1024):
    """Midpoint-quadrature render over each ray's chord through the scene's
    bounding sphere. Returns (color (R, 3), acc (R,)), float64.

    Marching stops once transmittance falls below ``REFERENCE_T_MIN``.
    """
    o = np.ascontiguousarray(np.asarray(origins, np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, np.float64).reshape(-1, 3))
    centers, radii = scene.spheres(frame)
    color = np.empty((len(o), 3))
    acc = np.empty(len(o))
    _kernels.analytic_render(o, d, np.ascontiguousarray(centers, np.float64), radii.astype(np.float64),
                             scene.palette, scene.pattern_phase, SIGMA_MAX, FALLOFF, BOUND_RADIUS,
                             n_steps, REFERENCE_T_MIN, color, acc)
    return color, acc
