"""Synthetic multi-view dataset generation, the on-disk format, and loading.

Layout under the dataset root::

    manifest.json
    {split}/cam{cam:03}/frame{frame:05}_rgb.png
    {split}/cam{cam:03}/frame{frame:05}_mask.png
"""

from __future__ import annotations

import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import (
    DomainError, ImageDecodeError, ManifestError, MissingFileError, ShapeMismatchError,
)
from .geometry import Aabb, Camera, pixel_grid, rays_for_pixels
from .scenes import AnalyticScene, SceneSpec, reference_render

MANIFEST_VERSION = 1
RGB_TEMPLATE = "{split}/cam{cam:03}/frame{frame:05}_rgb.png"
MASK_TEMPLATE = "{split}/cam{cam:03}/frame{frame:05}_mask.png"
SPLITS = ("train", "val", "test")
DEFAULT_BOX = Aabb(np.full(3, -1.0), np.full(3, 1.0))


def split_cameras(n: int, val_frac: float = 0.10, test_frac: float = 0.15) -> list[str]:
    """Deterministic train/val/test tags spread around the rig by index stride."""
    n_test = int(round(test_frac * n)) if n >= 3 else 0
    n_val = int(round(val_frac * n)) if n >= 3 else 0
    tags = ["train"] * n
    taken = set()

    def spread(count, phase):
        picks = []
        for k in range(count):
            i = int(math.floor((k + phase) * n / count)) % n
            while i in taken:
                i = (i + 1) % n
            taken.add(i)
            picks.append(i)
        return picks

    for i in spread(n_test, 0.25):
        tags[i] = "test"
    for i in spread(n_val, 0.75):
        tags[i] = "val"
    return tags


def camera_rig(spec: SceneSpec) -> list[Camera]:
    """Two interleaved rings around the origin, alternating above and below."""
    cams = []
    f = 1.6 * spec.width
    for i in range(spec.cameras):
        a = 2 * math.pi * i / spec.cameras
        h = spec.ring_height if i % 2 == 0 else -spec.ring_height
        eye = (spec.ring_radius * math.sin(a), h, spec.ring_radius * math.cos(a))
        cams.append(Camera.look_at(eye, (0, 0, 0), (0, 1, 0), f, f, spec.width, spec.height))
    return cams


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, np.float64), 0, 1) * 255).astype(np.uint8)


def write_png(path, data) -> None:
    """Write float [0, 1] data of shape (H, W), (H, W, 1) or (H, W, 3) as 8-bit PNG."""
    a = to_uint8(data)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(a).save(path, format="PNG", optimize=False)


def read_png(path, channels: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing image {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            im = im.convert("RGB" if channels == 3 else "L")
            a = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    return a


@dataclass
class Manifest:
    box: Aabb
    cameras: list[Camera]
    splits: list[str]
    frames: int
    scene: dict | None = None
    rgb_template: str = RGB_TEMPLATE
    mask_template: str = MASK_TEMPLATE
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "box": self.box.to_dict(),
            "frames": self.frames,
            "rgb_template": self.rgb_template,
            "mask_template": self.mask_template,
            "cameras": [dict(c.to_dict(), split=s, index=i)
                        for i, (c, s) in enumerate(zip(self.cameras, self.splits))],
        }
        if self.scene is not None:
            doc["scene"] = self.scene
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
            if doc.get("version") != MANIFEST_VERSION:
                raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
            cams = [Camera.from_dict(c) for c in doc["cameras"]]
            splits = [c["split"] for c in doc["cameras"]]
            m = cls(Aabb.from_dict(doc["box"]), cams, splits, int(doc["frames"]),
                    doc.get("scene"), doc.get("rgb_template", RGB_TEMPLATE),
                    doc.get("mask_template", MASK_TEMPLATE))
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc
        bad = [s for s in splits if s not in SPLITS]
        if bad:
            raise ManifestError(f"unknown split tags {bad}")
        return m

    def rgb_path(self, cam: int, frame: int) -> str:
        return self.rgb_template.format(split=self.splits[cam], cam=cam, frame=frame)

    def mask_path(self, cam: int, frame: int) -> str:
        return self.mask_template.format(split=self.splits[cam], cam=cam, frame=frame)

    def cameras_in(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def render_view(scene: AnalyticScene, camera: Camera, frame: int, n_steps: int = 1024):
    """Ground-truth (rgb (H, W, 3), acc (H, W)) from the reference integrator."""
    o, d = rays_for_pixels(camera, pixel_grid(camera.width, camera.height))
    color, acc = reference_render(scene, o, d, frame, n_steps)
    return color.reshape(camera.height, camera.width, 3), acc.reshape(camera.height, camera.width)


def generate_dataset(spec: SceneSpec, out_dir, box: Aabb = DEFAULT_BOX, n_steps: int = 1024) -> Manifest:
    """Render every (camera, frame) of ``spec`` and write images plus manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DomainError(f"cannot create dataset directory {out}: {exc}") from exc
    scene = AnalyticScene(spec)
    cams = camera_rig(spec)
    manifest = Manifest(box, cams, split_cameras(len(cams)), spec.frames, spec.to_dict())
    for frame in range(spec.frames):
        for i, cam in enumerate(cams):
            rgb, acc = render_view(scene, cam, frame, n_steps)
            write_png(out / manifest.rgb_path(i, frame), rgb)
            write_png(out / manifest.mask_path(i, frame), (acc > 0.5).astype(np.float64))
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


class Dataset:
    """Random access to (rgb, mask) pairs; images are decoded lazily and cached."""

    def __init__(self, root, manifest: Manifest, cache_size: int | None = None):
        self.root = Path(root)
        self.manifest = manifest
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    @property
    def box(self) -> Aabb:
        return self.manifest.box

    @property
    def cameras(self) -> list[Camera]:
        return self.manifest.cameras

    @property
    def num_frames(self) -> int:
        return self.manifest.frames

    def split(self, name: str) -> list[int]:
        return self.manifest.cameras_in(name)

    def keys(self):
        return [(c, f) for f in range(self.num_frames) for c in range(len(self.cameras))]

    def load_pair(self, cam: int, frame: int):
        """Decode from disk, bypassing the cache."""
        if not (0 <= cam < len(self.cameras) and 0 <= frame < self.num_frames):
            raise DomainError(f"no image for camera {cam}, frame {frame}")
        c = self.cameras[cam]
        rgb_path = self.root / self.manifest.rgb_path(cam, frame)
        mask_path = self.root / self.manifest.mask_path(cam, frame)
        rgb = read_png(rgb_path, 3)
        mask = read_png(mask_path, 1)
        for path, a in ((rgb_path, rgb), (mask_path, mask)):
            if a.shape[:2] != (c.height, c.width):
                raise ShapeMismatchError(
                    f"{path}: image is {a.shape[1]}x{a.shape[0]}, manifest says {c.width}x{c.height}")
        return rgb, mask

    def get(self, cam: int, frame: int):
        key = (cam, frame)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        pair = self.load_pair(cam, frame)
        with self._lock:
            self._cache[key] = pair
            if self._cache_size is not None:
                while len(self._cache) > self._cache_size:
                    self._cache.popitem(last=False)
        return pair

    def masks(self, frame: int, cams) -> list[np.ndarray]:
        return [self.get(c, frame)[1] for c in cams]

    def stacked(self, cams):
        """All frames of the given cameras as arrays (F, C, H, W, 3) and (F, C, H, W)."""
        rgb = np.stack([np.stack([self.get(c, f)[0] for c in cams]) for f in range(self.num_frames)])
        mask = np.stack([np.stack([self.get(c, f)[1] for c in cams]) for f in range(self.num_frames)])
        return rgb, mask

    def save(self, out_dir) -> Manifest:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for cam, frame in self.keys():
            rgb, mask = self.get(cam, frame)
            write_png(out / self.manifest.rgb_path(cam, frame), rgb)
            write_png(out / self.manifest.mask_path(cam, frame), mask)
        (out / "manifest.json").write_text(self.manifest.to_json(), encoding="utf-8")
        return self.manifest


def load_dataset(path, cache_size: int | None = None) -> Dataset:
    """Open a dataset from its root directory or manifest path."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ManifestError(f"no manifest at {manifest_path}")
    manifest = Manifest.from_json(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    for cam in range(len(manifest.cameras)):
        for frame in range(manifest.frames):
            for rel in (manifest.rgb_path(cam, frame), manifest.mask_path(cam, frame)):
                if not (root / rel).exists():
                    raise MissingFileError(f"manifest references missing file {root / rel}")
    return Dataset(root, manifest, cache_size)


class ImagePool:
    """Bounded pool of decoded images refilled by a background thread.

    Readers draw random entries from the pool while the worker keeps
    replacing the oldest slot with a not-yet-resident image. Every draw
    returns a complete (key, rgb, mask) tuple taken under the pool lock.
    """

    def __init__(self, dataset: Dataset, size: int, keys=None, seed: int = 0):
        self.dataset = dataset
        self.keys = list(keys if keys is not None else dataset.keys())
        if size < 1 or not self.keys:
            raise DomainError("pool needs a positive size and at least one image")
        self.size = min(size, len(self.keys))
        self._rng = np.random.default_rng(seed)
        self._worker_rng = np.random.default_rng(seed + 1)
        order = self._worker_rng.permutation(len(self.keys))
        self._queue = [self.keys[i] for i in order]
        self._slots = [self._load(self._queue.pop()) for _ in range(self.size)]
        self._next_slot = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.served: set = set()
        self.replacements = 0

    def _load(self, key):
        rgb, mask = self.dataset.load_pair(*key)
        return key, rgb, mask

    def _refill_once(self) -> None:
        if not self._queue:
            order = self._worker_rng.permutation(len(self.keys))
            self._queue = [self.keys[i] for i in order]
        with self._lock:
            resident = {s[0] for s in self._slots}
        key = self._queue.pop()
        if key in resident:
            return
        entry = self._load(key)
        with self._lock:
            self._slots[self._next_slot] = entry
            self._next_slot = (self._next_slot + 1) % self.size
            self.replacements += 1

    def _run(self) -> None:
        while not self._stop.is_set():
            self._refill_once()
            self._stop.wait(0.0005)

    def start(self) -> "ImagePool":
        if self._thread is None and self.size < len(self.keys):
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def draw(self):
        with self._lock:
            entry = self._slots[int(self._rng.integers(self.size))]
            self.served.add(entry[0])
        return entry
