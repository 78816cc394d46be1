"""Foreground PSNR, cropped SSIM and the held-out evaluation protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DomainError
from .geometry import pixel_grid, rays_for_pixels
from .render import DEFAULT_STEPS, render_rays

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PROTOCOLS = ("all", "rotation")


def psnr_foreground(pred, gt, mask) -> float:
    """PSNR over pixels where ``mask`` > 0.5, all channels, data range 1."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    fg = np.asarray(mask).reshape(gt.shape[:2]) > 0.5
    if not fg.any():
        raise DomainError("no foreground pixels")
    mse = float(np.mean((pred[fg] - gt[fg]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 windows, averaged over channels."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DomainError("ssim inputs differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DomainError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        blur = lambda z: convolve2d(z, w, mode="valid")  # noqa: E731
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def foreground_crop(mask, min_size: int = SSIM_WINDOW):
    """Tight (row0, row1, col0, col1) box around the mask, grown to ``min_size``
    per side where the image allows."""
    m = np.asarray(mask).reshape(np.asarray(mask).shape[:2]) > 0.5
    rows = np.nonzero(m.any(axis=1))[0]
    cols = np.nonzero(m.any(axis=0))[0]
    if not len(rows):
        raise DomainError("no foreground pixels")
    box = []
    for idx, extent in ((rows, m.shape[0]), (cols, m.shape[1])):
        lo, hi = int(idx[0]), int(idx[-1]) + 1
        need = min(min_size, extent) - (hi - lo)
        if need > 0:
            lo -= need // 2
            hi += need - need // 2
            shift = max(0, -lo) - max(0, hi - extent)
            lo, hi = lo + shift, hi + shift
        box += [lo, hi]
    return tuple(box)


def ssim_crop(pred, gt, mask) -> float:
    r0, r1, c0, c1 = foreground_crop(mask)
    return ssim(np.asarray(pred)[r0:r1, c0:c1], np.asarray(gt)[r0:r1, c0:c1])


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (camera, frame, psnr_fg, ssim_crop)
    skipped: int = 0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[3] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["camera", "frame", "psnr_fg", "ssim_crop"])
            for cam, frame, p, s in self.rows:
                w.writerow([cam, frame, f"{p:.6f}", f"{s:.6f}"])


def evaluation_pairs(cameras, num_frames: int, protocol: str = "all"):
    """(camera, frame) pairs to score. ``rotation`` cycles one camera per frame."""
    if protocol not in PROTOCOLS:
        raise DomainError(f"unknown protocol {protocol!r}")
    cameras = list(cameras)
    if not cameras:
        raise DomainError("no evaluation cameras")
    if protocol == "rotation":
        return [(cameras[f % len(cameras)], f) for f in range(num_frames)]
    return [(c, f) for f in range(num_frames) for c in cameras]


def evaluate(model, dataset, protocol: str = "all", split: str = "test",
             n_steps: int = DEFAULT_STEPS) -> EvalReport:
    """Render held-out views and score them against the dataset images."""
    if model.plan.num_frames != dataset.num_frames:
        raise DomainError("model and dataset cover different frame counts")
    report = EvalReport()
    for cam, frame in evaluation_pairs(dataset.split(split), dataset.num_frames, protocol):
        rgb, mask = dataset.get(cam, frame)
        if not (mask > 0.5).any():
            report.skipped += 1
            continue
        camera = dataset.cameras[cam]
        o, d = rays_for_pixels(camera, pixel_grid(camera.width, camera.height))
        color, _ = render_rays(model, o, d, frame, n_steps)
        pred = np.clip(color, 0, 1).reshape(rgb.shape)
        report.rows.append((cam, frame, psnr_foreground(pred, rgb, mask), ssim_crop(pred, rgb, mask)))
    return report


def read_report(path) -> list[tuple]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [(int(r["camera"]), int(r["frame"]), float(r["psnr_fg"]), float(r["ssim_crop"]))
                for r in csv.DictReader(fh)]
