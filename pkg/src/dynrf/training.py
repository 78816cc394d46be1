"""Segment-aware ray batching and the optimisation loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DomainError
from .geometry import pixel_grid, rays_for_pixels
from ._memory import retain_freed_memory
from .losses import total_loss, total_loss_grads
from .model import RadianceModel
from .occupancy import SegmentPlan, carve_sequence, partition_sequence
from .optim import Adam, learning_rate
from .render import RayBatchRender

log = logging.getLogger(__name__)

REFERENCE_RAYS = 8192
REFERENCE_AREA = 1024 * 768
LOG_COLUMNS = ("iteration", "loss_total", "loss_pho", "loss_bce", "lr", "rays", "samples", "nonfinite_grads")


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:08}.trf4d"


def initial_ray_count(width: int, height: int) -> int:
    """The reference batch of 8192 rays scaled by image area."""
    return max(1, int(round(REFERENCE_RAYS * width * height / REFERENCE_AREA)))


class TrainingData:
    """Training-camera images held in memory with their per-pixel rays.

    ``rgb`` is (frames, cameras, pixels, 3) and ``mask`` (frames, cameras, pixels).
    """

    def __init__(self, dataset, cameras=None):
        self.cameras = list(dataset.split("train") if cameras is None else cameras)
        if not self.cameras:
            raise DomainError("dataset has no training cameras")
        cams = [dataset.cameras[c] for c in self.cameras]
        if len({(c.width, c.height) for c in cams}) != 1:
            raise DomainError("training cameras differ in image size")
        self.width, self.height = cams[0].width, cams[0].height
        self.num_frames = dataset.num_frames
        rgb, mask = dataset.stacked(self.cameras)
        P = self.width * self.height
        self.rgb = rgb.reshape(self.num_frames, len(cams), P, 3)
        self.mask = mask.reshape(self.num_frames, len(cams), P)
        rays = [rays_for_pixels(c, pixel_grid(self.width, self.height)) for c in cams]
        self.origins = np.stack([r[0] for r in rays])
        self.directions = np.stack([r[1] for r in rays])
        self.box = dataset.box
        self.camera_models = cams

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def frame_masks(self, frame: int):
        return [m.reshape(self.height, self.width) for m in self.mask[frame]]


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    frames: np.ndarray
    gt_color: np.ndarray
    gt_mask: np.ndarray
    frame_set: np.ndarray

    def __len__(self):
        return len(self.frames)


def choose_frames(num_frames: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct frames when the sequence allows, otherwise with replacement."""
    return rng.choice(num_frames, size=k, replace=num_frames < k)


def batch_ray_count(max_samples: int, samples_per_ray: float | None, initial: int) -> int:
    if samples_per_ray is None:
        return initial
    return max(1, min(max_samples, int(max_samples / max(samples_per_ray, 1.0))))


def sample_batch(data: TrainingData, rng: np.random.Generator, rays: int,
                 frames_per_batch: int = 8) -> RayBatch:
    """Rays drawn uniformly over (frame slot, camera, pixel) for a random frame set."""
    frame_set = choose_frames(data.num_frames, frames_per_batch, rng)
    slot = rng.integers(len(frame_set), size=rays)
    cam = rng.integers(len(data.cameras), size=rays)
    pix = rng.integers(data.pixels, size=rays)
    frames = frame_set[slot]
    return RayBatch(data.origins[cam, pix], data.directions[cam, pix], frames,
                    data.rgb[frames, cam, pix], data.mask[frames, cam, pix], frame_set)


@dataclass
class TrainState:
    model: RadianceModel
    optimizer: Adam
    config: RunConfig
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    samples_per_ray: float | None = None
    log: list = field(default_factory=list)

    @property
    def plan(self) -> SegmentPlan:
        return self.model.plan


def build_plan(data: TrainingData, config: RunConfig):
    """Per-frame occupancy from the training masks and the segment plan."""
    res = (config.occupancy_resolution,) * 3
    grids = carve_sequence([data.frame_masks(f) for f in range(data.num_frames)],
                           data.camera_models, data.box, res, config.dilation_px)
    if config.segment_size:
        plan = SegmentPlan.fixed(data.num_frames, config.segment_size, config.pool)
    else:
        plan = partition_sequence(grids, config.threshold, config.pool)
    return grids, plan


def init_state(data: TrainingData, config: RunConfig, plan: SegmentPlan | None = None,
               grids=None) -> TrainState:
    if plan is None or grids is None:
        carved, auto_plan = build_plan(data, config)
        grids = grids if grids is not None else carved
        plan = plan if plan is not None else auto_plan
    if plan.num_frames != data.num_frames:
        raise DomainError(f"plan covers {plan.num_frames} frames, dataset has {data.num_frames}")
    max_cap = max(c for _, c in config.pool)
    model = RadianceModel.create(data.box, plan, config.backend, config.grid, config.seed,
                                 np.dtype(config.dtype), grids if config.skip_empty else None,
                                 config.match_budget, max_cap)
    opt = Adam(model.parameter_arrays())
    return TrainState(model, opt, config.resolved(data.num_frames), 0, np.random.default_rng(config.seed))


def train_step(state: TrainState, data: TrainingData, total: int) -> dict:
    cfg = state.config
    rays = batch_ray_count(cfg.max_samples, state.samples_per_ray,
                           initial_ray_count(data.width, data.height))
    batch = sample_batch(data, state.rng, rays, cfg.frames_per_batch)
    r = RayBatchRender(state.model, batch.origins, batch.directions, batch.frames,
                       cfg.n_steps, state.rng, cfg.skip_empty)
    color = r.color.astype(np.float64)
    acc = r.acc.astype(np.float64)
    loss, pho, bce = total_loss(color, batch.gt_color, acc, batch.gt_mask)
    g_color, g_acc = total_loss_grads(color, batch.gt_color, acc, batch.gt_mask)
    state.model.zero_grad()
    r.backward(g_color, g_acc)
    lr = learning_rate(state.iteration, total, cfg.lr_start, cfg.lr_end)
    skipped = state.optimizer.step(lr)
    n_samples = len(r.samples)
    state.samples_per_ray = n_samples / len(batch)
    row = {"iteration": state.iteration, "loss_total": loss, "loss_pho": pho, "loss_bce": bce,
           "lr": lr, "rays": len(batch), "samples": n_samples, "nonfinite_grads": skipped}
    state.iteration += 1
    return row


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(dataset, config: RunConfig | None = None, out_dir=None, plan: SegmentPlan | None = None,
          state: TrainState | None = None, data: TrainingData | None = None,
          stop_at: int | None = None) -> TrainState:
    """Run (or resume) optimisation until the configured iteration count.

    With ``out_dir`` the loss log, the resolved config and periodic
    checkpoints are written there. ``stop_at`` ends the run early without
    changing the learning-rate schedule.
    """
    from .checkpoint import save_checkpoint

    retain_freed_memory()
    data = data or TrainingData(dataset)
    if state is None:
        config = (config or RunConfig()).resolved(data.num_frames)
        state = init_state(data, config, plan)
    elif state.plan.num_frames != data.num_frames:
        raise DomainError("checkpoint and dataset cover different frame counts")
    cfg = state.config
    total = cfg.total_iterations(data.num_frames)
    end = total if stop_at is None else min(stop_at, total)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.toml")
        (out / "plan.json").write_text(state.plan.to_json(), encoding="utf-8")
    while state.iteration < end:
        row = train_step(state, data, total)
        if row["iteration"] % cfg.log_every == 0 or state.iteration == total:
            state.log.append(row)
        if not math.isfinite(row["loss_total"]):
            log.warning("non-finite loss at iteration %d", row["iteration"])
        if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, out / checkpoint_name(state.iteration))
    if out is not None:
        write_log(state.log, out / "loss_log.csv")
        save_checkpoint(state, out / checkpoint_name(state.iteration))
    return state
