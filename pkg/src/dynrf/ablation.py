"""Backend and segmentation sweeps with parameter accounting."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .fields import HashGrid3D, HashGridConfig, count_parameters
from .heads import density_mlp, radiance_mlp
from .metrics import evaluate
from .model import RadianceModel
from .occupancy import SegmentPlan
from .training import TrainingData, build_plan, init_state, train

BACKEND_COLUMNS = ("backend", "params", "compression", "psnr_fg", "ssim_crop")
SEGMENT_COLUMNS = ("mode", "setting", "segments", "mean_length", "params", "compression",
                   "psnr_fg", "ssim_crop")


def per_frame_baseline(config: HashGridConfig, num_frames: int) -> int:
    """Parameters of one independent static model per frame: a 3D hash grid
    with the full table plus its own pair of heads."""
    grid = HashGrid3D(config)
    heads = density_mlp(config.output_dim).num_params + radiance_mlp().num_params
    return num_frames * (count_parameters(grid) + heads)


def compression_ratio(model_params: int, baseline_params: int) -> float:
    return 1.0 - model_params / baseline_params


def model_compression(model: RadianceModel, config: RunConfig) -> float:
    return compression_ratio(model.num_params(), per_frame_baseline(config.grid, model.plan.num_frames))


def _write(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _run(dataset, data, config, plan, grids, do_eval, protocol):
    state = init_state(data, config, plan, grids)
    if do_eval:
        train(dataset, state=state, data=data)
    row = {"params": state.model.num_params(), "compression": model_compression(state.model, config),
           "psnr_fg": "", "ssim_crop": ""}
    if do_eval:
        report = evaluate(state.model, dataset, protocol)
        row["psnr_fg"], row["ssim_crop"] = report.mean_psnr, report.mean_ssim
    return state, row


def ablate(dataset, config: RunConfig, out_dir, backends=("humanrf", "hex4d", "tngp"),
           segment_sizes=(), thresholds=(), do_eval: bool = True, protocol: str = "all"):
    """Write ``backends.csv`` and, if sweeps are requested, ``segments.csv``.

    Backends are compared with budgets matched to the humanrf decomposition
    on one segment spanning the sequence (split into pool-maximum pieces when
    longer), or on fixed segments of ``config.segment_size`` when set, so
    only the feature grid differs between rows. Without ``do_eval`` only parameters are counted.
    Returns (backend rows, segment rows).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")
    data = TrainingData(dataset)
    grids, _ = build_plan(data, replace(config, segment_size=0))
    max_len = config.pool[-1][0]
    span = min(config.segment_size or data.num_frames, max_len)
    plan = SegmentPlan.fixed(data.num_frames, span, config.pool)
    backend_rows = []
    for backend in backends:
        cfg = replace(config, backend=backend, match_budget=True, segment_size=span)
        _, row = _run(dataset, data, cfg, plan, grids, do_eval, protocol)
        backend_rows.append({"backend": backend, **row})
    _write(out / "backends.csv", BACKEND_COLUMNS, backend_rows)
    segment_rows = []
    for size in segment_sizes:
        cfg = replace(config, segment_size=int(size))
        p = SegmentPlan.fixed(data.num_frames, min(int(size), max_len), config.pool)
        _, row = _run(dataset, data, cfg, p, grids, do_eval, protocol)
        segment_rows.append({"mode": "fixed", "setting": size, "segments": len(p.segments),
                             "mean_length": p.mean_length(), **row})
    for threshold in thresholds:
        cfg = replace(config, threshold=float(threshold), segment_size=0)
        _, p = build_plan(data, cfg)
        _, row = _run(dataset, data, cfg, p, grids, do_eval, protocol)
        segment_rows.append({"mode": "adaptive", "setting": threshold, "segments": len(p.segments),
                             "mean_length": p.mean_length(), **row})
    if segment_rows:
        _write(out / "segments.csv", SEGMENT_COLUMNS, segment_rows)
    return backend_rows, segment_rows
