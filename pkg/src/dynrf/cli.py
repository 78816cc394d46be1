"""Command-line entry point: synth, partition, train, render, eval, ablate.

Exit status is 0 on success, 1 on a runtime failure and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, DatasetError, DomainError

log = logging.getLogger("dynrf")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for compiled kernels")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="fixed-order gradient accumulation (default on)")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration; flags override it")
    p.add_argument("--backend", choices=("humanrf", "hex4d", "tngp"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--max-samples", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--segment-size", type=int, help="fixed segment length instead of adaptive")
    p.add_argument("--occupancy-resolution", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynrf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--cameras", type=int, default=16)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--steps", type=int, default=1024, help="reference quadrature steps per ray")
    _add_common(p)

    p = sub.add_parser("partition", help="carve occupancy from masks and split the sequence")
    p.add_argument("--masks", type=Path, required=True, help="dataset directory holding the masks")
    p.add_argument("--threshold", type=float, default=1.25)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--cameras", choices=("train", "all"), default="train")
    p.add_argument("--out", type=Path, help="plan JSON path (default: stdout)")
    p.add_argument("--grids-dir", type=Path, help="also write per-frame occupancy bitsets here")
    _add_common(p)

    p = sub.add_parser("train", help="optimise a model on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plan", type=Path, help="segment plan JSON (default: partition the data)")
    p.add_argument("--resume", type=Path, help="continue from a training checkpoint")
    _add_run_options(p)
    _add_common(p)

    p = sub.add_parser("render", help="render views from a checkpoint to PNG")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset supplying the cameras")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--camera", type=int, action="append", help="camera index (repeatable)")
    p.add_argument("--frame", type=int, action="append", help="frame index (repeatable)")
    p.add_argument("--split", default="test", help="cameras to render when --camera is absent")
    p.add_argument("--steps", type=int, default=256)
    _add_common(p)

    p = sub.add_parser("eval", help="score held-out views")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="metric CSV path")
    p.add_argument("--protocol", choices=("all", "rotation"), default="all")
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=256)
    _add_common(p)

    p = sub.add_parser("ablate", help="backend comparison and segmentation sweeps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--backends", type=_csv_list(str), default=["humanrf", "hex4d", "tngp"])
    p.add_argument("--segment-sizes", type=_csv_list(int), default=[])
    p.add_argument("--thresholds", type=_csv_list(float), default=[])
    p.add_argument("--params-only", action="store_true", help="count parameters without training")
    p.add_argument("--protocol", choices=("all", "rotation"), default="all")
    _add_run_options(p)
    _add_common(p)
    return parser


def _set_threads(n) -> None:
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.override(
        seed=args.seed, threads=args.threads, deterministic=args.deterministic,
        backend=getattr(args, "backend", None), iterations=getattr(args, "iterations", None),
        max_samples=getattr(args, "max_samples", None), threshold=getattr(args, "threshold", None),
        segment_size=getattr(args, "segment_size", None),
        occupancy_resolution=getattr(args, "occupancy_resolution", None),
    )


def cmd_synth(args) -> int:
    from .dataset import generate_dataset
    from .scenes import SceneSpec

    spec = SceneSpec(args.scene, args.frames, args.cameras, args.width, args.height, args.seed)
    manifest = generate_dataset(spec, args.out, n_steps=args.steps)
    print(f"wrote {len(manifest.cameras)} cameras x {manifest.frames} frames to {args.out}")
    return 0


def cmd_partition(args) -> int:
    from .dataset import load_dataset
    from .occupancy import carve_sequence, partition_sequence

    ds = load_dataset(args.masks)
    cams = ds.split("train") if args.cameras == "train" else list(range(len(ds.cameras)))
    res = (args.resolution,) * 3
    grids = carve_sequence([ds.masks(f, cams) for f in range(ds.num_frames)],
                           [ds.cameras[c] for c in cams], ds.box, res)
    plan = partition_sequence(grids, args.threshold)
    text = plan.to_json()
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.grids_dir:
        args.grids_dir.mkdir(parents=True, exist_ok=True)
        for f, g in enumerate(grids):
            g.save(args.grids_dir / f"occupancy_{f:05}.bin")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .occupancy import SegmentPlan
    from .training import TrainingData, init_state, train

    ds = load_dataset(args.data)
    data = TrainingData(ds)
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        cfg = _run_config(args)
        plan = SegmentPlan.from_json(args.plan.read_text(encoding="utf-8")) if args.plan else None
        state = init_state(data, cfg, plan)
    state = train(ds, state=state, data=data, out_dir=args.out)
    last = state.log[-1] if state.log else None
    msg = f"trained {state.iteration} iterations"
    if last:
        msg += f", final loss {last['loss_total']:.6g}"
    print(msg)
    return 0


def _select_views(ds, args):
    cams = args.camera if args.camera else ds.split(args.split)
    frames = args.frame if args.frame else list(range(ds.num_frames))
    for c in cams:
        if not 0 <= c < len(ds.cameras):
            raise DomainError(f"camera {c} out of range")
    return cams, frames


def cmd_render(args) -> int:
    from .checkpoint import load_model
    from .dataset import load_dataset, write_png
    from .render import render_image

    model = load_model(args.checkpoint)
    ds = load_dataset(args.data)
    cams, frames = _select_views(ds, args)
    args.out.mkdir(parents=True, exist_ok=True)
    for c in cams:
        for f in frames:
            rgb, mask = render_image(ds.cameras[c], f, model, args.steps)
            write_png(args.out / f"cam{c:03}_frame{f:05}_rgb.png", rgb.data)
            write_png(args.out / f"cam{c:03}_frame{f:05}_mask.png", mask.data)
    print(f"rendered {len(cams) * len(frames)} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .dataset import load_dataset
    from .metrics import evaluate

    model = load_model(args.checkpoint)
    ds = load_dataset(args.data)
    report = evaluate(model, ds, args.protocol, args.split, args.steps)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    print(json.dumps({"images": len(report.rows), "skipped": report.skipped,
                      "psnr_fg": report.mean_psnr, "ssim_crop": report.mean_ssim}))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate
    from .dataset import load_dataset

    ds = load_dataset(args.data)
    cfg = _run_config(args).resolved(ds.num_frames)
    rows, seg_rows = ablate(ds, cfg, args.out, args.backends, args.segment_sizes, args.thresholds,
                            not args.params_only, args.protocol)
    for row in rows:
        print(f"{row['backend']}: params={row['params']} compression={row['compression']:.6f}"
              + (f" psnr={row['psnr_fg']:.3f}" if row["psnr_fg"] != "" else ""))
    for row in seg_rows:
        print(f"{row['mode']} {row['setting']}: segments={row['segments']} params={row['params']}"
              + (f" psnr={row['psnr_fg']:.3f}" if row["psnr_fg"] != "" else ""))
    return 0


COMMANDS = {"synth": cmd_synth, "partition": cmd_partition, "train": cmd_train,
            "render": cmd_render, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return COMMANDS[args.command](args)
    except (DomainError, DatasetError, CheckpointError, OSError) as exc:
        print(f"dynrf: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
