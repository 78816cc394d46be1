"""Binary checkpoints of a model, optionally with the optimiser and sampler state.

Layout (little endian)::

    b"TRF4D\\0"  u32 version  u8 backend
    u64 n  JSON metadata (n bytes, UTF-8)
    per grid:   u64 k  k x u64 config ints  u64 n  n raw parameters
    per layer:  u64 in  u64 out  weights (in*out)  biases (out); density then radiance
    u8 has_occupancy  [4 x u64 shape  packed bits]
    u8 has_trainer    [u64 n  JSON  per parameter array: m then v]

Parameters are stored in the model dtype named in the metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CheckpointError
from .fields import BACKENDS, HashGridConfig
from .geometry import Aabb
from .model import RadianceModel
from .occupancy import SegmentPlan
from .optim import Adam

MAGIC = b"TRF4D\0"
VERSION = 1


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, n: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).astype(np.dtype(dtype))

    def json(self):
        return json.loads(self.take(self.u64()).decode("utf-8"))


def _u64(v: int) -> bytes:
    return struct.pack("<Q", int(v))


def _raw(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def _json_block(obj) -> bytes:
    data = json.dumps(obj, sort_keys=True).encode("utf-8")
    return _u64(len(data)) + data


def _metadata(model: RadianceModel, grid: HashGridConfig, match_budget: bool, max_capacity: int) -> dict:
    return {
        "box": model.box.to_dict(),
        "plan": json.loads(model.plan.to_json()),
        "grid": {"levels": grid.levels, "features_per_level": grid.features_per_level,
                 "min_resolution": grid.min_resolution, "max_resolution": grid.max_resolution,
                 "table_size_log2": grid.table_size_log2, "hash_all_levels": grid.hash_all_levels},
        "match_budget": match_budget,
        "max_capacity": max_capacity,
        "dtype": model.dtype.name,
    }


def encode_model(model: RadianceModel, grid: HashGridConfig, match_budget: bool = False,
                 max_capacity: int = 19, trainer: dict | None = None, moments=None) -> bytes:
    parts = [MAGIC, struct.pack("<IB", VERSION, BACKENDS.index(model.backend))]
    parts.append(_json_block(_metadata(model, grid, match_budget, max_capacity)))
    for f in model.fields:
        for g in f.grids():
            ints = g.config_ints()
            parts.append(_u64(len(ints)) + b"".join(_u64(i) for i in ints))
            parts.append(_u64(g.params.size) + _raw(g.params))
    for mlp in model.heads():
        for W, b in zip(mlp.weights, mlp.biases):
            parts.append(_u64(W.shape[0]) + _u64(W.shape[1]) + _raw(W) + _raw(b))
    if model.occupancy is None:
        parts.append(b"\0")
    else:
        occ = model.occupancy
        parts.append(b"\1" + b"".join(_u64(s) for s in occ.shape))
        parts.append(np.packbits(occ.reshape(-1), bitorder="little").tobytes())
    if trainer is None:
        parts.append(b"\0")
    else:
        parts.append(b"\1" + _json_block(trainer))
        for m, v in moments:
            parts.append(_raw(m) + _raw(v))
    return b"".join(parts)


def save_checkpoint(state, path) -> None:
    """Write a training state (model, Adam moments, sampler RNG, config)."""
    cfg = state.config
    trainer = {
        "iteration": state.iteration,
        "adam_t": state.optimizer.t,
        "samples_per_ray": state.samples_per_ray,
        "rng": state.rng.bit_generator.state,
        "config": cfg.to_dict(),
    }
    blob = encode_model(state.model, cfg.grid, cfg.match_budget, max(c for _, c in cfg.pool),
                        trainer, zip(state.optimizer.m, state.optimizer.v))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def save_model(model: RadianceModel, path, grid: HashGridConfig, match_budget: bool = False,
               max_capacity: int = 19) -> None:
    Path(path).write_bytes(encode_model(model, grid, match_budget, max_capacity))


def decode(blob: bytes):
    """Returns (model, trainer dict or None, moments list or None)."""
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = struct.unpack("<I", r.take(4))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    backend_id = r.u8()
    if backend_id >= len(BACKENDS):
        raise CheckpointError(f"unknown backend id {backend_id}")
    try:
        meta = r.json()
        grid = HashGridConfig(**meta["grid"])
        plan = SegmentPlan.from_json(json.dumps(meta["plan"]))
        box = Aabb.from_dict(meta["box"])
        dtype = np.dtype(meta["dtype"])
        model = RadianceModel.create(box, plan, BACKENDS[backend_id], grid, 0, dtype, None,
                                     meta["match_budget"], meta["max_capacity"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc
    for f in model.fields:
        for g in f.grids():
            ints = [r.u64() for _ in range(r.u64())]
            if ints != [int(i) for i in g.config_ints()]:
                raise CheckpointError(f"grid config {ints} does not match {g.config_ints()}")
            n = r.u64()
            if n != g.params.size:
                raise CheckpointError("grid parameter count mismatch")
            g.params[:] = r.array(n, dtype)
    for mlp in model.heads():
        for W, b in zip(mlp.weights, mlp.biases):
            shape = (r.u64(), r.u64())
            if shape != W.shape:
                raise CheckpointError(f"layer shape {shape} does not match {W.shape}")
            W[:] = r.array(W.size, dtype).reshape(W.shape)
            b[:] = r.array(b.size, dtype)
    if r.u8():
        shape = tuple(r.u64() for _ in range(4))
        n = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(r.take((n + 7) // 8), np.uint8), bitorder="little")
        model.occupancy = bits[:n].astype(bool).reshape(shape)
    trainer = moments = None
    if r.u8():
        trainer = r.json()
        moments = []
        for p, _ in model.parameter_arrays():
            moments.append((r.array(p.size, dtype), r.array(p.size, dtype)))
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return model, trainer, moments


def load_model(path) -> RadianceModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode(path.read_bytes())[0]


def load_checkpoint(path):
    """Restore a :class:`~dynrf.training.TrainState` that continues bit-exactly."""
    from .training import TrainState

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    model, trainer, moments = decode(path.read_bytes())
    if trainer is None:
        raise CheckpointError("checkpoint holds no trainer state")
    opt = Adam(model.parameter_arrays())
    opt.t = int(trainer["adam_t"])
    for k, (m, v) in enumerate(moments):
        opt.m[k][:] = m
        opt.v[k][:] = v
    rng = np.random.default_rng()
    rng.bit_generator.state = trainer["rng"]
    config = RunConfig.from_dict(trainer["config"])
    return TrainState(model, opt, config, int(trainer["iteration"]), rng, trainer["samples_per_ray"])
