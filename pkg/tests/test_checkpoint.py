import struct

import numpy as np
import pytest

from dynrf.checkpoint import MAGIC, decode, encode_model, load_checkpoint, load_model, save_model
from dynrf.config import RunConfig
from dynrf.errors import CheckpointError, DomainError
from dynrf.fields import HashGridConfig
from dynrf.geometry import Aabb
from dynrf.metrics import evaluate
from dynrf.model import RadianceModel
from dynrf.occupancy import Segment, SegmentPlan
from dynrf.render import render_rays
from dynrf.training import TrainingData, checkpoint_name, train

BOX = Aabb(np.array([-1.0, -0.5, -1.0]), np.array([1.0, 1.5, 1.0]))
GRID = HashGridConfig(levels=3, features_per_level=2, min_resolution=4, max_resolution=16, table_size_log2=10)


def make_model(backend, dtype=np.float64, occupancy=True, seed=3):
    plan = SegmentPlan((Segment(0, 2, 18), Segment(2, 3, 19)))
    occ = np.random.default_rng(seed).random((5, 6, 7, 8)) < 0.5 if occupancy else None
    model = RadianceModel.create(BOX, plan, backend, GRID, seed=seed, dtype=dtype, occupancy=occ,
                                 match_budget=backend != "humanrf")
    rng = np.random.default_rng(seed + 1)
    for p, _ in model.parameter_arrays():
        p[:] = rng.normal(size=p.shape)
    return model


def _same(a, b):
    pa, pb = a.parameter_arrays(), b.parameter_arrays()
    assert len(pa) == len(pb)
    for (x, _), (y, _) in zip(pa, pb):
        assert x.dtype == y.dtype and x.shape == y.shape
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("backend", ["humanrf", "hex4d", "tngp"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_model_roundtrip(backend, dtype, tmp_path):
    model = make_model(backend, dtype)
    save_model(model, tmp_path / "m.trf4d", GRID, match_budget=backend != "humanrf")
    back = load_model(tmp_path / "m.trf4d")
    _same(model, back)
    assert back.backend == backend and back.plan == model.plan and back.box == model.box
    np.testing.assert_array_equal(back.occupancy, model.occupancy)
    o = np.tile([0.0, 0.5, -3.0], (5, 1))
    d = np.array([[0, 0, 1.0]] * 5) + np.linspace(-0.1, 0.1, 15).reshape(5, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for f in (0, 4):
        np.testing.assert_array_equal(render_rays(model, o, d, f, 32)[0], render_rays(back, o, d, f, 32)[0])


def test_header_layout():
    blob = encode_model(make_model("hex4d", occupancy=False), GRID, True)
    assert blob[:6] == MAGIC
    version, backend = struct.unpack("<IB", blob[6:11])
    assert version == 1 and backend == 1


def test_without_occupancy_roundtrip(tmp_path):
    model = make_model("tngp", occupancy=False)
    save_model(model, tmp_path / "m.trf4d", GRID, True)
    assert load_model(tmp_path / "m.trf4d").occupancy is None


def test_model_only_checkpoint_cannot_resume(tmp_path):
    save_model(make_model("humanrf"), tmp_path / "m.trf4d", GRID)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.trf4d")


def test_corrupt_checkpoints_rejected(tmp_path):
    blob = encode_model(make_model("humanrf"), GRID)
    with pytest.raises(CheckpointError):
        decode(b"NOTIT" + blob[5:])
    with pytest.raises(CheckpointError):
        decode(blob[:-3])
    with pytest.raises(CheckpointError):
        decode(blob + b"\0")
    bad_version = blob[:6] + struct.pack("<I", 7) + blob[10:]
    with pytest.raises(CheckpointError):
        decode(bad_version)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "absent.trf4d")


def test_training_checkpoint_restores_state(tiny_dataset, tmp_path):
    cfg = RunConfig(table_size_log2=12, levels=4, max_resolution=64, occupancy_resolution=32,
                    max_samples=1024, n_steps=32, iterations=3, checkpoint_every=0)
    state = train(tiny_dataset, cfg, tmp_path)
    back = load_checkpoint(tmp_path / checkpoint_name(3))
    _same(state.model, back.model)
    assert back.iteration == 3 and back.optimizer.t == 3
    assert back.samples_per_ray == state.samples_per_ray
    assert back.config == state.config
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    for a, b in zip(state.optimizer.m + state.optimizer.v, back.optimizer.m + back.optimizer.v):
        np.testing.assert_array_equal(a, b)


def test_evaluation_is_deterministic_and_checks_frames(tiny_dataset, tmp_path):
    cfg = RunConfig(table_size_log2=12, levels=4, max_resolution=64, occupancy_resolution=32,
                    max_samples=1024, n_steps=32, iterations=2, checkpoint_every=0)
    train(tiny_dataset, cfg, tmp_path)
    model = load_model(tmp_path / checkpoint_name(2))
    a = evaluate(model, tiny_dataset, "all", n_steps=32)
    b = evaluate(load_model(tmp_path / checkpoint_name(2)), tiny_dataset, "all", n_steps=32)
    assert a.rows == b.rows and len(a.rows) + a.skipped == len(tiny_dataset.split("test")) * 3
    rot = evaluate(model, tiny_dataset, "rotation", n_steps=32)
    assert len(rot.rows) + rot.skipped == 3
    wrong = make_model("humanrf")
    with pytest.raises(DomainError):
        evaluate(wrong, tiny_dataset)
