import csv

import numpy as np
import pytest

from dynrf.checkpoint import load_checkpoint, save_checkpoint
from dynrf.config import RunConfig
from dynrf.errors import DomainError
from dynrf.losses import total_loss, total_loss_grads
from dynrf.occupancy import Segment, SegmentPlan
from dynrf.render import RayBatchRender
from dynrf.training import (
    LOG_COLUMNS, TrainingData, batch_ray_count, checkpoint_name, init_state, initial_ray_count,
    sample_batch, train,
)

from helpers import gradient_check_many

SMALL = dict(table_size_log2=12, levels=4, max_resolution=64, occupancy_resolution=32,
             max_samples=2048, n_steps=64, checkpoint_every=4)


def small_config(**kw):
    return RunConfig(**{**SMALL, **kw})


@pytest.fixture()
def data(tiny_dataset):
    return TrainingData(tiny_dataset)


def test_ray_counts():
    assert initial_ray_count(1024, 768) == 8192
    assert initial_ray_count(64, 64) == 43
    assert batch_ray_count(65536, None, 43) == 43
    assert batch_ray_count(65536, 32.0, 43) == 2048
    assert batch_ray_count(100, 0.0, 43) == 100  # empty batches fall back to the budget
    assert checkpoint_name(1500) == "ckpt_00001500.trf4d"


def test_batch_frames_stay_in_declared_set(data, rng):
    for _ in range(50):
        b = sample_batch(data, rng, 200, 8)
        assert len(set(b.frame_set.tolist())) <= 8
        assert np.all(np.isin(b.frames, b.frame_set))
        assert np.all((b.frames >= 0) & (b.frames < data.num_frames))


def test_batch_matches_stored_pixels(data, rng):
    b = sample_batch(data, rng, 30, 8)
    for i in range(len(b)):
        hits = np.nonzero(np.all(data.directions == b.directions[i], axis=-1))
        c, p = hits[0][0], hits[1][0]
        np.testing.assert_array_equal(b.gt_color[i], data.rgb[b.frames[i], c, p])
        assert b.gt_mask[i] == data.mask[b.frames[i], c, p]


def test_frame_selection_uniform(rng):
    class Fake:
        num_frames = 20
        cameras = [0]
        pixels = 4
        origins = directions = np.zeros((1, 4, 3))
        rgb = np.zeros((20, 1, 4, 3))
        mask = np.zeros((20, 1, 4))

    n_batches = 1000
    counts = np.zeros(20)
    for _ in range(n_batches):
        counts[np.unique(sample_batch(Fake, rng, 8, 8).frame_set)] += 1
    p = 8 / 20
    mean, sd = n_batches * p, np.sqrt(n_batches * p * (1 - p))
    assert np.all(np.abs(counts - mean) < 3 * sd), counts


def test_single_frame_sequence(rng):
    class Fake:
        num_frames = 1
        cameras = [0, 1]
        pixels = 4
        origins = directions = np.zeros((2, 4, 3))
        rgb = np.zeros((1, 2, 4, 3))
        mask = np.zeros((1, 2, 4))

    b = sample_batch(Fake, rng, 50, 8)
    assert np.all(b.frames == 0)


@pytest.mark.parametrize("backend", ["humanrf", "hex4d", "tngp"])
def test_full_pipeline_gradient(data, backend):
    state = init_state(data, small_config(dtype="float64", backend=backend))
    rng = np.random.default_rng(5)
    # move grid features off the near-zero init so head ReLUs are not all on their kinks
    for f in state.model.fields:
        for g in f.grids():
            g.params[:] = rng.normal(scale=0.5, size=g.params.size)
    b = sample_batch(data, rng, 64, 8)

    def loss():
        r = RayBatchRender(state.model, b.origins, b.directions, b.frames, 64)
        return total_loss(r.color, b.gt_color, r.acc, b.gt_mask)[0]

    state.model.zero_grad()
    r = RayBatchRender(state.model, b.origins, b.directions, b.frames, 64)
    r.backward(*total_loss_grads(r.color, b.gt_color, r.acc, b.gt_mask))
    rate, fails = gradient_check_many(loss, state.model.parameter_arrays(), rng, 200, eps=1e-5)
    assert rate >= 0.99, fails


def _snapshot(state):
    return [p.copy() for p, _ in state.model.parameter_arrays()]


def test_zero_iterations_is_noop(tiny_dataset, data, tmp_path):
    state = init_state(data, small_config(iterations=0))
    before = _snapshot(state)
    rng_before = state.rng.bit_generator.state
    out = train(tiny_dataset, state=state, data=data, out_dir=tmp_path)
    assert out.iteration == 0 and out.log == []
    for a, b in zip(before, _snapshot(out)):
        np.testing.assert_array_equal(a, b)
    assert out.rng.bit_generator.state == rng_before
    assert (tmp_path / checkpoint_name(0)).exists()


def test_training_reduces_loss_and_logs(tiny_dataset, data, tmp_path):
    state = train(tiny_dataset, small_config(iterations=60, checkpoint_every=25), tmp_path, data=data)
    rows = list(csv.DictReader(open(tmp_path / "loss_log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 60
    first = np.mean([float(r["loss_total"]) for r in rows[:10]])
    last = np.mean([float(r["loss_total"]) for r in rows[-10:]])
    assert last < first
    assert float(rows[0]["lr"]) == pytest.approx(1e-2, abs=1e-12)
    assert float(rows[-1]["lr"]) == pytest.approx(5e-3, abs=1e-9)
    names = sorted(p.name for p in tmp_path.glob("*.trf4d"))
    assert names == [checkpoint_name(25), checkpoint_name(50), checkpoint_name(60)]
    assert RunConfig.load(tmp_path / "config.toml").iterations == 60
    assert SegmentPlan.from_json((tmp_path / "plan.json").read_text()) == state.plan
    assert int(rows[1]["rays"]) == batch_ray_count(2048, int(rows[0]["samples"]) / int(rows[0]["rays"]), 6)


def test_deterministic_reruns_are_bit_identical(tiny_dataset, data, tmp_path):
    cfg = small_config(iterations=8)
    train(tiny_dataset, cfg, tmp_path / "a", data=data)
    train(tiny_dataset, cfg, tmp_path / "b", data=data)
    for name in (checkpoint_name(4), checkpoint_name(8)):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()


def test_resume_is_bit_exact(tiny_dataset, data, tmp_path):
    cfg = small_config(iterations=10, checkpoint_every=0)
    straight = train(tiny_dataset, cfg, data=data)
    half = train(tiny_dataset, cfg, data=data, stop_at=5)
    save_checkpoint(half, tmp_path / "half.trf4d")
    resumed = train(tiny_dataset, state=load_checkpoint(tmp_path / "half.trf4d"), data=data)
    assert resumed.iteration == 10
    for a, b in zip(_snapshot(straight), _snapshot(resumed)):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(straight.optimizer.m + straight.optimizer.v, resumed.optimizer.m + resumed.optimizer.v):
        np.testing.assert_array_equal(a, b)


def test_plan_mismatch_rejected(tiny_dataset, data):
    wrong = SegmentPlan((Segment(0, 5, 15),))
    with pytest.raises(DomainError):
        train(tiny_dataset, small_config(iterations=1), plan=wrong, data=data)


def test_shared_heads_single_pair(data):
    plan = SegmentPlan((Segment(0, 1, 15), Segment(1, 2, 15)))
    state = init_state(data, small_config(), plan)
    assert len(state.model.fields) == 2
    density, radiance = state.model.heads()
    head_ids = {id(a) for mlp in (density, radiance) for a in mlp.params}
    owned = [p for p, _ in state.model.parameter_arrays() if id(p) in head_ids]
    assert len(owned) == len(head_ids)
