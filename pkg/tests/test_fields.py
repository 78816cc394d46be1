import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrf.errors import DomainError
from dynrf.fields import (
    INIT_RANGE, PAPER_GRID, DenseGrid1D, FeatureField4D, HashGrid3D, HashGridConfig, MultiResGrid,
    count_parameters, field_parameter_count, grid_parameter_count, matched_configs,
)
from dynrf.occupancy import Segment

from helpers import (
    brute_force_encode, exact_resolutions, field_oracle, gradient_check, level_is_hashed, scalar_lerp,
)

SMALL = HashGridConfig(levels=4, features_per_level=2, min_resolution=2, max_resolution=24,
                       table_size_log2=8)


def level_tables(grid):
    return [grid.level_table(l) for l in range(grid.config.levels)]


@pytest.mark.parametrize("levels,k_min,k_max", [(8, 16, 256), (16, 32, 2048), (4, 2, 24), (5, 3, 100), (1, 7, 7)])
def test_resolutions_match_exact_integer_oracle(levels, k_min, k_max):
    cfg = HashGridConfig(levels, 2, k_min, k_max, 15)
    assert cfg.resolutions() == exact_resolutions(levels, k_min, k_max)


def test_default_resolutions():
    assert HashGridConfig().resolutions() == [16, 23, 35, 52, 78, 115, 172, 256]
    assert PAPER_GRID.resolutions()[0] == 32 and PAPER_GRID.resolutions()[-1] == 2048


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_grid_matches_brute_force(dim, rng):
    cfg = SMALL
    grid = MultiResGrid(dim, cfg, dtype=np.float64, rng=rng)
    grid.params[:] = rng.normal(size=grid.params.size)
    assert grid.hashed.any() and not grid.hashed.all()
    x = rng.random((40, dim))
    x[:4] = [[0.0] * dim, [1.0] * dim, [0.5] * dim, [1.3] * dim]  # corners, centre, clamped
    res = exact_resolutions(cfg.levels, cfg.min_resolution, cfg.max_resolution)
    hashed = [level_is_hashed(K, dim, cfg.table_size_log2) for K in res]
    expect = brute_force_encode(x, level_tables(grid), res, hashed, dim, 2, cfg.table_size_log2)
    np.testing.assert_allclose(grid.encode(x), expect, rtol=0, atol=1e-12)


def test_grid_all_hashed_brute_force(rng):
    cfg = HashGridConfig(3, 3, 4, 16, 6, hash_all_levels=True)
    grid = HashGrid3D(cfg, np.float64, rng)
    grid.params[:] = rng.normal(size=grid.params.size)
    x = rng.random((30, 3))
    expect = brute_force_encode(x, level_tables(grid), cfg.resolutions(), [True] * 3, 3, 3, 6)
    np.testing.assert_allclose(grid.encode(x), expect, atol=1e-12)


def test_dense_only_plane_never_hashes():
    g = MultiResGrid(2, HashGridConfig(2, 2, 4, 300, 4), dense_only=True, dtype=np.float64)
    assert not g.hashed.any()
    assert g.num_params == sum((K + 1) ** 2 * 2 for K in (4, 300))


def test_grid_interpolates_vertex_values_exactly(rng):
    cfg = HashGridConfig(1, 1, 4, 4, 10)
    grid = HashGrid3D(cfg, np.float64)
    grid.params[:] = rng.normal(size=grid.params.size)
    for i, j, k in [(0, 0, 0), (1, 2, 3), (4, 4, 4)]:
        v = grid.encode(np.array([[i, j, k]]) / 4.0)[0, 0]
        assert v == grid.params[i + 5 * j + 25 * k]


def test_init_range(rng):
    grid = HashGrid3D(HashGridConfig(), rng=rng)
    assert np.abs(grid.params).max() <= INIT_RANGE
    assert grid.params.dtype == np.float32
    assert np.std(grid.params) > INIT_RANGE / 3


def test_lerp1d_matches_scalar_lerp(rng):
    g = DenseGrid1D(7, 5, np.float64, rng)
    g.params[:] = rng.normal(size=g.params.size)
    x = np.concatenate([rng.random(50), [0.0, 1.0, 1 / 6, -0.2, 1.4]])
    out = g.sample(x)
    for k, v in enumerate(x):
        np.testing.assert_allclose(out[k], scalar_lerp(v, g.vectors), rtol=0, atol=1e-12)


def test_lerp1d_validation():
    with pytest.raises(DomainError):
        DenseGrid1D(1, 4)


def test_paper_scale_parameter_count():
    # size-100 segment: T = 2^19, L = 16, F = 2 -> 2^24 parameters per 3D grid
    assert grid_parameter_count(3, PAPER_GRID) == 2 ** 24
    assert 2 ** 19 * 16 * 2 == 2 ** 24


def test_parameter_counts_agree_with_allocation(rng):
    cfg = HashGridConfig(levels=4, min_resolution=4, max_resolution=40, table_size_log2=10)
    seg = Segment(0, 9, 15)
    for backend in ("humanrf", "hex4d", "tngp"):
        f = FeatureField4D(backend, seg, cfg, np.float32)
        assert count_parameters(f) == field_parameter_count(backend, 9, cfg)
    assert count_parameters(HashGrid3D(cfg)) == grid_parameter_count(3, cfg)


def test_humanrf_parameter_layout():
    cfg = HashGridConfig(levels=2, features_per_level=2, min_resolution=2, max_resolution=4, table_size_log2=6)
    f = FeatureField4D("humanrf", Segment(0, 5, 15), cfg)
    names = [n for n, _ in f.components]
    assert names == ["xyz", "xyt", "xzt", "yzt", "t", "z", "y", "x"]
    per3d = (27 + 64) * 2  # level K=2 dense (27 vertices), K=4 hashed (125 > 64)
    assert count_parameters(f) == 4 * per3d + (5 + 3 * 64) * 4


def test_matched_budgets_are_close():
    cfg = HashGridConfig()
    target = field_parameter_count("humanrf", 16, cfg)
    m = matched_configs(cfg, 16)
    assert m["humanrf"] == cfg
    for backend, key in (("hex4d", "plane_config"), ("tngp", "tngp_config")):
        n = field_parameter_count(backend, 16, cfg, **{key: m[backend]})
        assert abs(n - target) / target < 0.3


@pytest.mark.parametrize("backend", ["humanrf", "hex4d", "tngp"])
def test_field_matches_composition(backend, rng):
    seg = Segment(4, 6, 15)
    f = FeatureField4D(backend, seg, SMALL, np.float64, rng)
    for g in f.grids():
        g.params[:] = rng.normal(size=g.params.size)
    p = rng.random((25, 3))
    frames = rng.integers(4, 10, size=25)
    t = (frames - 4) / 5
    np.testing.assert_allclose(f.query_frame(p, frames), field_oracle(f, p, t), atol=1e-12)
    with pytest.raises(DomainError):
        f.query_frame(p[:1], [10])


def test_single_frame_segment_time_is_zero():
    f = FeatureField4D("humanrf", Segment(3, 1, 15), SMALL, np.float64)
    assert f.local_time([3]).tolist() == [0.0]
    assert f.component("t").resolution == 2


def test_unknown_backend():
    with pytest.raises(DomainError):
        FeatureField4D("mlp", Segment(0, 1, 15), SMALL)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_grid_gradient(dim, rng):
    grid = MultiResGrid(dim, SMALL, dtype=np.float64, rng=rng)
    x = rng.random((60, dim))
    w = rng.normal(size=(60, grid.output_dim))
    loss = lambda: float(np.sum(w * grid.encode(x)) + 0.5 * np.sum(grid.encode(x) ** 2))  # noqa: E731
    grid.grad[:] = 0
    out = grid.encode(x)
    grid.backward(x, w + out)
    assert gradient_check(loss, grid.params, grid.grad, rng) >= 0.99


def test_lerp1d_gradient(rng):
    g = DenseGrid1D(9, 4, np.float64, rng)
    x = rng.random(50)
    w = rng.normal(size=(50, 4))
    loss = lambda: float(np.sum(np.sin(g.sample(x)) * w))  # noqa: E731
    g.grad[:] = 0
    g.backward(x, np.cos(g.sample(x)) * w)
    assert gradient_check(loss, g.params, g.grad, rng) >= 0.99


@pytest.mark.parametrize("backend", ["humanrf", "hex4d", "tngp"])
def test_field_gradient(backend, rng):
    f = FeatureField4D(backend, Segment(0, 5, 15), SMALL, np.float64, rng)
    for g in f.grids():
        g.params[:] = rng.normal(scale=0.5, size=g.params.size)
    p = rng.random((40, 3))
    t = rng.random(40)
    w = rng.normal(size=(40, SMALL.output_dim))
    loss = lambda: float(np.sum(w * f.query(p, t) ** 2))  # noqa: E731
    f.zero_grad()
    out, cache = f.query(p, t, return_cache=True)
    f.backward(cache, 2 * w * out)
    flat = np.concatenate([g.params for g in f.grids()])
    grad = np.concatenate([g.grad for g in f.grids()])
    offsets = np.cumsum([0] + [g.params.size for g in f.grids()])

    def loss_flat():
        for g, a, b in zip(f.grids(), offsets[:-1], offsets[1:]):
            g.params[:] = flat[a:b]
        return loss()

    assert gradient_check(loss_flat, flat, grad, rng) >= 0.99


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_grid_is_linear_in_parameters(seed):
    rng = np.random.default_rng(seed)
    a = HashGrid3D(SMALL, np.float64, rng)
    b = HashGrid3D(SMALL, np.float64, rng)
    s = HashGrid3D(SMALL, np.float64)
    s.params[:] = 2 * a.params - 3 * b.params
    x = rng.random((20, 3))
    np.testing.assert_allclose(s.encode(x), 2 * a.encode(x) - 3 * b.encode(x), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    for dim in (2, 3, 4):
        g = MultiResGrid(dim, SMALL, dtype=np.float64)
        g.params[:] = 1.0
        np.testing.assert_allclose(g.encode(rng.uniform(-0.2, 1.2, (10, dim))), 1.0, atol=1e-12)
