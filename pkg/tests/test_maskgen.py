"""Tests for the pretraining mask generators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macronav import gridmap, maskgen
from macronav.errors import ConfigError

import oracles


def rng_of(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# stochastic path masking


def test_spm_deterministic():
    a = maskgen.spm_mask((16, 16), 0.4, 0.8, rng_of(7))
    b = maskgen.spm_mask((16, 16), 0.4, 0.8, rng_of(7))
    np.testing.assert_array_equal(a.masked, b.masked)
    assert a.params == b.params


def test_spm_zero_rho_empty():
    spec = maskgen.spm_mask((16, 16), 0.0, 0.9, rng_of(0))
    assert spec.masked.size == 0
    assert spec.params["steps"] == 0


def test_spm_step_budget_includes_start():
    # rho * N = 1 allows exactly one marking step: the start patch itself.
    spec = maskgen.spm_mask((4, 4), 1 / 16, 0.9, rng_of(3))
    assert spec.masked.size == 1


@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_spm_bounds_and_connectivity(seed, rho, s):
    grid = (12, 12)
    spec = maskgen.spm_mask(grid, rho, s, rng_of(seed))
    n = grid[0] * grid[1]
    budget = math.floor(rho * n)
    assert 0 < spec.masked.size <= budget
    assert spec.masked.size / n <= rho + 1 / n
    assert np.all(spec.masked >= 0) and np.all(spec.masked < n)
    assert np.all(np.diff(spec.masked) > 0)  # sorted, unique
    assert oracles.patches_connected8(spec.masked, grid)


def test_spm_full_budget_small_grid():
    # rho = 1 on a 2x2 grid: four marking steps, all indices in range, the
    # set is connected and can cover the whole grid but never exceeds it.
    for seed in range(50):
        spec = maskgen.spm_mask((2, 2), 1.0, 0.5, rng_of(seed))
        assert 1 <= spec.masked.size <= 4
        assert oracles.patches_connected8(spec.masked, (2, 2))


def test_spm_mean_fraction_and_persistence_ordering():
    # Persistent walks revisit less, so they cover more unique patches for
    # the same step budget.  At rho=0.5 on 32x32 the mean masked fraction
    # sits well inside (0.25, 0.50).
    grid, n = (32, 32), 1024
    trials = 1000

    def mean_frac(s):
        total = 0
        for seed in range(trials):
            total += maskgen.spm_mask(grid, 0.5, s, rng_of(seed)).masked.size
        return total / (trials * n)

    persistent = mean_frac(0.9)
    diffuse = mean_frac(0.0)
    assert 0.25 < persistent < 0.50
    assert persistent > diffuse


# ---------------------------------------------------------------------------
# field-of-view masking


def test_fov_radii_reference_values():
    r_fov, r_expand = maskgen.fov_radii(1024, 0.1, 0.1)
    assert r_fov == pytest.approx(math.sqrt(0.1 * 1024 / math.pi), abs=1e-12)
    assert r_fov == pytest.approx(5.7091, abs=1e-3)
    assert r_expand == pytest.approx(8.0740, abs=1e-3)


@given(st.integers(0, 10_000), st.floats(0.02, 0.3), st.floats(0.02, 0.3))
@settings(max_examples=60, deadline=None)
def test_fov_matches_distance_predicate(seed, rho_fov, rho_expand):
    grid = (16, 16)
    spec = maskgen.fov_mask(grid, rho_fov, rho_expand, rng_of(seed))
    classes = oracles.fov_membership(grid, spec.params["center"],
                                     spec.params["r_fov"],
                                     spec.params["r_expand"])
    core = {i for i, k in classes.items() if k == "core"}
    ring = {i for i, k in classes.items() if k == "ring"}
    assert set(spec.core.tolist()) == core
    assert set(spec.masked.tolist()) == ring


def test_fov_center_always_in_core():
    for seed in range(30):
        spec = maskgen.fov_mask((16, 16), 0.05, 0.1, rng_of(seed))
        cr, cc = spec.params["center"]
        assert cr * 16 + cc in set(spec.core.tolist())


def test_fov_core_and_ring_disjoint():
    spec = maskgen.fov_mask((32, 32), 0.1, 0.1, rng_of(5))
    assert not set(spec.core.tolist()) & set(spec.masked.tolist())


def test_fov_clipped_at_corner():
    # Force the center onto a corner by retrying seeds; clipped discs must
    # stay inside the grid and be smaller than an interior disc.
    grid = (16, 16)
    corner = None
    for seed in range(200):
        spec = maskgen.fov_mask(grid, 0.1, 0.1, rng_of(seed))
        if spec.params["center"] == (0, 0):
            corner = spec
            break
    assert corner is not None
    n = 256
    assert np.all(corner.core >= 0) and np.all(corner.core < n)
    # An interior center keeps the full disc; a corner keeps about a quarter.
    interior = oracles.fov_membership(grid, (8, 8), corner.params["r_fov"],
                                      corner.params["r_expand"])
    interior_core = sum(1 for k in interior.values() if k == "core")
    assert corner.core.size < interior_core


# ---------------------------------------------------------------------------
# random masking


def test_mae_counts_exact():
    spec = maskgen.mae_mask((16, 16), 0.75, rng_of(0))
    assert spec.masked.size == 192
    spec = maskgen.mae_mask((2, 5), 0.75, rng_of(0))
    assert spec.masked.size == 7  # floor(0.75 * 10)


def test_mae_sorted_unique_in_range():
    for seed in range(20):
        spec = maskgen.mae_mask((8, 8), 0.75, rng_of(seed))
        assert np.all(np.diff(spec.masked) > 0)
        assert spec.masked.min() >= 0 and spec.masked.max() < 64


def test_mae_per_index_frequency_uniform():
    # Each index is masked with probability count/N; over M draws the
    # empirical frequency must stay within 4 sigma of that.
    n, ratio, trials = 64, 0.75, 2000
    count = math.floor(ratio * n)
    hits = np.zeros(n)
    for seed in range(trials):
        hits[maskgen.mae_mask((8, 8), ratio, rng_of(seed)).masked] += 1
    p = count / n
    sigma = math.sqrt(p * (1 - p) / trials)
    freq = hits / trials
    assert np.all(np.abs(freq - p) < 4 * sigma)


# ---------------------------------------------------------------------------
# task sampling and per-item parameter draws


def test_sample_task_equal_frequencies():
    rng = rng_of(123)
    draws = [maskgen.sample_task(rng) for _ in range(30_000)]
    for t in maskgen.TASKS:
        frac = draws.count(t) / len(draws)
        assert abs(frac - 1 / 3) < 0.02


def test_sample_task_subset_and_errors():
    rng = rng_of(0)
    assert maskgen.sample_task(rng, ("fov",)) == "fov"
    with pytest.raises(ConfigError):
        maskgen.sample_task(rng, ())
    with pytest.raises(ConfigError):
        maskgen.sample_task(rng, ("spm", "bogus"))


def test_sample_mask_parameter_ranges():
    rng = rng_of(9)
    for _ in range(50):
        p = maskgen.sample_mask("spm", (16, 16), rng).params
        assert maskgen.SPM_RHO_RANGE[0] <= p["rho"] <= maskgen.SPM_RHO_RANGE[1]
        assert (maskgen.SPM_PERSIST_RANGE[0] <= p["persistence"]
                <= maskgen.SPM_PERSIST_RANGE[1])
    for _ in range(50):
        p = maskgen.sample_mask("fov", (16, 16), rng).params
        assert maskgen.FOV_RHO_RANGE[0] <= p["rho_fov"] <= maskgen.FOV_RHO_RANGE[1]
        assert (maskgen.FOV_EXPAND_RANGE[0] <= p["rho_expand"]
                <= maskgen.FOV_EXPAND_RANGE[1])
    assert maskgen.sample_mask("mae", (16, 16), rng).params["ratio"] == 0.75
    with pytest.raises(ConfigError):
        maskgen.sample_mask("nope", (16, 16), rng)


# ---------------------------------------------------------------------------
# mask rendering


def test_render_mask_values():
    spec = maskgen.fov_mask((16, 16), 0.1, 0.1, rng_of(1))
    img = maskgen.render_mask(spec, patch=4)
    assert img.shape == (64, 64)
    assert set(np.unique(img)) <= {0, 64, 128}
    plain = maskgen.render_mask(maskgen.mae_mask((16, 16), 0.5, rng_of(1)))
    assert set(np.unique(plain)) <= {0, 255}


# ---------------------------------------------------------------------------
# batch assembly


def small_pool(seed=0, per_source=3):
    src = maskgen.MapSource(name="rooms", weight=1.0, style="rooms",
                            size=64, density=0.1)
    return maskgen.MapPool([src], per_source=per_source, seed=seed)


def test_batch_shapes_and_values():
    pool = small_pool()
    batch = maskgen.build_pretrain_batch(pool, 4, 64, 8, rng_of(0))
    assert batch.maps.shape == (4, 64, 64)
    assert batch.maps.dtype == np.float32
    assert set(np.unique(batch.maps)) <= {0.0, 0.5, 1.0}
    assert len(batch.masks) == 4
    assert all(m.grid == (8, 8) for m in batch.masks)


def test_batch_single_task_shared():
    pool = small_pool()
    for seed in range(10):
        batch = maskgen.build_pretrain_batch(pool, 6, 64, 8, rng_of(seed))
        assert batch.task in maskgen.TASKS
        assert all(m.task == batch.task for m in batch.masks)


def test_batch_deterministic():
    pool_a, pool_b = small_pool(seed=4), small_pool(seed=4)
    a = maskgen.build_pretrain_batch(pool_a, 3, 64, 8, rng_of(11))
    b = maskgen.build_pretrain_batch(pool_b, 3, 64, 8, rng_of(11))
    assert a.task == b.task
    np.testing.assert_array_equal(a.maps, b.maps)
    for ma, mb in zip(a.masks, b.masks):
        np.testing.assert_array_equal(ma.masked, mb.masked)


def test_batch_task_restriction():
    pool = small_pool()
    batch = maskgen.build_pretrain_batch(pool, 2, 64, 8, rng_of(0),
                                         tasks=("mae",))
    assert batch.task == "mae"


def test_batch_rejects_indivisible_patch():
    pool = small_pool()
    with pytest.raises(ConfigError):
        maskgen.build_pretrain_batch(pool, 2, 60, 8, rng_of(0))


def test_partial_items_contain_unknown():
    # With partial_frac=1 every item is a partially observed belief, which
    # must leave unknown (0.5) cells in a 64x64 crop scanned from inside.
    pool = small_pool()
    batch = maskgen.build_pretrain_batch(pool, 4, 64, 8, rng_of(2),
                                         partial_frac=1.0)
    assert all((batch.maps[i] == 0.5).any() for i in range(4))


def test_full_map_items_when_partial_disabled():
    pool = small_pool()
    batch = maskgen.build_pretrain_batch(pool, 4, 48, 8, rng_of(2),
                                         partial_frac=0.0)
    # Crops of a fully known 64x64 map can still pad with 0.5 near edges,
    # but the center cell is the agent's own free cell.
    assert all(batch.maps[i, 24, 24] == 1.0 for i in range(4))


# ---------------------------------------------------------------------------
# map sources


def test_pool_weight_mixture():
    a = maskgen.MapSource(name="a", weight=3.0, style="rooms", size=64, density=0.1)
    b = maskgen.MapSource(name="b", weight=1.0, style="maze", size=64, density=0.2)
    pool = maskgen.MapPool([a, b], per_source=2, seed=0)
    ids_a = {id(m) for m in pool.pools[0]}
    rng = rng_of(0)
    hits = sum(1 for _ in range(2000) if id(pool.draw(rng)) in ids_a)
    assert abs(hits / 2000 - 0.75) < 0.05


def test_pool_dir_source_roundtrip(tmp_path):
    for i in range(3):
        grid = gridmap.generate_map(gridmap.MapSpec(64, "cluttered", 0.1, seed=i))
        gridmap.save_map(grid, tmp_path / f"m{i}.pgm")
    src = maskgen.MapSource(name="disk", weight=1.0, kind="dir",
                            path=str(tmp_path))
    pool = maskgen.MapPool([src], seed=0)
    assert len(pool.pools[0]) == 3
    drawn = pool.draw(rng_of(0))
    assert drawn.cells.shape == (64, 64)


def test_pool_empty_dir_is_config_error(tmp_path):
    src = maskgen.MapSource(name="disk", weight=1.0, kind="dir",
                            path=str(tmp_path))
    with pytest.raises(ConfigError):
        maskgen.MapPool([src])


def test_pool_rejects_bad_weights_and_kinds():
    src = maskgen.MapSource(name="a", weight=0.0, style="rooms", size=64,
                            density=0.1)
    with pytest.raises(ConfigError):
        maskgen.MapPool([src])
    with pytest.raises(ConfigError):
        maskgen.MapPool([])
    bad = maskgen.MapSource(name="a", weight=1.0, kind="ftp")
    with pytest.raises(ConfigError):
        maskgen.MapPool([bad])
