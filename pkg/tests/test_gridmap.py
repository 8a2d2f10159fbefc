import math

import numpy as np
import pytest

from macronav import gridmap as gm

from oracles import (
    dijkstra_field_meters,
    flood_fill_free,
    frontier_cells_bruteforce,
    segment_visible,
)

SQRT2 = math.sqrt(2.0)


def open_room(n: int, res: float = 0.1) -> gm.OccupancyGrid:
    cells = np.full((n, n), gm.FREE, dtype=np.uint8)
    cells[0, :] = cells[-1, :] = gm.OCCUPIED
    cells[:, 0] = cells[:, -1] = gm.OCCUPIED
    return gm.OccupancyGrid(cells, res)


# --- generate_map -----------------------------------------------------------

def test_generate_deterministic():
    a = gm.generate_map(gm.MapSpec(64, "rooms", 0.2, seed=7))
    b = gm.generate_map(gm.MapSpec(64, "rooms", 0.2, seed=7))
    assert np.array_equal(a.cells, b.cells)


@pytest.mark.parametrize("style", gm.MAP_STYLES)
def test_generate_connected_free_space(style):
    g = gm.generate_map(gm.MapSpec(32, style, 0.0 if style == "maze" else 0.2, seed=1))
    assert flood_fill_free(g.cells) == 1


def test_generate_degenerate_density():
    with pytest.raises(gm.MapGenerationError):
        gm.generate_map(gm.MapSpec(32, "rooms", 0.99, seed=3))


def test_generate_rejects_small_size():
    with pytest.raises(gm.MapGenerationError):
        gm.generate_map(gm.MapSpec(16, "rooms", 0.2, seed=0))


def test_boundary_ring_occupied():
    for style in gm.MAP_STYLES:
        g = gm.generate_map(gm.MapSpec(48, style, 0.15, seed=9))
        assert (g.cells[0, :] == gm.OCCUPIED).all()
        assert (g.cells[-1, :] == gm.OCCUPIED).all()
        assert (g.cells[:, 0] == gm.OCCUPIED).all()
        assert (g.cells[:, -1] == gm.OCCUPIED).all()


# --- raycast ----------------------------------------------------------------

def test_scan_covers_empty_room():
    g = open_room(21)
    pose = gm.Pose(*g.center_of(10, 10))
    scan = gm.raycast_scan(g, pose, gm.SensorCfg(range_m=5.0, n_rays=360))
    seen = np.full(g.cells.shape, -1, dtype=np.int16)
    seen[scan.rows, scan.cols] = scan.states
    # brute-force visibility: every cell of a convex empty room is visible
    assert (seen >= 0).all()
    walls = (g.cells == gm.OCCUPIED)
    assert (seen[walls] == gm.OCCUPIED).all()
    assert (seen[~walls] == gm.FREE).all()


def test_scan_adjacent_wall_single_ray():
    g = open_room(9)
    # pose in the cell just left of the east wall, single ray along +x
    pose = gm.Pose(*g.center_of(4, 7))
    scan = gm.raycast_scan(g, pose, gm.SensorCfg(range_m=2.0, n_rays=1))
    cells = set(zip(scan.rows.tolist(), scan.cols.tolist()))
    states = {rc: s for rc, s in zip(cells, scan.states.tolist())}
    assert (4, 8) in cells and states[(4, 8)] == gm.OCCUPIED
    occupied = [rc for rc in cells if states[rc] == gm.OCCUPIED]
    assert occupied == [(4, 8)]


def test_scan_zero_range_empty():
    g = open_room(9)
    scan = gm.raycast_scan(g, gm.Pose(*g.center_of(4, 4)), gm.SensorCfg(range_m=0.0, n_rays=8))
    assert len(scan) == 0


def test_scan_never_contradicts_truth():
    g = gm.generate_map(gm.MapSpec(48, "rooms", 0.2, seed=11))
    free = np.argwhere(g.cells == gm.FREE)
    rng = np.random.default_rng(0)
    for i in rng.integers(0, len(free), size=10):
        pose = gm.Pose(*g.center_of(*free[i]))
        scan = gm.raycast_scan(g, pose)
        assert (g.cells[scan.rows, scan.cols] == scan.states).all()


# --- fuse -------------------------------------------------------------------

def test_fuse_matches_truth_and_idempotent():
    g = open_room(15)
    pose = gm.Pose(*g.center_of(7, 7))
    scan = gm.raycast_scan(g, pose, gm.SensorCfg(range_m=3.0, n_rays=180))
    b0 = gm.BeliefMap.unknown_like(g)
    b1 = gm.fuse_scan(b0, scan)
    known = b1.cells != gm.UNKNOWN
    assert known.any()
    assert (b1.cells[known] == g.cells[known]).all()
    b2 = gm.fuse_scan(b1, scan)
    assert np.array_equal(b1.cells, b2.cells)


def test_fuse_empty_scan_noop():
    g = open_room(9)
    b = gm.BeliefMap.unknown_like(g)
    b2 = gm.fuse_scan(b, gm.ScanResult.empty())
    assert np.array_equal(b.cells, b2.cells)


def test_belief_monotone_and_sound_over_episode():
    g = gm.generate_map(gm.MapSpec(48, "cluttered", 0.2, seed=4))
    free = np.argwhere(g.cells == gm.FREE)
    rng = np.random.default_rng(1)
    belief = gm.BeliefMap.unknown_like(g)
    known_before = 0
    for i in rng.integers(0, len(free), size=12):
        scan = gm.raycast_scan(g, gm.Pose(*g.center_of(*free[i])))
        belief = gm.fuse_scan(belief, scan)
        known = belief.cells != gm.UNKNOWN
        assert known.sum() >= known_before
        known_before = known.sum()
        assert (belief.cells[known] == g.cells[known]).all()


# --- frontiers --------------------------------------------------------------

def test_frontiers_fully_known_empty():
    g = open_room(11)
    b = gm.BeliefMap(g.cells.copy(), g.resolution)
    assert len(gm.detect_frontiers(b)) == 0


def test_frontier_single_free_cell():
    cells = np.full((5, 5), gm.UNKNOWN, dtype=np.uint8)
    cells[2, 2] = gm.FREE
    b = gm.BeliefMap(cells, 0.1)
    f = gm.detect_frontiers(b)
    assert f.tolist() == [[2, 2]]


def test_frontiers_match_bruteforce():
    g = gm.generate_map(gm.MapSpec(40, "rooms", 0.15, seed=2))
    belief = gm.BeliefMap.unknown_like(g)
    free = np.argwhere(g.cells == gm.FREE)
    scan = gm.raycast_scan(g, gm.Pose(*g.center_of(*free[0])))
    belief = gm.fuse_scan(belief, scan)
    got = set(map(tuple, gm.detect_frontiers(belief).tolist()))
    assert got == frontier_cells_bruteforce(belief)


# --- geodesic field ---------------------------------------------------------

def test_geodesic_tiny_diag():
    g = open_room(5)  # 3x3 free interior
    df = gm.geodesic_field(g, (2, 2))
    assert df.at(2, 2) == 0.0
    assert df.at(1, 1) == pytest.approx(SQRT2 * 0.1)
    assert df.at(1, 2) == pytest.approx(0.1)


def test_geodesic_corridor():
    cells = np.full((3, 7), gm.OCCUPIED, dtype=np.uint8)
    cells[1, 1:6] = gm.FREE
    g = gm.OccupancyGrid(cells, 0.1)
    df = gm.geodesic_field(g, (1, 1))
    assert df.at(1, 5) == pytest.approx(0.4)


def test_geodesic_unreachable_chamber():
    cells = np.full((9, 9), gm.FREE, dtype=np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = gm.OCCUPIED
    cells[4, :] = gm.OCCUPIED  # wall across, no doors
    g = gm.OccupancyGrid(cells, 0.1)
    df = gm.geodesic_field(g, (2, 2))
    assert math.isinf(df.at(6, 6))
    assert math.isfinite(df.at(2, 6))


def test_geodesic_goal_not_free():
    g = open_room(9)
    with pytest.raises(ValueError):
        gm.geodesic_field(g, (0, 0))


def test_geodesic_no_corner_cutting():
    cells = np.full((5, 5), gm.FREE, dtype=np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = gm.OCCUPIED
    cells[2, 2] = gm.OCCUPIED
    g = gm.OccupancyGrid(cells, 1.0)
    df = gm.geodesic_field(g, (1, 1))
    # every diagonal toward (3,3) touches the blocked center, so the shortest
    # path is four straight moves; with corner cutting it would be 2 + sqrt(2)
    assert df.at(3, 3) == pytest.approx(4.0, abs=1e-12)


def test_geodesic_matches_bruteforce_exactly():
    for seed in range(6):
        style = gm.MAP_STYLES[seed % 3]
        g = gm.generate_map(gm.MapSpec(32, style, 0.15, seed=seed))
        free = np.argwhere(g.cells == gm.FREE)
        goal = tuple(free[seed % len(free)])
        df = gm.geodesic_field(g, goal)
        oracle = dijkstra_field_meters(g, goal)
        assert np.array_equal(df.meters, oracle)


def test_geodesic_triangle_consistency():
    g = gm.generate_map(gm.MapSpec(32, "maze", 0.0, seed=5))
    free = np.argwhere(g.cells == gm.FREE)
    df = gm.geodesic_field(g, tuple(free[0]))
    m = df.meters
    h, w = m.shape
    for r in range(h - 1):
        for c in range(w - 1):
            if math.isfinite(m[r, c]) and math.isfinite(m[r, c + 1]):
                assert abs(m[r, c] - m[r, c + 1]) <= g.resolution + 1e-9
            if math.isfinite(m[r, c]) and math.isfinite(m[r + 1, c]):
                assert abs(m[r, c] - m[r + 1, c]) <= g.resolution + 1e-9


# --- context crop -----------------------------------------------------------

def test_crop_full_map_identity():
    g = open_room(16)
    b = gm.BeliefMap(g.cells.copy(), g.resolution)
    pose = gm.Pose(*g.center_of(8, 8))
    ctx = gm.crop_context(b, pose, 16, 16)
    expect = np.where(g.cells == gm.FREE, 1.0, 0.0).astype(np.float32)
    assert np.array_equal(ctx, expect)


def test_crop_corner_pads_unknown():
    g = open_room(16)
    b = gm.BeliefMap(g.cells.copy(), g.resolution)
    pose = gm.Pose(*g.center_of(1, 1))
    ctx = gm.crop_context(b, pose, 16, 16)
    assert (ctx[:7, :] == 0.5).all()
    assert (ctx[:, :7] == 0.5).all()


def test_crop_index_mapping_oracle():
    g = gm.generate_map(gm.MapSpec(64, "rooms", 0.2, seed=8))
    b = gm.BeliefMap(g.cells.copy(), g.resolution)
    free = np.argwhere(g.cells == gm.FREE)
    ar, ac = free[len(free) // 3]
    pose = gm.Pose(*g.center_of(ar, ac))
    H = W = 128
    ctx = gm.crop_context(b, pose, H, W)
    lut = {gm.FREE: 1.0, gm.OCCUPIED: 0.0, gm.UNKNOWN: 0.5}
    for i in range(0, H, 7):
        for j in range(0, W, 7):
            r, c = ar - H // 2 + i, ac - W // 2 + j
            want = lut[g.cells[r, c]] if (0 <= r < 64 and 0 <= c < 64) else 0.5
            assert ctx[i, j] == np.float32(want)
    assert ctx[H // 2, W // 2] == 1.0  # agent cell is FREE


def test_context_values_ternary():
    g = gm.generate_map(gm.MapSpec(32, "maze", 0.1, seed=3))
    b = gm.BeliefMap.unknown_like(g)
    free = np.argwhere(g.cells == gm.FREE)
    pose = gm.Pose(*g.center_of(*free[0]))
    b = gm.fuse_scan(b, gm.raycast_scan(g, pose))
    ctx = gm.crop_context(b, pose, 32, 32)
    assert set(np.unique(ctx)) <= {0.0, 0.5, 1.0}


# --- line of sight ----------------------------------------------------------

def test_visibility_matches_scalar_predicate():
    g = gm.generate_map(gm.MapSpec(40, "cluttered", 0.25, seed=6))
    b = gm.BeliefMap(g.cells.copy(), g.resolution)
    free = np.argwhere(g.cells == gm.FREE)
    rng = np.random.default_rng(2)
    src = tuple(free[rng.integers(len(free))])
    targets = free[rng.choice(len(free), size=60, replace=False)]
    got = gm.visible_cells_from(b, src, targets, range_m=2.0)
    want = np.array([segment_visible(b, src, tuple(t), 2.0) for t in targets])
    assert np.array_equal(got, want)


# --- map I/O ----------------------------------------------------------------

def test_map_roundtrip(tmp_path):
    g = gm.generate_map(gm.MapSpec(48, "rooms", 0.2, seed=12))
    p = tmp_path / "map.pgm"
    gm.save_map(g, p)
    g2 = gm.load_map(p)
    assert np.array_equal(g.cells, g2.cells)
    assert g2.resolution == g.resolution


def test_map_metadata_survives(tmp_path):
    g = gm.generate_map(gm.MapSpec(32, "maze", 0.0, seed=1))
    g.origin_x, g.origin_y = 1.5, -2.25
    p = tmp_path / "m.pgm"
    gm.save_map(g, p)
    g2 = gm.load_map(p)
    assert g2.resolution == 0.1
    assert (g2.origin_x, g2.origin_y) == (1.5, -2.25)


def test_load_truncated_fails(tmp_path):
    g = gm.generate_map(gm.MapSpec(32, "rooms", 0.1, seed=2))
    p = tmp_path / "t.pgm"
    gm.save_map(g, p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(gm.MapFormatError):
        gm.load_map(p)


def test_load_bad_magic(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(16))
    with pytest.raises(gm.MapFormatError):
        gm.load_map(p)


def test_load_external_pgm_without_sidecar(tmp_path):
    img = np.full((32, 32), 255, dtype=np.uint8)
    img[0, :] = img[-1, :] = img[:, 0] = img[:, -1] = 0
    p = tmp_path / "ext.pgm"
    with open(p, "wb") as f:
        f.write(b"P5\n# a comment\n32 32\n255\n")
        f.write(img.tobytes())
    g = gm.load_map(p)
    assert g.resolution == gm.DEFAULT_RESOLUTION
    assert (g.cells[1:-1, 1:-1] == gm.FREE).all()
