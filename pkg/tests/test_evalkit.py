"""Metrics, baselines, episode generation, and report emission."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from macronav import evalkit, gridmap, policy
from macronav.encoder import EncoderCfg
from macronav.errors import SetupError
from macronav.evalkit import (LEVELS, BaselineNearestFrontier, EpisodeRecord,
                              OracleActor, PolicyActor, compute_sr_spl,
                              evaluate, emit_report, generate_episode,
                              oracle_astar, run_episode)
from macronav.gridmap import FREE, OCCUPIED, UNKNOWN, BeliefMap, OccupancyGrid, Pose
from macronav.navenv import SUCCESS, TIMEOUT, NavCfg, NavEnv, NavNode, Observation


def record(outcome="SUCCESS", p=10.0, lstar=10.0, level="easy", eid=0):
    return EpisodeRecord(episode_id=eid, level=level, outcome=outcome,
                         steps=5, p_m=p, lstar_m=lstar, reward_sum=0.0,
                         wall_ms=1.0)


# ---------------------------------------------------------------------------
# metrics


def test_sr_spl_all_failures():
    recs = [record("TIMEOUT"), record("STUCK")]
    m = compute_sr_spl(recs)
    assert m == {"SR": 0.0, "SPL": 0.0}


def test_sr_spl_success_with_double_path_contributes_half():
    recs = [record("SUCCESS", p=20.0, lstar=10.0)]
    m = compute_sr_spl(recs)
    assert m["SR"] == 100.0
    assert m["SPL"] == 50.0


def test_sr_spl_optimal_success_contributes_one():
    recs = [record("SUCCESS", p=10.0, lstar=10.0),
            record("TIMEOUT", p=3.0, lstar=10.0)]
    m = compute_sr_spl(recs)
    assert m["SR"] == 50.0
    assert m["SPL"] == 50.0


def test_sr_spl_empty_rejected():
    with pytest.raises(ValueError):
        compute_sr_spl([])


def test_spl_shorter_than_lstar_clamps_to_one():
    # p slightly below lstar (float jitter) must not produce SPL terms > 1
    recs = [record("SUCCESS", p=9.9999, lstar=10.0)]
    assert compute_sr_spl(recs)["SPL"] == 100.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["SUCCESS", "TIMEOUT", "STUCK"]),
                          st.floats(0.1, 100.0), st.floats(0.1, 100.0)),
                min_size=1, max_size=40))
def test_spl_never_exceeds_sr(rows):
    recs = [record(o, p, l) for o, p, l in rows]
    m = compute_sr_spl(recs)
    assert m["SPL"] <= m["SR"] + 1e-9


# ---------------------------------------------------------------------------
# oracle shortest path


def corridor_grid(length=12, res=0.1):
    cells = np.full((5, length), OCCUPIED, np.uint8)
    cells[2, 1:length - 1] = FREE
    return OccupancyGrid(cells, res)


def test_oracle_astar_corridor():
    grid = corridor_grid()
    start = Pose(*grid.center_of(2, 3))
    goal = Pose(*grid.center_of(2, 7))
    assert oracle_astar(grid, start, goal) == 4 * 0.1


def test_oracle_astar_matches_geodesic_field():
    for seed in range(5):
        grid = gridmap.generate_map(gridmap.MapSpec(size=64, style="maze",
                                                    density=0.2, seed=seed))
        free = np.argwhere(grid.cells == FREE)
        rng = np.random.default_rng(seed)
        a = tuple(free[rng.integers(len(free))])
        field = gridmap.geodesic_field(grid, a)
        reach = np.argwhere(np.isfinite(field.meters) & (field.meters > 0))
        b = tuple(reach[rng.integers(len(reach))])
        got = oracle_astar(grid, Pose(*grid.center_of(*b)),
                           Pose(*grid.center_of(*a)))
        assert got == field.at(*b)


def test_oracle_astar_unreachable_raises():
    cells = np.full((7, 7), OCCUPIED, np.uint8)
    cells[2, 2] = FREE
    cells[4, 4] = FREE
    grid = OccupancyGrid(cells, 0.1)
    with pytest.raises(SetupError):
        oracle_astar(grid, Pose(*grid.center_of(2, 2)),
                     Pose(*grid.center_of(4, 4)))


# ---------------------------------------------------------------------------
# baseline actor


def known_free_belief(size=24, res=0.1):
    cells = np.full((size, size), FREE, np.uint8)
    cells[0, :] = cells[-1, :] = OCCUPIED
    cells[:, 0] = cells[:, -1] = OCCUPIED
    return BeliefMap(cells, res)


def make_node(belief, r, c, goal):
    pos = Pose(*belief.center_of(r, c))
    d = pos.dist_to(goal)
    dirg = (0.0, 0.0) if d < 1e-9 else ((goal.x - pos.x) / d,
                                        (goal.y - pos.y) / d)
    return NavNode(pos, dirg, 0, 0, (0.0, 0.0))


def obs_with_nodes(belief, cells, goal, pose):
    nodes = [make_node(belief, r, c, goal) for r, c in cells]
    return Observation(context=np.zeros((8, 8), np.float32), nodes=nodes,
                       edges=[], goal_in_nodes=False, pose=pose, goal=goal,
                       belief=belief)


def test_baseline_explored_map_picks_node_nearest_goal():
    belief = known_free_belief()
    goal = Pose(*belief.center_of(12, 20))
    obs = obs_with_nodes(belief, [(12, 4), (12, 10), (12, 16), (4, 12)],
                         goal, Pose(*belief.center_of(12, 2)))
    assert BaselineNearestFrontier().act(obs) == 2


def test_baseline_prefers_frontier_adjacent_node():
    belief = known_free_belief()
    # carve an unknown pocket so its free neighbors become frontier cells
    belief.cells[10:14, 2:5] = UNKNOWN
    goal = Pose(*belief.center_of(12, 8))
    obs = obs_with_nodes(belief, [(4, 18), (18, 18), (4, 8), (12, 6)],
                         goal, Pose(*belief.center_of(12, 12)))
    assert BaselineNearestFrontier().act(obs) == 3


def test_baseline_euclidean_fallback_when_goal_unknown():
    belief = known_free_belief()
    belief.cells[10:14, 18:22] = UNKNOWN
    goal = Pose(*belief.center_of(12, 20))  # inside the unknown pocket
    obs = obs_with_nodes(belief, [(12, 4), (12, 15)], goal,
                         Pose(*belief.center_of(12, 2)))
    assert BaselineNearestFrontier().act(obs) == 1


def test_baseline_deterministic():
    belief = known_free_belief()
    goal = Pose(*belief.center_of(5, 5))
    obs = obs_with_nodes(belief, [(4, 18), (18, 4)], goal,
                         Pose(*belief.center_of(12, 12)))
    actor = BaselineNearestFrontier()
    assert actor.act(obs) == actor.act(obs)


# ---------------------------------------------------------------------------
# episode generation and running


def test_generate_episode_respects_lstar_band():
    spec = LEVELS["easy"]
    for eid in range(6):
        grid, start, goal, lstar, (seed, style) = generate_episode(spec, eid, 7)
        lo, hi = spec.lstar_range
        assert lo <= lstar <= hi
        assert grid.cells.shape == (spec.size_cells, spec.size_cells)
        assert style in gridmap.MAP_STYLES
        assert oracle_astar(grid, start, goal) == lstar


def test_generate_episode_deterministic():
    spec = LEVELS["easy"]
    a = generate_episode(spec, 3, 42)
    b = generate_episode(spec, 3, 42)
    assert np.array_equal(a[0].cells, b[0].cells)
    assert a[1] == b[1] and a[2] == b[2] and a[3] == b[3]


def test_oracle_run_is_optimal():
    recs = evaluate({"kind": "oracle"}, "easy", 4, seed=5)
    for r in recs:
        assert r.outcome == SUCCESS
        assert r.p_m == r.lstar_m
    m = compute_sr_spl(recs)
    assert m["SR"] == 100.0 and m["SPL"] == 100.0


def test_record_reward_sum_matches_log():
    recs = evaluate({"kind": "baseline"}, "easy", 3, seed=9)
    for r in recs:
        assert r.reward_sum == sum(rec["reward"] for rec in r.log[1:])
        assert len(r.log) == r.steps + 1


class FarthestFromGoalActor:
    name = "adversary"

    def reset(self):
        pass

    def act(self, obs):
        return int(np.argmax([obs.goal.dist_to(n.pos) for n in obs.nodes]))


def test_adversarial_actor_times_out():
    spec = LEVELS["easy"]
    grid, start, goal, _, key = generate_episode(spec, 0, 13)
    env = NavEnv(grid, NavCfg(max_steps=12), seed=0)
    rec = run_episode(env, FarthestFromGoalActor(), start, goal, 0, "easy", key)
    assert rec.outcome == TIMEOUT
    assert rec.steps == 13


def test_policy_actor_runs_episodes():
    pcfg = policy.PolicyCfg(d=32, layers=1, heads=4, lstm_dim=32, n_nodes=8)
    ecfg = EncoderCfg(d=16, layers=1, heads=2, patch=8, map_hw=32,
                      dec_d=16, dec_layers=1, dec_heads=2)
    actor = PolicyActor(policy.Agent(pcfg, ecfg, seed=0))
    spec = LEVELS["easy"]
    grid, start, goal, _, key = generate_episode(spec, 1, 21)
    env = NavEnv(grid, NavCfg(n_nodes=8, ctx_hw=32, max_steps=15), seed=1)
    rec = run_episode(env, actor, start, goal, 1, "easy", key)
    assert rec.outcome in (SUCCESS, TIMEOUT, "STUCK")
    assert rec.steps >= 1


def test_evaluate_rejects_unknown_level():
    with pytest.raises(ValueError):
        evaluate({"kind": "oracle"}, "nightmare", 1, seed=0)


def strip_wall_ms(csv_text: str) -> list[str]:
    return [",".join(line.split(",")[:-1]) for line in csv_text.splitlines()]


def test_evaluate_deterministic_across_runs(tmp_path):
    a = evaluate({"kind": "baseline"}, "easy", 3, seed=31)
    b = evaluate({"kind": "baseline"}, "easy", 3, seed=31)
    emit_report(a, tmp_path / "a")
    emit_report(b, tmp_path / "b")
    ca = strip_wall_ms((tmp_path / "a" / "episodes.csv").read_text())
    cb = strip_wall_ms((tmp_path / "b" / "episodes.csv").read_text())
    assert ca == cb


def test_evaluate_parallel_matches_serial():
    serial = evaluate({"kind": "oracle"}, "easy", 4, seed=17, workers=1)
    parallel = evaluate({"kind": "oracle"}, "easy", 4, seed=17, workers=2)
    for s, p in zip(serial, parallel):
        assert (s.outcome, s.steps, s.p_m, s.lstar_m) == \
            (p.outcome, p.steps, p.p_m, p.lstar_m)


# ---------------------------------------------------------------------------
# reporting


def read_pgm_dims(path) -> tuple[int, int]:
    with open(path, "rb") as f:
        assert f.readline().strip() == b"P5"
        w, h = f.readline().split()
        return int(h), int(w)


def test_emit_report_files(tmp_path):
    recs = evaluate({"kind": "oracle"}, "easy", 4, seed=23)
    out = tmp_path / "report"
    overall = emit_report(recs, out)
    csv_lines = (out / "episodes.csv").read_text().splitlines()
    assert len(csv_lines) == len(recs) + 1
    assert csv_lines[0] == evalkit.CSV_HEADER

    # summary SR must match recomputation from the CSV outcome column
    outcomes = [line.split(",")[2] for line in csv_lines[1:]]
    sr = 100.0 * sum(o == SUCCESS for o in outcomes) / len(outcomes)
    assert f"SR={sr:.2f}" in (out / "summary.txt").read_text()
    assert overall["SR"] == sr

    size = LEVELS["easy"].size_cells
    overlays = sorted((out / "overlays").iterdir())
    assert overlays
    for p in overlays:
        assert read_pgm_dims(p) == (size, size)
