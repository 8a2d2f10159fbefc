"""Episode runner, SR/SPL metrics, baselines, and report emission.

Evaluation draws maps per difficulty level (map size, obstacle density, and a
shortest-path-length band), runs the chosen actor for a fixed episode budget,
and reduces the records to success rate and success-weighted path length.
Reports are a CSV of per-episode records, a plain-text summary, and PGM
overlays with the traversed cells drawn onto the map.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import gridmap, policy
from .errors import SetupError
from .gridmap import FREE, MAP_STYLES, MapSpec, OccupancyGrid, Pose
from .navenv import SUCCESS, NavCfg, NavEnv, Observation


@dataclasses.dataclass(frozen=True)
class DifficultySpec:
    level: str
    map_m: float                       # square map side, meters
    density: float
    lstar_range: tuple[float, float]   # admissible shortest-path band, meters

    @property
    def size_cells(self) -> int:
        return int(round(self.map_m / gridmap.DEFAULT_RESOLUTION))


LEVELS = {
    "easy": DifficultySpec("easy", 12.8, 0.10, (3.0, 8.0)),
    "medium": DifficultySpec("medium", 25.6, 0.20, (8.0, 18.0)),
    "hard": DifficultySpec("hard", 38.4, 0.30, (18.0, 35.0)),
}

EPISODES_PER_LEVEL = 200

CSV_HEADER = ("episode_id,level,outcome,steps,p_m,lstar_m,spl_term,"
              "reward_sum,wall_ms")


@dataclasses.dataclass
class EpisodeRecord:
    episode_id: int
    level: str
    outcome: str
    steps: int
    p_m: float
    lstar_m: float
    reward_sum: float
    wall_ms: float
    log: list = dataclasses.field(default_factory=list)
    trail: list = dataclasses.field(default_factory=list)
    map_seed: int = 0
    map_style: str = ""

    @property
    def spl_term(self) -> float:
        if self.outcome != SUCCESS:
            return 0.0
        return self.lstar_m / max(self.p_m, self.lstar_m)

    def csv_row(self) -> str:
        return (f"{self.episode_id},{self.level},{self.outcome},{self.steps},"
                f"{self.p_m!r},{self.lstar_m!r},{self.spl_term!r},"
                f"{self.reward_sum!r},{self.wall_ms:.1f}")


def compute_sr_spl(records: list[EpisodeRecord]) -> dict[str, float]:
    """SR = 100 * successes / M; SPL = 100 * mean success-weighted ratio."""
    if not records:
        raise ValueError("no episode records")
    m = len(records)
    sr = 100.0 * sum(r.outcome == SUCCESS for r in records) / m
    spl = 100.0 * sum(r.spl_term for r in records) / m
    return {"SR": sr, "SPL": spl}


def oracle_astar(grid: OccupancyGrid, start: Pose, goal: Pose) -> float:
    """Exact shortest-path length on the ground-truth map, in meters."""
    field = gridmap.geodesic_field(grid, goal.cell(grid.resolution))
    val = field.at_pose(start)
    if not np.isfinite(val):
        raise SetupError(f"goal {goal} unreachable from {start}")
    return val


# ---------------------------------------------------------------------------
# actors


class BaselineNearestFrontier:
    """Picks the node minimizing belief-space (frontier distance + goal
    distance); falls back to Euclidean goal distance while the goal cell is
    still unknown.  Stateless: a pure function of the observation."""

    name = "baseline"

    def reset(self) -> None:
        pass

    def act(self, obs: Observation) -> int:
        belief = obs.belief
        res = belief.resolution
        frontiers = gridmap.detect_frontiers(belief)
        d_frontier = gridmap.geodesic_field_multi(belief, frontiers)

        goal_cell = obs.goal.cell(res)
        goal_known = belief.cells[goal_cell] == FREE
        if goal_known:
            d_goal = gridmap.geodesic_field(belief, goal_cell).meters

        best, best_score = 0, np.inf
        for i, node in enumerate(obs.nodes):
            cell = node.pos.cell(res)
            df = d_frontier[cell]
            if not np.isfinite(df):
                df = 0.0 if len(frontiers) == 0 else node.pos.dist_to(obs.goal)
            if goal_known and np.isfinite(d_goal[cell]):
                dg = d_goal[cell]
            else:
                dg = node.pos.dist_to(obs.goal)
            score = df + dg
            if score < best_score:
                best, best_score = i, score
        return best


class PolicyActor:
    """Greedy (argmax) wrapper around a trained agent."""

    name = "policy"

    def __init__(self, agent: policy.Agent):
        self.agent = agent
        self.reset()

    def reset(self) -> None:
        self._lstm = self.agent.initial_lstm()
        self._prev_feats = np.zeros(policy.N_NODE_FEATURES, np.float32)
        self._prev_reward = 0.0

    def act(self, obs: Observation) -> int:
        pobs = policy.PolicyObs.from_observation(
            obs, self.agent.pcfg.n_nodes, self._prev_feats, self._prev_reward)
        batch = policy.collate([pobs], [self._lstm])
        with torch.no_grad():
            probs, _, (h, c) = self.agent.actor_forward(batch)
        action = policy.select_action(probs[0].numpy(), "argmax")
        self._lstm = (h[0].numpy().astype(np.float32),
                      c[0].numpy().astype(np.float32))
        self._prev_feats = pobs.node_feats[action]
        return action

    def observe_reward(self, reward: float) -> None:
        self._prev_reward = reward


class OracleActor:
    """Sentinel for the privileged shortest-path rollout."""

    name = "oracle"

    def reset(self) -> None:
        pass


class RandomActor:
    """Uniform over valid nodes; the untrained-policy floor."""

    name = "random"

    def __init__(self, seed: int = 0):
        self._seed = seed
        self.reset()

    def reset(self) -> None:
        self._rng = np.random.default_rng(self._seed)

    def act(self, obs: Observation) -> int:
        return int(self._rng.integers(len(obs.nodes)))


# ---------------------------------------------------------------------------
# episode generation and running


def generate_episode(spec: DifficultySpec, episode_id: int, seed: int,
                     rng: np.random.Generator | None = None):
    """Deterministic (grid, start, goal, lstar) draw honoring the ℓ* band."""
    rng = rng or np.random.default_rng((seed, episode_id))
    lo, hi = spec.lstar_range
    for attempt in range(40):
        style = MAP_STYLES[int(rng.integers(len(MAP_STYLES)))]
        map_seed = int(rng.integers(2 ** 31))
        grid = gridmap.generate_map(MapSpec(size=spec.size_cells, style=style,
                                            density=spec.density,
                                            seed=map_seed))
        free = np.argwhere(grid.cells == FREE)
        for _ in range(8):
            start_cell = tuple(free[rng.integers(len(free))])
            field = gridmap.geodesic_field(grid, start_cell)
            ok = np.isfinite(field.meters) & (field.meters >= lo) \
                & (field.meters <= hi)
            cands = np.argwhere(ok)
            if len(cands):
                goal_cell = tuple(cands[rng.integers(len(cands))])
                start = Pose(*grid.center_of(*start_cell))
                goal = Pose(*grid.center_of(*goal_cell))
                return grid, start, goal, field.at(*goal_cell), (map_seed, style)
    raise SetupError(f"could not draw an episode for level {spec.level}")


def run_episode(env: NavEnv, actor, start: Pose, goal: Pose,
                episode_id: int = 0, level: str = "",
                map_key: tuple[int, str] = (0, "")) -> EpisodeRecord:
    """Reset, roll the actor until termination, package the record."""
    t0 = time.monotonic()
    lstar = oracle_astar(env.grid, start, goal)
    actor.reset()
    obs = env.reset(start, goal)
    total = 0.0
    if isinstance(actor, OracleActor):
        if not env.done:
            env.follow_ground_truth()
        total = sum(rec["reward"] for rec in env.log[1:])
    else:
        while not env.done:
            action = actor.act(obs)
            sr = env.step(action)
            total += sr.reward
            obs = sr.obs
            if hasattr(actor, "observe_reward"):
                actor.observe_reward(sr.reward)
    return EpisodeRecord(
        episode_id=episode_id,
        level=level,
        outcome=env.outcome,
        steps=env.steps,
        p_m=env.path_length_m,
        lstar_m=lstar,
        reward_sum=total,
        wall_ms=(time.monotonic() - t0) * 1000.0,
        log=list(env.log),
        trail=list(env.trail),
        map_seed=map_key[0],
        map_style=map_key[1],
    )


# Per-process actor cache: policy checkpoints load once per worker instead of
# once per episode.
_ACTOR_CACHE: dict[tuple, object] = {}


def build_actor(actor_spec: dict):
    kind = actor_spec["kind"]
    if kind == "oracle":
        return OracleActor()
    if kind == "baseline":
        return BaselineNearestFrontier()
    if kind == "random":
        return RandomActor(int(actor_spec.get("seed", 0)))
    if kind == "policy":
        key = ("policy", actor_spec["ckpt"])
        if key not in _ACTOR_CACHE:
            agent = policy.Agent(actor_spec["pcfg"], actor_spec["enc_cfg"],
                                 seed=0)
            policy.load_agent(actor_spec["ckpt"], agent)
            _ACTOR_CACHE[key] = agent
        return PolicyActor(_ACTOR_CACHE[key])
    raise ValueError(f"unknown actor kind {kind!r}")


def _episode_task(args) -> EpisodeRecord:
    actor_spec, level, episode_id, seed, nav_kwargs = args
    spec = LEVELS[level]
    grid, start, goal, _, map_key = generate_episode(spec, episode_id, seed)
    env = NavEnv(grid, NavCfg(**nav_kwargs), seed=seed + episode_id)
    actor = build_actor(actor_spec)
    return run_episode(env, actor, start, goal, episode_id, level, map_key)


def evaluate(actor_spec: dict, level: str, episodes: int, seed: int,
             workers: int = 1, nav_kwargs: dict | None = None
             ) -> list[EpisodeRecord]:
    """Run an episode batch for one difficulty level, optionally in parallel."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}, expected one of "
                         f"{sorted(LEVELS)}")
    tasks = [(actor_spec, level, i, seed, nav_kwargs or {})
             for i in range(episodes)]
    if workers <= 1:
        return [_episode_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode_task, tasks))


# ---------------------------------------------------------------------------
# reporting


def _draw_overlay(record: EpisodeRecord, grid: OccupancyGrid) -> np.ndarray:
    img = np.empty(grid.cells.shape, dtype=np.uint8)
    img[grid.cells == FREE] = gridmap.PGM_FREE
    img[grid.cells != FREE] = gridmap.PGM_OCCUPIED
    for r, c in record.trail:
        img[r, c] = 180
    if record.trail:
        img[record.trail[0]] = 60   # start marker
        img[record.trail[-1]] = 110  # end marker
    return img


def emit_report(records: list[EpisodeRecord], out_dir,
                overlays_per_level: int = 5) -> dict[str, float]:
    """Write episodes.csv, summary.txt, and trajectory overlays; returns
    the overall metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = [CSV_HEADER] + [r.csv_row() for r in records]
    (out / "episodes.csv").write_text("\n".join(lines) + "\n")

    levels = sorted({r.level for r in records})
    summary = []
    for level in levels:
        subset = [r for r in records if r.level == level]
        m = compute_sr_spl(subset)
        summary.append(f"{level}: episodes={len(subset)} "
                       f"SR={m['SR']:.2f} SPL={m['SPL']:.2f}")
    overall = compute_sr_spl(records)
    summary.append(f"overall: episodes={len(records)} "
                   f"SR={overall['SR']:.2f} SPL={overall['SPL']:.2f}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")

    overlay_dir = out / "overlays"
    overlay_dir.mkdir(exist_ok=True)
    done: dict[str, int] = {}
    for r in records:
        if done.get(r.level, 0) >= overlays_per_level or not r.trail:
            continue
        spec = LEVELS.get(r.level)
        if spec is None or not r.map_style:
            continue
        grid = gridmap.generate_map(MapSpec(size=spec.size_cells,
                                            style=r.map_style,
                                            density=spec.density,
                                            seed=r.map_seed))
        gridmap.save_pgm(overlay_dir / f"{r.level}_{r.episode_id:04d}.pgm",
                         _draw_overlay(r, grid))
        done[r.level] = done.get(r.level, 0) + 1
    return overall
