"""Decision-level navigation environment over an occupancy grid.

Each decision selects one candidate waypoint from a local topological graph.
The agent then traverses the belief-space shortest path to it cell by cell,
fusing a sensor scan at every cell, and receives a reward combining a goal
bonus, a per-decision step cost, and geodesic progress measured on the
ground-truth map.

Episodes end in SUCCESS (within 0.2 m of the goal), TIMEOUT (the 129th
attempted decision), or STUCK (no valid waypoint candidates remain).
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from . import gridmap
from .errors import SetupError
from .gridmap import (FREE, BeliefMap, DistanceField, OccupancyGrid, Pose,
                      SensorCfg)

SUCCESS = "SUCCESS"
TIMEOUT = "TIMEOUT"
RUNNING = "RUNNING"
STUCK = "STUCK"

STEP_PENALTY = -1.0

_SQRT2 = math.sqrt(2.0)


@dataclasses.dataclass(frozen=True)
class NavCfg:
    """Decision-level environment constants."""

    n_nodes: int = 20          # candidate waypoints per decision
    knn: int = 10              # graph degree
    r_local: float = 3.0       # waypoint sampling radius, meters
    r_goal: float = 20.0       # terminal goal bonus
    lam_step: float = 1.0      # weight of the per-decision cost
    lam_progress: float = 2.0  # weight of geodesic progress
    success_radius: float = 0.2
    max_steps: int = 128
    ctx_hw: int = 128
    node_sep: float = 0.3
    sensor: SensorCfg = SensorCfg()


@dataclasses.dataclass(frozen=True)
class NavNode:
    """One candidate waypoint with its policy-facing features."""

    pos: Pose
    dir_goal: tuple[float, float]
    utility: int
    visited: int
    rel_pos: tuple[float, float]

    def feature_vector(self) -> np.ndarray:
        return np.array([self.dir_goal[0], self.dir_goal[1],
                         float(self.utility), float(self.visited),
                         self.rel_pos[0], self.rel_pos[1]], dtype=np.float32)


N_NODE_FEATURES = 6


@dataclasses.dataclass
class Observation:
    context: np.ndarray          # float32 crop centered on the agent
    nodes: list[NavNode]
    edges: list[tuple[int, int]]
    goal_in_nodes: bool
    pose: Pose
    goal: Pose
    belief: BeliefMap            # shared reference, do not mutate

    def node_features(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, N_NODE_FEATURES), dtype=np.float32)
        return np.stack([n.feature_vector() for n in self.nodes])


@dataclasses.dataclass
class StepResult:
    obs: Observation
    reward: float
    done: bool
    outcome: str
    path_len_delta: float


def reward_of(cfg: NavCfg, d_prev: float, d_now: float, success: bool) -> float:
    """Terminal bonus + step cost + weighted geodesic progress."""
    r = cfg.r_goal if success else 0.0
    return r + cfg.lam_step * STEP_PENALTY + cfg.lam_progress * (d_prev - d_now)


def build_graph(positions: list[Pose], k: int) -> list[tuple[int, int]]:
    """Symmetrized kNN edges; distance ties broken by lower node index."""
    n = len(positions)
    if n <= 1:
        return []
    xs = np.array([p.x for p in positions])
    ys = np.array([p.y for p in positions])
    d = np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :])
    edges = set()
    for i in range(n):
        order = [j for j in np.argsort(d[i], kind="stable") if j != i]
        for j in order[:min(k, n - 1)]:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


class NavEnv:
    """One navigation episode state machine over a fixed ground-truth map."""

    def __init__(self, grid: OccupancyGrid, cfg: NavCfg = NavCfg(),
                 seed: int = 0):
        self.grid = grid
        self.cfg = cfg
        self.seed = seed
        self._rng: np.random.Generator | None = None
        self.belief: BeliefMap | None = None
        self.done = True
        self.outcome = RUNNING
        self._reach_cache = None

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, start: Pose, goal: Pose) -> Observation:
        grid = self.grid
        sr, sc = start.cell(grid.resolution)
        gr, gc = goal.cell(grid.resolution)
        if not grid.in_bounds(sr, sc) or grid.cells[sr, sc] != FREE:
            raise SetupError(f"start cell ({sr}, {sc}) is not FREE")
        if not grid.in_bounds(gr, gc) or grid.cells[gr, gc] != FREE:
            raise SetupError(f"goal cell ({gr}, {gc}) is not FREE")
        self.goal_field: DistanceField = gridmap.geodesic_field(grid, (gr, gc))
        if not math.isfinite(self.goal_field.at(sr, sc)):
            raise SetupError(f"goal {goal} unreachable from start {start}")

        self._rng = np.random.default_rng(self.seed)
        self._reach_cache = None
        self.start = start
        self.goal = goal
        self.pose = start
        self.belief = BeliefMap.unknown_like(grid)
        self.visited: set[tuple[int, int]] = {(sr, sc)}
        self.trail: list[tuple[int, int]] = [(sr, sc)]
        self.steps = 0
        self.done = False
        self.outcome = RUNNING
        self._n_straight = 0
        self._n_diagonal = 0
        self._extra_m = 0.0
        gridmap.fuse_scan_(self.belief,
                           gridmap.raycast_scan(grid, start, self.cfg.sensor))
        self.log: list[dict] = [{
            "step": 0,
            "pose": [start.x, start.y],
            "action_node": None,
            "reward": 0.0,
            "d_goal": self.goal_field.at_pose(start),
            "outcome": RUNNING,
        }]
        obs = self._observe()
        if not obs.nodes:
            self.done = True
            self.outcome = STUCK
            self.log[-1]["outcome"] = STUCK
        return obs

    @property
    def path_length_m(self) -> float:
        return ((self._n_straight + self._n_diagonal * _SQRT2)
                * self.grid.resolution + self._extra_m)

    def step(self, action: int) -> StepResult:
        if self.done:
            raise RuntimeError("episode is finished; call reset")
        obs = self._last_obs
        if not 0 <= action < len(obs.nodes):
            raise ValueError(f"action {action} out of range for "
                             f"{len(obs.nodes)} nodes")
        self.steps += 1
        if self.steps > self.cfg.max_steps:
            # The attempt itself exceeds the budget: no traversal happens.
            self.done = True
            self.outcome = TIMEOUT
            d = self.goal_field.at_pose(self.pose)
            reward = reward_of(self.cfg, d, d, success=False)
            self._append_log(action, reward, d, TIMEOUT)
            return StepResult(obs, reward, True, TIMEOUT, 0.0)

        d_prev = self.goal_field.at_pose(self.pose)
        target = obs.nodes[action]
        delta = self._traverse(target.pos)
        d_now = self.goal_field.at_pose(self.pose)
        success = self.pose.dist_to(self.goal) <= self.cfg.success_radius
        reward = reward_of(self.cfg, d_prev, d_now, success)

        if success:
            self.done = True
            self.outcome = SUCCESS
            self._append_log(action, reward, d_now, SUCCESS)
            return StepResult(obs, reward, True, SUCCESS, delta)

        new_obs = self._observe()
        if not new_obs.nodes:
            self.done = True
            self.outcome = STUCK
            self._append_log(action, reward, d_now, STUCK)
            return StepResult(new_obs, reward, True, STUCK, delta)
        self._append_log(action, reward, d_now, RUNNING)
        return StepResult(new_obs, reward, False, RUNNING, delta)

    def _append_log(self, action: int, reward: float, d_goal: float,
                    outcome: str) -> None:
        self.log.append({
            "step": self.steps,
            "pose": [self.pose.x, self.pose.y],
            "action_node": int(action),
            "reward": reward,
            "d_goal": d_goal,
            "outcome": outcome,
        })

    def write_log(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.log:
                f.write(json.dumps(rec) + "\n")

    # -- traversal -----------------------------------------------------------

    def _traverse(self, target: Pose) -> float:
        """Walk the belief-space path to ``target``, scanning at every cell."""
        res = self.grid.resolution
        start_cell = self.pose.cell(res)
        goal_cell = target.cell(res)
        path = self._belief_path(start_cell, goal_cell)
        self._reach_cache = None  # scans below mutate the belief
        before = self.path_length_m
        for cell in path[1:]:
            pr, pc = cell
            cr, cc = self.pose.cell(res)
            if abs(pr - cr) + abs(pc - cc) == 1:
                self._n_straight += 1
            else:
                self._n_diagonal += 1
            x, y = self.grid.center_of(pr, pc)
            self.pose = Pose(x, y)
            self.visited.add((pr, pc))
            self.trail.append((pr, pc))
            gridmap.fuse_scan_(self.belief,
                               gridmap.raycast_scan(self.grid, self.pose,
                                                    self.cfg.sensor))
        if (target.x, target.y) != (self.pose.x, self.pose.y):
            self._extra_m += self.pose.dist_to(target)
            self.pose = target
            self.visited.add(self.pose.cell(res))
        return self.path_length_m - before

    def _window(self, center: tuple[int, int]) -> tuple[slice, slice]:
        radius = int(2 * self.cfg.r_local / self.grid.resolution) + 2
        r, c = center
        return (slice(max(0, r - radius), min(self.grid.height, r + radius + 1)),
                slice(max(0, c - radius), min(self.grid.width, c + radius + 1)))

    def _local_reach(self, src: tuple[int, int]):
        """Belief-space Dijkstra on a window around ``src``.

        Returns (meters array, predecessor array, window slices).  Paths are
        confined to the window, which spans twice the sampling radius.  The
        result is cached until the belief changes; node sampling and the
        following traversal run from the same pose, so they share one solve.
        """
        if self._reach_cache is not None and self._reach_cache[0] == src:
            return self._reach_cache[1]
        rows, cols = self._window(src)
        sub = self.belief.cells[rows, cols]
        walkable = sub == FREE
        h, w = walkable.shape
        src_id = (src[0] - rows.start) * w + (src[1] - cols.start)
        graph = gridmap._grid_graph(walkable)
        cost, pred = _csgraph_dijkstra(graph, directed=False, indices=src_id,
                                       return_predecessors=True)
        cost = cost.reshape(h, w)
        cost[~walkable] = np.inf
        s, d = gridmap._decode_counts(cost)
        res = self.grid.resolution
        meters = np.where(np.isfinite(cost),
                          (s.astype(np.float64) + d * _SQRT2) * res, np.inf)
        out = (meters, pred, (rows, cols))
        self._reach_cache = (src, out)
        return out

    def _belief_path(self, src: tuple[int, int],
                     dst: tuple[int, int]) -> list[tuple[int, int]]:
        meters, pred, (rows, cols) = self._local_reach(src)
        w = cols.stop - cols.start
        dr, dc = dst[0] - rows.start, dst[1] - cols.start
        if not (0 <= dr < meters.shape[0] and 0 <= dc < meters.shape[1]) \
                or not math.isfinite(meters[dr, dc]):
            raise ValueError(f"no belief-space path from {src} to {dst}")
        chain = []
        node = dr * w + dc
        while node >= 0:
            chain.append((node // w + rows.start, node % w + cols.start))
            node = pred[node]
        chain.reverse()
        return chain

    # -- observation ---------------------------------------------------------

    def _observe(self) -> Observation:
        nodes = self._sample_nodes()
        positions = [n.pos for n in nodes]
        obs = Observation(
            context=gridmap.crop_context(self.belief, self.pose,
                                         self.cfg.ctx_hw, self.cfg.ctx_hw),
            nodes=nodes,
            edges=build_graph(positions, self.cfg.knn),
            goal_in_nodes=any(n.dir_goal == (0.0, 0.0) for n in nodes),
            pose=self.pose,
            goal=self.goal,
            belief=self.belief,
        )
        self._last_obs = obs
        return obs

    def _sample_nodes(self) -> list[NavNode]:
        cfg = self.cfg
        res = self.grid.resolution
        agent_cell = self.pose.cell(res)
        meters, _, (rows, cols) = self._local_reach(agent_cell)
        sub_r, sub_c = np.nonzero(np.isfinite(meters))
        cell_r = sub_r + rows.start
        cell_c = sub_c + cols.start
        cx = (cell_c + 0.5) * res
        cy = (cell_r + 0.5) * res
        within = np.hypot(cx - self.pose.x, cy - self.pose.y) <= cfg.r_local
        not_agent = ~((cell_r == agent_cell[0]) & (cell_c == agent_cell[1]))
        keep = within & not_agent
        cand = np.stack([cell_r[keep], cell_c[keep]], axis=1)

        frontiers = gridmap.detect_frontiers(self.belief)
        goal_cell = self.goal.cell(res)
        chosen: list[Pose] = []
        goal_included = False
        goal_row = np.nonzero((cand[:, 0] == goal_cell[0])
                              & (cand[:, 1] == goal_cell[1]))[0]
        if goal_row.size:
            chosen.append(self.goal)
            goal_included = True
            cand = np.delete(cand, goal_row[0], axis=0)

        def far_enough(p: Pose) -> bool:
            return all(p.dist_to(q) >= cfg.node_sep for q in chosen)

        order = self._rng.permutation(len(cand))
        skipped = []
        for i in order:
            if len(chosen) >= cfg.n_nodes:
                break
            x, y = self.grid.center_of(int(cand[i, 0]), int(cand[i, 1]))
            p = Pose(x, y)
            if far_enough(p):
                chosen.append(p)
            else:
                skipped.append(p)
        for p in skipped:  # separation is best-effort only
            if len(chosen) >= cfg.n_nodes:
                break
            chosen.append(p)

        if not chosen:
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    r, c = agent_cell[0] + dr, agent_cell[1] + dc
                    if (self.grid.in_bounds(r, c)
                            and self.belief.cells[r, c] == FREE):
                        x, y = self.grid.center_of(r, c)
                        chosen.append(Pose(x, y))
        return [self._node_of(p, frontiers,
                              is_goal=(goal_included and j == 0))
                for j, p in enumerate(chosen)]

    def _node_of(self, pos: Pose, frontiers: np.ndarray,
                 is_goal: bool) -> NavNode:
        cfg = self.cfg
        dx, dy = self.goal.x - pos.x, self.goal.y - pos.y
        norm = math.hypot(dx, dy)
        if is_goal or norm < 1e-12:
            dir_goal = (0.0, 0.0)
        else:
            dir_goal = (dx / norm, dy / norm)
        cell = pos.cell(self.grid.resolution)
        if frontiers.size:
            vis = gridmap.visible_cells_from(self.belief, cell, frontiers,
                                             cfg.sensor.range_m)
            utility = int(vis.sum())
        else:
            utility = 0
        visited = 1 if cell in self.visited else 0
        rel = ((pos.x - self.pose.x) / cfg.r_local,
               (pos.y - self.pose.y) / cfg.r_local)
        return NavNode(pos, dir_goal, utility, visited, rel)

    # -- privileged shortest-path rollout -------------------------------------

    def ground_truth_path(self) -> list[tuple[int, int]]:
        """Cells of a shortest ground-truth path from the current pose to
        the goal (inclusive)."""
        res = self.grid.resolution
        src = self.pose.cell(res)
        dst = self.goal.cell(res)
        walkable = self.grid.cells == FREE
        h, w = walkable.shape
        graph = gridmap._grid_graph(walkable)
        _, pred = _csgraph_dijkstra(graph, directed=False,
                                    indices=dst[0] * w + dst[1],
                                    return_predecessors=True)
        chain = []
        node = src[0] * w + src[1]
        while node >= 0:
            chain.append((node // w, node % w))
            if (node // w, node % w) == dst:
                break
            node = pred[node]
        if chain[-1] != dst:
            raise SetupError("goal unreachable on the ground-truth map")
        return chain

    def follow_ground_truth(self, cells_per_decision: int = 30) -> None:
        """Privileged rollout along the exact shortest path (oracle actor).

        The path is consumed in chunks so the decision counter reflects a
        waypoint-sized stride; scans are skipped (metrics do not need them).
        """
        if self.done:
            raise RuntimeError("episode is finished; call reset")
        path = self.ground_truth_path()
        res = self.grid.resolution
        i = 1
        while i < len(path):
            chunk = path[i:i + cells_per_decision]
            self.steps += 1
            d_prev = self.goal_field.at_pose(self.pose)
            for cell in chunk:
                cr, cc = self.pose.cell(res)
                if abs(cell[0] - cr) + abs(cell[1] - cc) == 1:
                    self._n_straight += 1
                else:
                    self._n_diagonal += 1
                x, y = self.grid.center_of(*cell)
                self.pose = Pose(x, y)
                self.visited.add(cell)
                self.trail.append(cell)
            i += len(chunk)
            at_end = i >= len(path)
            if at_end and (self.goal.x, self.goal.y) != (self.pose.x, self.pose.y):
                self._extra_m += self.pose.dist_to(self.goal)
                self.pose = self.goal
            d_now = self.goal_field.at_pose(self.pose)
            success = at_end and self.pose.dist_to(self.goal) <= self.cfg.success_radius
            reward = reward_of(self.cfg, d_prev, d_now, success)
            outcome = SUCCESS if success else RUNNING
            self._append_log(-1, reward, d_now, outcome)
            if success:
                self.done = True
                self.outcome = SUCCESS
                return
        # Degenerate: the path had no cells to consume (start == goal cell).
        self.done = True
        self.outcome = SUCCESS if self.pose.dist_to(self.goal) <= self.cfg.success_radius else STUCK
