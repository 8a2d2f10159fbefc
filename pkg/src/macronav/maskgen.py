"""Patch mask generators for self-supervised pretraining.

Masks operate on the patch grid of a context map: an ``H x W`` map cut into
``P x P`` patches gives a ``rows x cols`` grid (``rows = H // P``), indexed
row-major.  Three generators are provided:

* stochastic path masking (``spm``): a persistence-controlled random walk
  over the patch grid, producing a connected, path-shaped masked region;
* field-of-view masking (``fov``): a visible disc of patches around a random
  center with a masked ring around it, everything further out excluded;
* random masking (``mae``): a uniform sample of patches without replacement.

Each generator returns a :class:`MaskSpec` describing which patches are
masked (and, for ``fov``, which ones form the visible core).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigError
from . import gridmap
from .gridmap import BeliefMap, OccupancyGrid, Pose, SensorCfg

TASKS = ("spm", "fov", "mae")

# Eight-direction steps on the patch grid, (drow, dcol).
_DIRS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    dtype=np.int64,
)

# Default parameter ranges used when sampling mask parameters per training
# item.  Values are (low, high) for uniform draws.
SPM_RHO_RANGE = (0.2, 0.6)
SPM_PERSIST_RANGE = (0.5, 0.95)
FOV_RHO_RANGE = (0.05, 0.2)
FOV_EXPAND_RANGE = (0.05, 0.15)
MAE_RATIO = 0.75


@dataclasses.dataclass(frozen=True)
class MaskSpec:
    """A concrete mask over a patch grid.

    ``masked`` holds sorted patch indices whose content is hidden from the
    encoder and must be reconstructed.  For the ``fov`` task ``core`` holds
    the visible disc; patches in neither set are excluded from the encoder
    input entirely.  ``params`` records the sampled generator parameters.
    """

    task: str
    grid: tuple[int, int]
    masked: np.ndarray
    core: np.ndarray | None = None
    params: dict | None = None

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def masked_bool(self) -> np.ndarray:
        """Boolean mask of shape (n_patches,), True where masked."""
        out = np.zeros(self.n_patches, dtype=bool)
        out[self.masked] = True
        return out


def spm_mask(grid: tuple[int, int], rho: float, persistence: float,
             rng: np.random.Generator) -> MaskSpec:
    """Mask patches along a persistence-controlled random walk.

    The walk starts at a uniform patch (the start counts as step 1) and runs
    for ``T = floor(rho * N)`` marking steps.  At each subsequent step the
    previous direction is kept with probability ``persistence``, otherwise a
    new direction is drawn uniformly from the 8-neighborhood; moves that
    would leave the grid are re-drawn uniformly.  Revisited patches count as
    steps, so the masked set has at most ``T`` members and is 8-connected by
    construction.
    """
    rows, cols = grid
    if rows <= 0 or cols <= 0:
        raise ValueError(f"patch grid must be positive, got {grid}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if not 0.0 <= persistence <= 1.0:
        raise ValueError(f"persistence must be in [0, 1], got {persistence}")
    n = rows * cols
    steps = int(math.floor(rho * n))
    params = {"rho": rho, "persistence": persistence, "steps": steps}
    if steps == 0:
        return MaskSpec("spm", grid, np.empty(0, dtype=np.int64), params=params)

    r = int(rng.integers(rows))
    c = int(rng.integers(cols))
    visited = {r * cols + c}
    prev_dir = -1
    # Per-step draws are batched up front; only the rare boundary re-draws
    # fall back to scalar calls.
    coins = rng.random(steps - 1)
    fresh = rng.integers(0, 8, size=steps - 1)
    dirs = _DIRS.tolist()
    for i in range(steps - 1):
        if prev_dir >= 0 and coins[i] < persistence:
            d = prev_dir
        else:
            d = int(fresh[i])
        dr, dc = dirs[d]
        nr, nc = r + dr, c + dc
        while not (0 <= nr < rows and 0 <= nc < cols):
            d = int(rng.integers(8))
            dr, dc = dirs[d]
            nr, nc = r + dr, c + dc
        r, c, prev_dir = nr, nc, d
        visited.add(r * cols + c)
    masked = np.array(sorted(visited), dtype=np.int64)
    return MaskSpec("spm", grid, masked, params=params)


def fov_radii(n_patches: int, rho_fov: float, rho_expand: float) -> tuple[float, float]:
    """Radii (in patch units) of the visible disc and the masked ring."""
    r_fov = math.sqrt(rho_fov * n_patches / math.pi)
    r_expand = math.sqrt((rho_fov + rho_expand) * n_patches / math.pi)
    return r_fov, r_expand


def fov_mask(grid: tuple[int, int], rho_fov: float, rho_expand: float,
             rng: np.random.Generator) -> MaskSpec:
    """Mask a ring of patches around a visible disc.

    A center patch is drawn uniformly.  Patches whose center-to-center
    distance is at most ``r_fov`` form the visible core; patches beyond that
    but within ``r_expand`` are masked; everything further out is excluded
    from the encoder input.  Both discs are clipped by the grid boundary, so
    the realized areas can be smaller than the nominal fractions.
    """
    rows, cols = grid
    if rows <= 0 or cols <= 0:
        raise ValueError(f"patch grid must be positive, got {grid}")
    if rho_fov < 0 or rho_expand < 0:
        raise ValueError("area fractions must be non-negative")
    n = rows * cols
    r_fov, r_expand = fov_radii(n, rho_fov, rho_expand)
    cr = int(rng.integers(rows))
    cc = int(rng.integers(cols))
    rr, cc_grid = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dist = np.hypot(rr - cr, cc_grid - cc).ravel()
    core = np.flatnonzero(dist <= r_fov)
    ring = np.flatnonzero((dist > r_fov) & (dist <= r_expand))
    params = {
        "rho_fov": rho_fov,
        "rho_expand": rho_expand,
        "center": (cr, cc),
        "r_fov": r_fov,
        "r_expand": r_expand,
    }
    return MaskSpec("fov", grid, ring.astype(np.int64),
                    core=core.astype(np.int64), params=params)


def mae_mask(grid: tuple[int, int], ratio: float,
             rng: np.random.Generator) -> MaskSpec:
    """Mask ``floor(ratio * N)`` patches drawn uniformly without replacement."""
    rows, cols = grid
    if rows <= 0 or cols <= 0:
        raise ValueError(f"patch grid must be positive, got {grid}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    n = rows * cols
    count = int(math.floor(ratio * n))
    masked = np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)
    return MaskSpec("mae", grid, masked, params={"ratio": ratio, "count": count})


def sample_task(rng: np.random.Generator, tasks: tuple[str, ...] = TASKS) -> str:
    """Draw one pretraining task, each with equal probability."""
    if not tasks:
        raise ConfigError("task set is empty")
    for t in tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r}, expected one of {TASKS}")
    return tasks[int(rng.integers(len(tasks)))]


def sample_mask(task: str, grid: tuple[int, int],
                rng: np.random.Generator) -> MaskSpec:
    """Draw a mask for ``task`` with parameters from the training ranges."""
    if task == "spm":
        rho = rng.uniform(*SPM_RHO_RANGE)
        s = rng.uniform(*SPM_PERSIST_RANGE)
        return spm_mask(grid, rho, s, rng)
    if task == "fov":
        # Re-draw when boundary clipping left the ring empty: such a mask
        # carries no reconstruction target.
        for _ in range(100):
            rho_fov = rng.uniform(*FOV_RHO_RANGE)
            rho_expand = rng.uniform(*FOV_EXPAND_RANGE)
            spec = fov_mask(grid, rho_fov, rho_expand, rng)
            if spec.masked.size:
                return spec
        raise ConfigError(f"could not draw a non-empty fov ring on grid {grid}")
    if task == "mae":
        return mae_mask(grid, MAE_RATIO, rng)
    raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")


def render_mask(spec: MaskSpec, patch: int = 1) -> np.ndarray:
    """Render a mask as a grayscale image for inspection.

    Visible patches are white, masked patches black, the visible core of a
    ``fov`` mask mid-gray, and excluded patches dark gray.  Each patch is
    drawn as a ``patch x patch`` block.
    """
    rows, cols = spec.grid
    img = np.full(rows * cols, 255, dtype=np.uint8)
    if spec.task == "fov":
        img[:] = 64
        img[spec.core] = 128
    img[spec.masked] = 0
    img = img.reshape(rows, cols)
    if patch > 1:
        img = np.repeat(np.repeat(img, patch, axis=0), patch, axis=1)
    return img


# --------------------------------------------------------------------------
# Pretraining batch assembly


@dataclasses.dataclass(frozen=True)
class MapSource:
    """One weighted source of occupancy maps for pretraining.

    ``kind`` is either ``"synthetic"`` (maps generated on the fly from
    ``style``/``size``/``density``) or ``"dir"`` (PGM files under ``path``).
    """

    name: str
    weight: float
    kind: str = "synthetic"
    style: str = "rooms"
    size: int = 128
    density: float = 0.15
    path: str | None = None
    count: int | None = None  # overrides the pool's per_source for this source


def _pool_synthetic(src: MapSource, count: int, seed: int) -> list[OccupancyGrid]:
    maps = []
    for i in range(count):
        spec = gridmap.MapSpec(size=src.size, style=src.style,
                               density=src.density, seed=seed + i)
        maps.append(gridmap.generate_map(spec))
    return maps


def _pool_dir(src: MapSource) -> list[OccupancyGrid]:
    import pathlib

    root = pathlib.Path(src.path or "")
    files = sorted(root.glob("*.pgm"))
    if not files:
        raise ConfigError(f"map source {src.name!r}: no .pgm files in {root}")
    return [gridmap.load_map(str(f)) for f in files]


class MapPool:
    """Materialized maps for a set of weighted sources.

    Synthetic sources are generated up front (``per_source`` maps each) so
    that batch assembly is cheap and the stream of maps is a pure function
    of the seed.
    """

    def __init__(self, sources: list[MapSource], per_source: int = 64,
                 seed: int = 0):
        if not sources:
            raise ConfigError("pretraining needs at least one map source")
        total = sum(s.weight for s in sources)
        if total <= 0:
            raise ConfigError("map source weights must sum to a positive value")
        self.sources = sources
        self.weights = np.array([s.weight / total for s in sources])
        self.pools: list[list[OccupancyGrid]] = []
        for k, src in enumerate(sources):
            if src.kind == "synthetic":
                n = src.count if src.count is not None else per_source
                self.pools.append(_pool_synthetic(src, n, seed + 10_000 * k))
            elif src.kind == "dir":
                self.pools.append(_pool_dir(src))
            else:
                raise ConfigError(f"map source {src.name!r}: unknown kind {src.kind!r}")

    def draw(self, rng: np.random.Generator) -> OccupancyGrid:
        k = int(rng.choice(len(self.pools), p=self.weights))
        pool = self.pools[k]
        return pool[int(rng.integers(len(pool)))]


@dataclasses.dataclass(frozen=True)
class PretrainBatch:
    """One training batch: context maps plus one mask per item.

    All items share a single task tag; only that task's loss is optimized on
    the step that consumes the batch.
    """

    task: str
    maps: np.ndarray  # float32, (B, H, W), values in {0.0, 0.5, 1.0}
    masks: list[MaskSpec]


def _random_free_pose(grid: OccupancyGrid, rng: np.random.Generator) -> Pose:
    free = np.argwhere(grid.cells == gridmap.FREE)
    r, c = free[int(rng.integers(len(free)))]
    x, y = grid.center_of(int(r), int(c))
    return Pose(x, y)


def _partial_belief(grid: OccupancyGrid, center: Pose, n_scans: int,
                    rng: np.random.Generator,
                    sensor: SensorCfg) -> BeliefMap:
    """Belief built from a handful of scans near ``center``.

    Exposes the encoder to unknown (0.5) regions during pretraining, which
    is what it sees at navigation time.  Extra scan poses are drawn from
    free cells within the sensor range of the center.
    """
    belief = BeliefMap.unknown_like(grid)
    scan = gridmap.raycast_scan(grid, center, sensor)
    gridmap.fuse_scan_(belief, scan)
    if n_scans > 1:
        free = np.argwhere(grid.cells == gridmap.FREE)
        centers_x = (free[:, 1] + 0.5) * grid.resolution
        centers_y = (free[:, 0] + 0.5) * grid.resolution
        near = np.flatnonzero(np.hypot(centers_x - center.x, centers_y - center.y)
                              <= sensor.range_m)
        for _ in range(n_scans - 1):
            idx = near[int(rng.integers(len(near)))]
            pose = Pose(float(centers_x[idx]), float(centers_y[idx]))
            gridmap.fuse_scan_(belief, gridmap.raycast_scan(grid, pose, sensor))
    return belief


def build_pretrain_batch(pool: MapPool, batch: int, ctx_hw: int, patch: int,
                         rng: np.random.Generator,
                         tasks: tuple[str, ...] = TASKS,
                         partial_frac: float = 0.5,
                         sensor: SensorCfg | None = None) -> PretrainBatch:
    """Assemble one pretraining batch.

    One task is sampled for the whole batch; masks and map crops are drawn
    independently per item.  With probability ``partial_frac`` an item's
    context is rendered from a partially observed belief (a few simulated
    scans) instead of the fully known map.
    """
    if ctx_hw % patch != 0:
        raise ConfigError(f"context size {ctx_hw} not divisible by patch {patch}")
    if sensor is None:
        sensor = SensorCfg()
    task = sample_task(rng, tasks)
    side = ctx_hw // patch
    grid_shape = (side, side)
    maps = np.empty((batch, ctx_hw, ctx_hw), dtype=np.float32)
    masks = []
    for b in range(batch):
        grid = pool.draw(rng)
        center = _random_free_pose(grid, rng)
        if rng.random() < partial_frac:
            n_scans = int(rng.integers(1, 7))
            belief = _partial_belief(grid, center, n_scans, rng, sensor)
        else:
            belief = BeliefMap(grid.cells.copy(), grid.resolution)
        maps[b] = gridmap.crop_context(belief, center, ctx_hw, ctx_hw)
        masks.append(sample_mask(task, grid_shape, rng))
    return PretrainBatch(task, maps, masks)
