"""Occupancy grids, simulated sensing, belief fusion, frontiers, geodesic fields, map I/O.

Cell coordinates are (row, col) with row 0 at the top; world coordinates are
(x, y) in meters with x along columns and y along rows, so the cell of a pose
is (int(y / res), int(x / res)). Cell centers sit at ((col + 0.5) * res,
(row + 0.5) * res).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

DEFAULT_RESOLUTION = 0.1  # meters per cell

# Geodesic move costs are tracked as integer (straight, diagonal) move counts.
# For Dijkstra we need a single scalar weight; we use the continued-fraction
# convergent 665857/470832 of sqrt(2), which orders every path of realistic
# length exactly as the real costs do and decodes uniquely back to the counts.
_W_STRAIGHT = 470832
_W_DIAGONAL = 665857
_SQRT2 = math.sqrt(2.0)

MAP_STYLES = ("rooms", "maze", "cluttered")


class MapGenerationError(RuntimeError):
    """Raised when a map spec cannot produce a usable grid."""


class MapFormatError(ValueError):
    """Raised on malformed map files."""


@dataclass(frozen=True)
class MapSpec:
    size: int
    style: str = "rooms"
    density: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class SensorCfg:
    range_m: float = 5.0
    n_rays: int = 360


@dataclass
class OccupancyGrid:
    """Ground-truth map: uint8 cells in {FREE, OCCUPIED}, closed boundary ring."""

    cells: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2:
            raise ValueError("cells must be 2-D")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(y / self.resolution), int(x / self.resolution)

    def center_of(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution


@dataclass
class BeliefMap:
    """Agent-known map: uint8 cells in {FREE, OCCUPIED, UNKNOWN}."""

    cells: np.ndarray
    resolution: float = DEFAULT_RESOLUTION

    @classmethod
    def unknown_like(cls, grid: OccupancyGrid) -> "BeliefMap":
        return cls(np.full(grid.cells.shape, UNKNOWN, dtype=np.uint8), grid.resolution)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(y / self.resolution), int(x / self.resolution)

    def center_of(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution

    def copy(self) -> "BeliefMap":
        return BeliefMap(self.cells.copy(), self.resolution)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float

    def cell(self, resolution: float) -> tuple[int, int]:
        return int(self.y / resolution), int(self.x / resolution)

    def dist_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass
class ScanResult:
    """Observed cells from one scan: rows/cols plus the state seen there."""

    rows: np.ndarray
    cols: np.ndarray
    states: np.ndarray

    @classmethod
    def empty(cls) -> "ScanResult":
        z = np.zeros(0, dtype=np.int32)
        return cls(z, z.copy(), np.zeros(0, dtype=np.uint8))

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class DistanceField:
    """Geodesic distance to a goal cell; UNREACHABLE cells hold +inf.

    ``straight`` and ``diagonal`` are exact move counts along a shortest
    8-connected path; ``meters`` is (straight + sqrt(2) * diagonal) * res.
    """

    meters: np.ndarray
    straight: np.ndarray
    diagonal: np.ndarray
    resolution: float
    goal: tuple[int, int]

    UNREACHABLE: float = field(default=math.inf, init=False, repr=False)

    def at(self, row: int, col: int) -> float:
        return float(self.meters[row, col])

    def at_pose(self, pose: Pose) -> float:
        r, c = pose.cell(self.resolution)
        return float(self.meters[r, c])


# ---------------------------------------------------------------------------
# map generation


def _largest_free_component(cells: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected FREE component; the rest become OCCUPIED."""
    from scipy.ndimage import label

    free = cells == FREE
    labels, n = label(free, structure=np.ones((3, 3), dtype=np.int8))
    if n == 0:
        return cells
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = sizes.argmax()
    out = cells.copy()
    out[free & (labels != keep)] = OCCUPIED
    return out


def _gen_rooms(size: int, density: float, rng: np.random.Generator) -> np.ndarray:
    cells = np.full((size, size), FREE, dtype=np.uint8)
    min_room = max(6, size // 8)

    def split(r0, c0, r1, c1, depth):
        h, w = r1 - r0, c1 - c0
        if depth > 6 or (h < 2 * min_room + 1 and w < 2 * min_room + 1):
            return
        if w >= h and w >= 2 * min_room + 1:
            cut = int(rng.integers(c0 + min_room, c1 - min_room))
            cells[r0:r1, cut] = OCCUPIED
            door = int(rng.integers(r0, r1 - 2))
            cells[door:door + 3, cut] = FREE
            split(r0, c0, r1, cut, depth + 1)
            split(r0, cut + 1, r1, c1, depth + 1)
        elif h >= 2 * min_room + 1:
            cut = int(rng.integers(r0 + min_room, r1 - min_room))
            cells[cut, c0:c1] = OCCUPIED
            door = int(rng.integers(c0, c1 - 2))
            cells[cut, door:door + 3] = FREE
            split(r0, c0, cut, c1, depth + 1)
            split(cut + 1, c0, r1, c1, depth + 1)

    split(1, 1, size - 1, size - 1, 0)

    # clutter: random rectangles until the occupied fraction approaches density
    interior = (size - 2) ** 2
    target = density * interior
    guard = 0
    while (cells[1:-1, 1:-1] == OCCUPIED).sum() < target and guard < 4000:
        guard += 1
        h = int(rng.integers(1, max(2, size // 12)))
        w = int(rng.integers(1, max(2, size // 12)))
        r = int(rng.integers(1, size - 1 - h))
        c = int(rng.integers(1, size - 1 - w))
        cells[r:r + h, c:c + w] = OCCUPIED
    return cells


def _gen_maze(size: int, density: float, rng: np.random.Generator) -> np.ndarray:
    # corridor width 2, wall width 1 on a pitch-3 lattice; DFS carve
    pitch, cw = 3, 2
    m = max(2, (size - 2) // pitch)
    cells = np.full((size, size), OCCUPIED, dtype=np.uint8)

    def carve(i, j):
        r, c = 1 + i * pitch, 1 + j * pitch
        cells[r:r + cw, c:c + cw] = FREE

    def carve_between(a, b):
        (i0, j0), (i1, j1) = a, b
        r0, c0 = 1 + i0 * pitch, 1 + j0 * pitch
        r1, c1 = 1 + i1 * pitch, 1 + j1 * pitch
        rlo, rhi = min(r0, r1), max(r0, r1) + cw
        clo, chi = min(c0, c1), max(c0, c1) + cw
        cells[rlo:rhi, clo:chi] = FREE

    visited = np.zeros((m, m), dtype=bool)
    stack = [(0, 0)]
    visited[0, 0] = True
    carve(0, 0)
    while stack:
        i, j = stack[-1]
        nbrs = [(i + di, j + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= i + di < m and 0 <= j + dj < m and not visited[i + di, j + dj]]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        visited[nxt] = True
        carve(*nxt)
        carve_between((i, j), nxt)
        stack.append(nxt)

    # braid: open extra walls between adjacent lattice cells; fewer at high density
    p_open = 0.25 * (1.0 - density)
    for i in range(m):
        for j in range(m):
            for di, dj in ((1, 0), (0, 1)):
                if i + di < m and j + dj < m and rng.random() < p_open:
                    carve_between((i, j), (i + di, j + dj))
    return cells


def _gen_cluttered(size: int, density: float, rng: np.random.Generator) -> np.ndarray:
    cells = np.full((size, size), FREE, dtype=np.uint8)
    interior = (size - 2) ** 2
    target = density * interior
    guard = 0
    while (cells[1:-1, 1:-1] == OCCUPIED).sum() < target and guard < 8000:
        guard += 1
        h = int(rng.integers(1, max(2, size // 8)))
        w = int(rng.integers(1, max(2, size // 8)))
        r = int(rng.integers(1, size - 1 - h))
        c = int(rng.integers(1, size - 1 - w))
        cells[r:r + h, c:c + w] = OCCUPIED
    return cells


def generate_map(spec: MapSpec) -> OccupancyGrid:
    """Generate a closed-world map with a single connected free region.

    Deterministic for a fixed spec. Raises MapGenerationError when the spec
    is degenerate (free fraction below 5%).
    """
    if spec.size < 32:
        raise MapGenerationError(f"map size {spec.size} below minimum 32")
    if not 0.0 <= spec.density <= 1.0:
        raise MapGenerationError(f"density {spec.density} outside [0, 1]")
    if spec.style not in MAP_STYLES:
        raise MapGenerationError(f"unknown style {spec.style!r}")

    rng = np.random.default_rng(spec.seed)
    gen = {"rooms": _gen_rooms, "maze": _gen_maze, "cluttered": _gen_cluttered}[spec.style]
    cells = gen(spec.size, spec.density, rng)
    cells[0, :] = cells[-1, :] = OCCUPIED
    cells[:, 0] = cells[:, -1] = OCCUPIED
    cells = _largest_free_component(cells)

    free_frac = (cells == FREE).mean()
    if free_frac < 0.05:
        raise MapGenerationError(
            f"degenerate spec: free fraction {free_frac:.3f} < 0.05")
    return OccupancyGrid(cells, DEFAULT_RESOLUTION)


# ---------------------------------------------------------------------------
# sensing


def _ray_offsets(range_m: float, n_rays: int, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample-point offsets (meters) along each bearing, step 0.25 cells."""
    step = 0.25 * resolution
    n_steps = max(0, int(math.floor(range_m / step)))
    ks = np.arange(0, n_steps + 1, dtype=np.float64) * step
    ks = ks[ks <= range_m + 1e-12]
    theta = 2.0 * math.pi * np.arange(n_rays, dtype=np.float64) / max(n_rays, 1)
    dx = np.cos(theta)[:, None] * ks[None, :]
    dy = np.sin(theta)[:, None] * ks[None, :]
    return dx, dy


def raycast_scan(grid: OccupancyGrid, pose: Pose, sensor: SensorCfg = SensorCfg()) -> ScanResult:
    """Cast evenly spaced rays; cells before the first hit are FREE, the hit OCCUPIED."""
    if sensor.n_rays <= 0 or sensor.range_m <= 0:
        return ScanResult.empty()
    res = grid.resolution
    dx, dy = _ray_offsets(sensor.range_m, sensor.n_rays, res)
    rows = np.floor((pose.y + dy) / res).astype(np.int64)
    cols = np.floor((pose.x + dx) / res).astype(np.int64)
    rows = np.clip(rows, 0, grid.height - 1)
    cols = np.clip(cols, 0, grid.width - 1)

    occ = grid.cells[rows, cols] == OCCUPIED  # (n_rays, n_steps)
    # index of first occupied sample per ray; rays with no hit keep everything
    any_hit = occ.any(axis=1)
    first_hit = np.where(any_hit, occ.argmax(axis=1), occ.shape[1])

    steps = np.arange(occ.shape[1])[None, :]
    visible = steps <= first_hit[:, None]
    r_v = rows[visible]
    c_v = cols[visible]
    s_v = np.where(occ[visible], OCCUPIED, FREE).astype(np.uint8)

    # dedupe (occupied observation wins over free for the same cell, though a
    # noise-free sensor never actually disagrees with itself)
    key = r_v * grid.width + c_v
    order = np.lexsort((s_v, key))
    key, r_v, c_v, s_v = key[order], r_v[order], c_v[order], s_v[order]
    last = np.ones(len(key), dtype=bool)
    last[:-1] = key[1:] != key[:-1]
    return ScanResult(r_v[last].astype(np.int32), c_v[last].astype(np.int32), s_v[last])


def fuse_scan(belief: BeliefMap, scan: ScanResult) -> BeliefMap:
    """Write observed cells into a copy of the belief. Idempotent; never
    flips FREE/OCCUPIED because the sensor is noise-free."""
    out = belief.copy()
    if len(scan):
        out.cells[scan.rows, scan.cols] = scan.states
    return out


def fuse_scan_(belief: BeliefMap, scan: ScanResult) -> None:
    """In-place fuse for the environment's hot loop."""
    if len(scan):
        belief.cells[scan.rows, scan.cols] = scan.states


def detect_frontiers(belief: BeliefMap) -> np.ndarray:
    """FREE cells with at least one UNKNOWN 8-neighbor, as an (n, 2) array
    of (row, col) in row-major order."""
    c = belief.cells
    unknown = c == UNKNOWN
    pad = np.pad(unknown, 1, constant_values=False)
    near_unknown = np.zeros_like(unknown)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            near_unknown |= pad[1 + dr:1 + dr + c.shape[0], 1 + dc:1 + dc + c.shape[1]]
    rows, cols = np.nonzero((c == FREE) & near_unknown)
    return np.stack([rows, cols], axis=1).astype(np.int32)


# ---------------------------------------------------------------------------
# geodesic distance


def _walkable_mask(grid_or_belief) -> np.ndarray:
    return grid_or_belief.cells == FREE


def _grid_graph(walkable: np.ndarray) -> csr_matrix:
    """8-connected graph over walkable cells with integer move weights.

    Diagonal edges are dropped when either orthogonal neighbor is blocked
    (no corner cutting).
    """
    h, w = walkable.shape
    idx = np.arange(h * w).reshape(h, w)
    us, vs, ws = [], [], []

    def add(mask, src, dst, weight):
        us.append(src[mask])
        vs.append(dst[mask])
        ws.append(np.full(mask.sum(), weight, dtype=np.int64))

    # straight moves
    m = walkable[:, :-1] & walkable[:, 1:]
    add(m, idx[:, :-1], idx[:, 1:], _W_STRAIGHT)
    m = walkable[:-1, :] & walkable[1:, :]
    add(m, idx[:-1, :], idx[1:, :], _W_STRAIGHT)
    # diagonal moves, corner-cut checked
    m = walkable[:-1, :-1] & walkable[1:, 1:] & walkable[:-1, 1:] & walkable[1:, :-1]
    add(m, idx[:-1, :-1], idx[1:, 1:], _W_DIAGONAL)
    m = walkable[:-1, 1:] & walkable[1:, :-1] & walkable[:-1, :-1] & walkable[1:, 1:]
    add(m, idx[:-1, 1:], idx[1:, :-1], _W_DIAGONAL)

    u = np.concatenate(us) if us else np.zeros(0, dtype=np.int64)
    v = np.concatenate(vs) if vs else np.zeros(0, dtype=np.int64)
    wt = np.concatenate(ws) if ws else np.zeros(0, dtype=np.int64)
    data = np.concatenate([wt, wt]).astype(np.float64)
    rowi = np.concatenate([u, v])
    coli = np.concatenate([v, u])
    return csr_matrix((data, (rowi, coli)), shape=(h * w, h * w))


def _decode_counts(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (straight, diagonal) move counts from integer path costs."""
    finite = np.isfinite(cost)
    ci = cost[finite].astype(np.int64)
    # diagonal count from cost mod W_STRAIGHT via the modular inverse of
    # (W_DIAGONAL mod W_STRAIGHT); unique because counts < W_STRAIGHT
    inv = pow(_W_DIAGONAL % _W_STRAIGHT, -1, _W_STRAIGHT)
    diag = (ci % _W_STRAIGHT) * inv % _W_STRAIGHT
    straight = (ci - diag * _W_DIAGONAL) // _W_STRAIGHT
    s = np.full(cost.shape, -1, dtype=np.int64)
    d = np.full(cost.shape, -1, dtype=np.int64)
    s[finite] = straight
    d[finite] = diag
    return s, d


def geodesic_field(grid_or_belief, goal: tuple[int, int]) -> DistanceField:
    """8-connected shortest-path distance to the goal over FREE cells.

    Straight moves cost one resolution, diagonals sqrt(2) resolutions, and
    diagonal moves may not cut corners. UNKNOWN belief cells are not walkable.
    """
    walkable = _walkable_mask(grid_or_belief)
    gr, gc = goal
    h, w = walkable.shape
    if not (0 <= gr < h and 0 <= gc < w) or not walkable[gr, gc]:
        raise ValueError(f"goal cell {goal} is not FREE")

    graph = _grid_graph(walkable)
    cost = _csgraph_dijkstra(graph, directed=False, indices=gr * w + gc)
    cost = cost.reshape(h, w)
    cost[~walkable] = np.inf
    s, d = _decode_counts(cost)
    res = grid_or_belief.resolution
    meters = np.where(
        np.isfinite(cost),
        (s.astype(np.float64) + d.astype(np.float64) * _SQRT2) * res,
        np.inf,
    )
    return DistanceField(meters, s, d, res, (gr, gc))


def geodesic_field_multi(grid_or_belief, sources: np.ndarray) -> np.ndarray:
    """Distance in meters to the nearest of several source cells ((n,2) array).

    Same metric as geodesic_field; returns only the meters array.
    """
    walkable = _walkable_mask(grid_or_belief)
    h, w = walkable.shape
    if len(sources) == 0:
        return np.full((h, w), np.inf)
    ids = sources[:, 0].astype(np.int64) * w + sources[:, 1].astype(np.int64)
    graph = _grid_graph(walkable)
    cost = _csgraph_dijkstra(graph, directed=False, indices=ids, min_only=True)
    cost = cost.reshape(h, w)
    cost[~walkable] = np.inf
    s, d = _decode_counts(cost)
    res = grid_or_belief.resolution
    return np.where(np.isfinite(cost), (s.astype(np.float64) + d * _SQRT2) * res, np.inf)


# ---------------------------------------------------------------------------
# context map


CONTEXT_FREE = 1.0
CONTEXT_OCCUPIED = 0.0
CONTEXT_UNKNOWN = 0.5

_CONTEXT_LUT = np.array([CONTEXT_FREE, CONTEXT_OCCUPIED, CONTEXT_UNKNOWN], dtype=np.float32)


def crop_context(belief: BeliefMap, pose: Pose, ctx_h: int, ctx_w: int) -> np.ndarray:
    """Axis-aligned crop of the belief centered on the agent cell, encoded as
    float32 with FREE=1.0, OCCUPIED=0.0, UNKNOWN=0.5; out-of-grid reads 0.5."""
    ar, ac = pose.cell(belief.resolution)
    out = np.full((ctx_h, ctx_w), CONTEXT_UNKNOWN, dtype=np.float32)
    r0 = ar - ctx_h // 2
    c0 = ac - ctx_w // 2
    src_r0, src_r1 = max(r0, 0), min(r0 + ctx_h, belief.height)
    src_c0, src_c1 = max(c0, 0), min(c0 + ctx_w, belief.width)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0, dst_c0 = src_r0 - r0, src_c0 - c0
        patch = belief.cells[src_r0:src_r1, src_c0:src_c1]
        out[dst_r0:dst_r0 + patch.shape[0], dst_c0:dst_c0 + patch.shape[1]] = _CONTEXT_LUT[patch]
    return out


# ---------------------------------------------------------------------------
# line of sight


def visible_cells_from(belief: BeliefMap, src: tuple[int, int],
                       targets: np.ndarray, range_m: float) -> np.ndarray:
    """Boolean mask over targets: within range of src and connected to it by a
    straight segment passing only through belief-FREE cells.

    Visibility samples each center-to-center segment at t = k/n for
    n = ceil(dist / (0.25 * res)), so the result for one target never depends
    on which other targets are in the batch.
    """
    if len(targets) == 0:
        return np.zeros(0, dtype=bool)
    res = belief.resolution
    sx, sy = belief.center_of(*src)
    tx = (targets[:, 1] + 0.5) * res
    ty = (targets[:, 0] + 0.5) * res
    dx, dy = tx - sx, ty - sy
    dist = np.hypot(dx, dy)
    ok = dist <= range_m + 1e-9

    n = np.maximum(1, np.ceil(dist / (0.25 * res)).astype(np.int64))
    ks = np.arange(int(n.max()) + 1, dtype=np.float64)[None, :]
    t = np.minimum(ks, n[:, None].astype(np.float64)) / n[:, None]
    px = sx + dx[:, None] * t
    py = sy + dy[:, None] * t
    rows = np.clip(np.floor(py / res).astype(np.int64), 0, belief.height - 1)
    cols = np.clip(np.floor(px / res).astype(np.int64), 0, belief.width - 1)
    free = belief.cells[rows, cols] == FREE
    return ok & free.all(axis=1)


# ---------------------------------------------------------------------------
# PGM map I/O

PGM_FREE = 255
PGM_OCCUPIED = 0
PGM_UNKNOWN = 128
FORMAT_VERSION = 1


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta")


def save_pgm(path, img: np.ndarray) -> None:
    """Plain binary PGM (P5, maxval 255) for any uint8 grayscale image."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def save_map(grid: OccupancyGrid, path) -> None:
    """Binary PGM (P5, maxval 255) plus a key=value sidecar with the metadata."""
    path = Path(path)
    lut = np.zeros(256, dtype=np.uint8)
    lut[FREE] = PGM_FREE
    lut[OCCUPIED] = PGM_OCCUPIED
    lut[UNKNOWN] = PGM_UNKNOWN
    save_pgm(path, lut[grid.cells])
    meta = (
        f"resolution_m={grid.resolution}\n"
        f"origin_x={grid.origin_x}\n"
        f"origin_y={grid.origin_y}\n"
        f"format_version={FORMAT_VERSION}\n"
    )
    _meta_path(path).write_text(meta)


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace/comment-delimited header tokens; returns tokens and the
    offset just past the final single whitespace byte."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise MapFormatError("truncated PGM header")
        ch = data[i:i + 1]
        if ch.isspace():
            i += 1
            continue
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise MapFormatError("missing whitespace after PGM header")
    return tokens, i + 1


def load_map(path) -> OccupancyGrid:
    """Load a P5 PGM; pixels >= 160 become FREE, all others OCCUPIED.

    The sidecar metadata file is optional (external maps); defaults are
    resolution 0.1 m/cell and origin (0, 0).
    """
    path = Path(path)
    data = path.read_bytes()
    tokens, offset = _read_pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise MapFormatError(f"bad magic {tokens[0]!r}, expected P5")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise MapFormatError(f"malformed PGM header: {e}") from e
    if maxval != 255:
        raise MapFormatError(f"unsupported maxval {maxval}")
    payload = data[offset:offset + width * height]
    if len(payload) != width * height:
        raise MapFormatError(
            f"payload has {len(payload)} bytes, expected {width * height}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    cells = np.where(img >= 160, FREE, OCCUPIED).astype(np.uint8)
    cells[0, :] = cells[-1, :] = OCCUPIED
    cells[:, 0] = cells[:, -1] = OCCUPIED

    resolution, ox, oy = DEFAULT_RESOLUTION, 0.0, 0.0
    meta = _meta_path(path)
    if meta.exists():
        kv = {}
        for line in meta.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MapFormatError(f"bad metadata line {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        if "format_version" in kv and int(kv["format_version"]) != FORMAT_VERSION:
            raise MapFormatError(f"unsupported format_version {kv['format_version']}")
        resolution = float(kv.get("resolution_m", resolution))
        ox = float(kv.get("origin_x", ox))
        oy = float(kv.get("origin_y", oy))
    return OccupancyGrid(cells, resolution, ox, oy)
