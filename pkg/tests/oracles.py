"""Independent brute-force oracles shared by the unit and acceptance suites.

Everything here is deliberately simple and slow; none of it shares code with
the implementations it checks.
"""

import heapq
import math

import numpy as np

from macronav import gridmap as gm

SQRT2 = math.sqrt(2.0)


def dijkstra_counts(walkable: np.ndarray, goal: tuple[int, int]):
    """Plain heap Dijkstra over 8-neighbor moves tracking exact
    (straight, diagonal) move counts. Corner cutting forbidden."""
    h, w = walkable.shape
    INF = math.inf
    best = {goal: (0.0, 0, 0)}
    heap = [(0.0, goal, 0, 0)]
    while heap:
        key, (r, c), s, d = heapq.heappop(heap)
        if best.get((r, c), (INF,))[0] < key:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nr, nc = r + dr, c + dc
                if not (0 <= nr < h and 0 <= nc < w) or not walkable[nr, nc]:
                    continue
                diag = dr != 0 and dc != 0
                if diag and not (walkable[r + dr, c] and walkable[r, c + dc]):
                    continue
                ns, nd = (s, d + 1) if diag else (s + 1, d)
                nkey = ns + nd * SQRT2
                if nkey < best.get((nr, nc), (INF,))[0]:
                    best[(nr, nc)] = (nkey, ns, nd)
                    heapq.heappush(heap, (nkey, (nr, nc), ns, nd))
    return best


def dijkstra_field_meters(grid_or_belief, goal: tuple[int, int]) -> np.ndarray:
    """Distance field in meters via the brute-force Dijkstra above, using the
    same canonical (s + d*sqrt(2)) * res expression as the implementation."""
    walkable = grid_or_belief.cells == gm.FREE
    res = grid_or_belief.resolution
    best = dijkstra_counts(walkable, goal)
    out = np.full(walkable.shape, math.inf)
    for (r, c), (_, s, d) in best.items():
        out[r, c] = (float(s) + float(d) * SQRT2) * res
    return out


def frontier_cells_bruteforce(belief) -> set[tuple[int, int]]:
    """Per-cell evaluation of the frontier predicate."""
    c = belief.cells
    h, w = c.shape
    out = set()
    for r in range(h):
        for col in range(w):
            if c[r, col] != gm.FREE:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    nr, nc = r + dr, col + dc
                    if 0 <= nr < h and 0 <= nc < w and c[nr, nc] == gm.UNKNOWN:
                        out.add((r, col))
    return out


def flood_fill_free(cells: np.ndarray) -> int:
    """Number of 8-connected FREE components."""
    free = cells == gm.FREE
    seen = np.zeros_like(free)
    comps = 0
    h, w = cells.shape
    for r in range(h):
        for c in range(w):
            if free[r, c] and not seen[r, c]:
                comps += 1
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    cr, cc = stack.pop()
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = cr + dr, cc + dc
                            if 0 <= nr < h and 0 <= nc < w and free[nr, nc] and not seen[nr, nc]:
                                seen[nr, nc] = True
                                stack.append((nr, nc))
    return comps


def segment_visible(belief, src: tuple[int, int], dst: tuple[int, int], range_m: float) -> bool:
    """Scalar evaluation of the segment-visibility predicate: samples at
    t = k/n for n = ceil(dist / (0.25 * res)) and requires every touched cell
    to be belief-FREE and the span within range."""
    res = belief.resolution
    sx, sy = (src[1] + 0.5) * res, (src[0] + 0.5) * res
    tx, ty = (dst[1] + 0.5) * res, (dst[0] + 0.5) * res
    dx, dy = tx - sx, ty - sy
    dist = math.hypot(dx, dy)
    if dist > range_m + 1e-9:
        return False
    n = max(1, int(math.ceil(dist / (0.25 * res))))
    for k in range(n + 1):
        t = k / n
        x, y = sx + dx * t, sy + dy * t
        r, c = math.floor(y / res), math.floor(x / res)
        r = min(max(r, 0), belief.height - 1)
        c = min(max(c, 0), belief.width - 1)
        if belief.cells[r, c] != gm.FREE:
            return False
    return True


def patches_connected8(indices, grid_shape) -> bool:
    """True when the patch-index set forms one 8-connected component.

    Union-find over the patch grid, independent of any walk bookkeeping.
    An empty set counts as connected.
    """
    rows, cols = grid_shape
    idx = sorted(int(i) for i in indices)
    if not idx:
        return True
    parent = {i: i for i in idx}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    members = set(idx)
    for i in idx:
        r, c = divmod(i, cols)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nr, nc = r + dr, c + dc
                j = nr * cols + nc
                if 0 <= nr < rows and 0 <= nc < cols and j in members:
                    parent[find(i)] = find(j)
    roots = {find(i) for i in idx}
    return len(roots) == 1


def fov_membership(grid_shape, center, r_fov, r_expand):
    """Classify every patch by center distance: 'core', 'ring', or 'out'."""
    import math

    rows, cols = grid_shape
    cr, cc = center
    out = {}
    for r in range(rows):
        for c in range(cols):
            d = math.hypot(r - cr, c - cc)
            if d <= r_fov:
                out[r * cols + c] = "core"
            elif d <= r_expand:
                out[r * cols + c] = "ring"
            else:
                out[r * cols + c] = "out"
    return out
