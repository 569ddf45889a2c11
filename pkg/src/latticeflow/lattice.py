"""Lattice topology: the N x N torus, the extended M x M square, and the
inter-square boundary walk state space.

Vertices and edges carry flat integer ids so environments and flow volumes
can live in numpy arrays.  Everything here is an immutable value after
construction; instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1
    BOTTOM = 2
    TOP = 3


_OPPOSITE = {
    Side.LEFT: Side.RIGHT,
    Side.RIGHT: Side.LEFT,
    Side.BOTTOM: Side.TOP,
    Side.TOP: Side.BOTTOM,
}


@dataclass(frozen=True, order=True)
class BoundaryPoint:
    """Artificial vertex sitting midway on an edge leaving the square."""

    side: Side
    offset: int


def reflect(b: BoundaryPoint, m: int) -> BoundaryPoint:
    """Pair a boundary point with the matching point on the opposite side.

    Left swaps with right and bottom with top, keeping the offset; the map
    is an involution on the 4*m boundary points.
    """
    if not 0 <= b.offset < m:
        raise ValueError(f"offset {b.offset} out of range for m={m}")
    return BoundaryPoint(_OPPOSITE[b.side], b.offset)


def boundary_index(b: BoundaryPoint, m: int) -> int:
    """Canonical index of a boundary point in [0, 4m)."""
    if not 0 <= b.offset < m:
        raise ValueError(f"offset {b.offset} out of range for m={m}")
    return int(b.side) * m + b.offset


def boundary_point(index: int, m: int) -> BoundaryPoint:
    if not 0 <= index < 4 * m:
        raise ValueError(f"boundary index {index} out of range for m={m}")
    return BoundaryPoint(Side(index // m), index % m)


def reflect_index(index: int, m: int) -> int:
    return boundary_index(reflect(boundary_point(index, m), m), m)


def reflect_permutation(m: int) -> np.ndarray:
    """Index permutation implementing the reflect map on [0, 4m)."""
    return np.array([reflect_index(i, m) for i in range(4 * m)], dtype=np.int64)


def boundary_coords(index: int, m: int) -> tuple[float, float]:
    """Plane coordinates of a boundary point of the extended m x m square."""
    b = boundary_point(index, m)
    if b.side == Side.LEFT:
        return (-0.5, float(b.offset))
    if b.side == Side.RIGHT:
        return (m - 0.5, float(b.offset))
    if b.side == Side.BOTTOM:
        return (float(b.offset), -0.5)
    return (float(b.offset), m - 0.5)


def boundary_coord_array(m: int) -> np.ndarray:
    """(4m, 2) array of boundary-point coordinates in canonical order."""
    return np.array([boundary_coords(i, m) for i in range(4 * m)], dtype=float)


class Torus:
    """Discrete N x N torus with 2*N^2 undirected edges.

    Vertex (i, j) has id ``j*N + i``.  The horizontal edge (i,j)-(i+1,j)
    has id ``j*N + i`` and the vertical edge (i,j)-(i,j+1) has id
    ``N^2 + j*N + i``.  Each edge is stored once in this canonical
    orientation; traversal direction is a property of paths, not edges.
    """

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("torus size must be at least 2")
        self.n = n
        self.n_vertices = n * n
        self.n_edges = 2 * n * n
        v = np.arange(self.n_vertices)
        i, j = v % n, v // n
        # direction order: +x, -x, +y, -y
        self.neighbors = np.stack(
            [
                j * n + (i + 1) % n,
                j * n + (i - 1) % n,
                ((j + 1) % n) * n + i,
                ((j - 1) % n) * n + i,
            ],
            axis=1,
        )
        self.edge_of_direction = np.stack(
            [
                j * n + i,
                j * n + (i - 1) % n,
                n * n + j * n + i,
                n * n + ((j - 1) % n) * n + i,
            ],
            axis=1,
        )

    def vertex_index(self, i: int, j: int) -> int:
        n = self.n
        return (j % n) * n + (i % n)

    def vertex_ij(self, v: int) -> tuple[int, int]:
        return v % self.n, v // self.n

    def edge_index(self, u: int, v: int) -> int:
        """Edge id joining two adjacent vertices (either order)."""
        for d in range(4):
            if self.neighbors[u, d] == v:
                return int(self.edge_of_direction[u, d])
        raise ValueError(f"vertices {u} and {v} are not adjacent")

    def edge_endpoints(self, e: int) -> tuple[int, int]:
        n = self.n
        if e < n * n:
            i, j = e % n, e // n
            return j * n + i, j * n + (i + 1) % n
        e -= n * n
        i, j = e % n, e // n
        return j * n + i, ((j + 1) % n) * n + i

    def distance(self, u: int, v: int) -> int:
        """Graph distance: L1 with wraparound on each axis."""
        ui, uj = self.vertex_ij(u)
        vi, vj = self.vertex_ij(v)
        di = abs(ui - vi)
        dj = abs(uj - vj)
        n = self.n
        return min(di, n - di) + min(dj, n - dj)


def torus_distance(v: tuple[int, int], w: tuple[int, int], n: int) -> int:
    """L1 torus distance between vertices given as (i, j) pairs."""
    di = abs(v[0] % n - w[0] % n)
    dj = abs(v[1] % n - w[1] % n)
    return min(di, n - di) + min(dj, n - dj)


class ExtendedSquare:
    """M x M grid plus 4M half-edges to artificial boundary points.

    Vertex ids: internal (i, j) is ``j*M + i``; boundary points follow at
    ``M^2 + boundary_index``.  Edge ids are laid out so the 2*M^2
    cost-carrying edges (internal plus left/bottom half-edges) occupy
    ids [0, 2*M^2) and the always-zero-cost right/top half-edges occupy
    ids [2*M^2, 2*M^2 + 2*M).
    """

    def __init__(self, m: int):
        if m < 1:
            raise ValueError("square size must be at least 1")
        self.m = m
        self.n_internal = m * m
        self.n_vertices = m * m + 4 * m
        self.n_h_internal = (m - 1) * m
        self.n_v_internal = m * (m - 1)
        self._base_v = self.n_h_internal
        self._base_left = self.n_h_internal + self.n_v_internal
        self._base_bottom = self._base_left + m
        self._base_right = self._base_bottom + m
        self._base_top = self._base_right + m
        self.n_edges = self._base_top + m
        self.n_assigned_edges = 2 * m * m  # ids [0, 2*m*m)
        self._adj = self._build_adjacency()

    # -- vertex ids ----------------------------------------------------
    def internal_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.m and 0 <= j < self.m):
            raise ValueError(f"internal vertex ({i},{j}) out of range")
        return j * self.m + i

    def boundary_vertex(self, b: BoundaryPoint | int) -> int:
        idx = b if isinstance(b, int) else boundary_index(b, self.m)
        return self.n_internal + idx

    def is_boundary_vertex(self, v: int) -> bool:
        return v >= self.n_internal

    def boundary_index_of_vertex(self, v: int) -> int:
        if v < self.n_internal:
            raise ValueError(f"vertex {v} is internal")
        return v - self.n_internal

    # -- edge ids ------------------------------------------------------
    def h_edge(self, i: int, j: int) -> int:
        """Internal edge (i,j)-(i+1,j)."""
        return j * (self.m - 1) + i

    def v_edge(self, i: int, j: int) -> int:
        """Internal edge (i,j)-(i,j+1)."""
        return self._base_v + j * self.m + i

    def half_edge(self, side: Side, offset: int) -> int:
        base = {
            Side.LEFT: self._base_left,
            Side.BOTTOM: self._base_bottom,
            Side.RIGHT: self._base_right,
            Side.TOP: self._base_top,
        }[side]
        return base + offset

    def assigned_edges(self) -> np.ndarray:
        return np.arange(self.n_assigned_edges)

    def zero_cost_edges(self) -> np.ndarray:
        return np.arange(self.n_assigned_edges, self.n_edges)

    def _build_adjacency(self) -> dict[tuple[int, int], int]:
        m = self.m
        adj: dict[tuple[int, int], int] = {}

        def put(u: int, v: int, e: int) -> None:
            adj[(u, v)] = e
            adj[(v, u)] = e

        for j in range(m):
            for i in range(m - 1):
                put(self.internal_index(i, j), self.internal_index(i + 1, j), self.h_edge(i, j))
        for j in range(m - 1):
            for i in range(m):
                put(self.internal_index(i, j), self.internal_index(i, j + 1), self.v_edge(i, j))
        for o in range(m):
            put(self.boundary_vertex(BoundaryPoint(Side.LEFT, o)), self.internal_index(0, o),
                self.half_edge(Side.LEFT, o))
            put(self.boundary_vertex(BoundaryPoint(Side.BOTTOM, o)), self.internal_index(o, 0),
                self.half_edge(Side.BOTTOM, o))
            put(self.boundary_vertex(BoundaryPoint(Side.RIGHT, o)), self.internal_index(m - 1, o),
                self.half_edge(Side.RIGHT, o))
            put(self.boundary_vertex(BoundaryPoint(Side.TOP, o)), self.internal_index(o, m - 1),
                self.half_edge(Side.TOP, o))
        return adj

    def edge_index(self, u: int, v: int) -> int:
        try:
            return self._adj[(u, v)]
        except KeyError:
            raise ValueError(f"vertices {u} and {v} are not adjacent") from None

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(heads, tails, edge ids) over all directed adjacent pairs."""
        heads, tails, eids = [], [], []
        for (u, v), e in self._adj.items():
            heads.append(u)
            tails.append(v)
            eids.append(e)
        return np.array(heads), np.array(tails), np.array(eids)

    def neighbors_of(self, v: int) -> list[int]:
        return sorted(u for (w, u) in self._adj if w == v)


# ---------------------------------------------------------------------------
# Partition of the torus into M x M squares
# ---------------------------------------------------------------------------

def require_divides(m: int, n: int) -> None:
    if n % m != 0:
        raise ValueError(f"square size {m} must divide torus size {n}")


def partition_locate(v: tuple[int, int], n: int, m: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Square index in [0, n/m)^2 and local coordinate in [0, m)^2 of a vertex."""
    require_divides(m, n)
    i, j = v[0] % n, v[1] % n
    return (i // m, j // m), (i % m, j % m)


def square_corner(square_index: tuple[int, int], m: int) -> tuple[int, int]:
    return square_index[0] * m, square_index[1] * m


def torus_edge_of_square_edge(square: ExtendedSquare, e: int, corner: tuple[int, int],
                              torus: Torus) -> int | None:
    """Torus edge carrying a square edge's cost, or None for a right/top half-edge.

    Internal edges map by translation; the left/bottom half-edges own the
    full crossing edge into the neighboring square, so that summing over
    the natural partition covers every torus edge exactly once.
    """
    m, n = square.m, torus.n
    cx, cy = corner
    if e < square.n_h_internal:
        i, j = e % (m - 1), e // (m - 1)
        return ((cy + j) % n) * n + (cx + i) % n
    if e < square._base_left:
        k = e - square._base_v
        i, j = k % m, k // m
        return n * n + ((cy + j) % n) * n + (cx + i) % n
    if e < square._base_bottom:
        j = e - square._base_left
        return ((cy + j) % n) * n + (cx - 1) % n
    if e < square._base_right:
        i = e - square._base_bottom
        return n * n + ((cy - 1) % n) * n + (cx + i) % n
    return None


# ---------------------------------------------------------------------------
# Boundary-walk state space on the torus partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WalkState:
    """Directed state: a partition boundary point plus the square it enters."""

    point: int
    direction: int  # 0: positive axis, 1: negative axis


class SkeletonSpace:
    """State space for the walk on inter-square boundary points.

    The natural partition of the N x N torus into M x M squares has
    2*N^2/M boundary points, one midway on each edge that crosses between
    adjacent squares.  Each point expands to two directed states, the
    arrow picking which of the two squares the crossing edge joins, for
    4*N^2/M states total.

    Point ids: points on vertical cut lines (x = k*M - 1/2) come first,
    encoded ``k*N + y``; points on horizontal cut lines (y = l*M - 1/2)
    follow at offset ``K*N``, encoded ``l*N + x``, with K = N/M.
    State ids are ``2*point + direction``.
    """

    def __init__(self, n: int, m: int):
        require_divides(m, n)
        if m < 2:
            raise ValueError("square size must be at least 2 for the boundary walk")
        self.n = n
        self.m = m
        self.k = n // m
        self.n_points = 2 * n * n // m
        self.n_states = 4 * n * n // m
        self._vcut_count = self.k * n

    # -- point encoding -------------------------------------------------
    def vcut_point(self, k: int, y: int) -> int:
        return (k % self.k) * self.n + (y % self.n)

    def hcut_point(self, x: int, l: int) -> int:
        return self._vcut_count + (l % self.k) * self.n + (x % self.n)

    def is_vcut(self, p: int) -> bool:
        return p < self._vcut_count

    def point_coords(self, p: int) -> tuple[float, float]:
        n = self.n
        if self.is_vcut(p):
            k, y = divmod(p, n)
            return (k * self.m - 0.5, float(y))
        p -= self._vcut_count
        l, x = divmod(p, n)
        return (float(x), l * self.m - 0.5)

    def translate_point(self, p: int, dx: int, dy: int) -> int:
        """Translate a boundary point by a vector whose entries are multiples of M."""
        if dx % self.m or dy % self.m:
            raise ValueError("translation must be a multiple of the square size")
        n = self.n
        if self.is_vcut(p):
            k, y = divmod(p, n)
            return self.vcut_point(k + dx // self.m, y + dy)
        q = p - self._vcut_count
        l, x = divmod(q, n)
        return self.hcut_point(x + dx, l + dy // self.m)

    # -- states ----------------------------------------------------------
    def state(self, point: int, direction: int) -> int:
        return 2 * point + direction

    def state_point(self, s: int) -> int:
        return s // 2

    def state_direction(self, s: int) -> int:
        return s % 2

    def pro(self, s: int) -> int:
        """Boundary index (relative to the entered square) of a state."""
        p, d = divmod(s, 2)
        n, m = self.n, self.m
        if self.is_vcut(p):
            y = p % n
            side = Side.LEFT if d == 0 else Side.RIGHT
            return boundary_index(BoundaryPoint(side, y % m), m)
        x = (p - self._vcut_count) % n
        side = Side.BOTTOM if d == 0 else Side.TOP
        return boundary_index(BoundaryPoint(side, x % m), m)

    def entered_corner(self, s: int) -> tuple[int, int]:
        """Lower-left corner of the square the state's arrow points into."""
        p, d = divmod(s, 2)
        n, m = self.n, self.m
        if self.is_vcut(p):
            k, y = divmod(p, n)
            cx = (k * m) % n if d == 0 else ((k - 1) % self.k) * m
            return cx, (y // m) * m
        l, x = divmod(p - self._vcut_count, n)
        cy = (l * m) % n if d == 0 else ((l - 1) % self.k) * m
        return (x // m) * m, cy

    def state_at_exit(self, corner: tuple[int, int], b_index: int) -> int:
        """State for flow exiting a square at a boundary position.

        The returned arrow points out of the square whose lower-left
        corner is given.
        """
        cx, cy = corner
        b = boundary_point(b_index, self.m)
        m = self.m
        if b.side == Side.RIGHT:
            return self.state(self.vcut_point(cx // m + 1, cy + b.offset), 0)
        if b.side == Side.LEFT:
            return self.state(self.vcut_point(cx // m, cy + b.offset), 1)
        if b.side == Side.TOP:
            return self.state(self.hcut_point(cx + b.offset, cy // m + 1), 0)
        return self.state(self.hcut_point(cx + b.offset, cy // m), 1)

    def square_boundary_points(self, square_index: tuple[int, int]) -> list[int]:
        """The 4M partition boundary points on one square's boundary."""
        si, sj = square_index
        m = self.m
        cx, cy = si * m, sj * m
        pts = []
        for o in range(m):
            pts.append(self.vcut_point(si, cy + o))              # left
            pts.append(self.vcut_point(si + 1, cy + o))          # right
            pts.append(self.hcut_point(cx + o, sj))              # bottom
            pts.append(self.hcut_point(cx + o, sj + 1))          # top
        return pts

    def states(self) -> list[WalkState]:
        return [WalkState(s // 2, s % 2) for s in range(self.n_states)]


def skeleton_states(n: int, m: int) -> SkeletonSpace:
    """Build the boundary-walk state space for the (n, m) partition."""
    return SkeletonSpace(n, m)
