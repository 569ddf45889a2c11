"""Environment-independent patch routers with guaranteed volume bounds.

Each router returns an explicit path-flow whose transportation measure and
maximum edge volume are certified by construction:

* boundary-to-interior spreading (at most one turn, volume <= 2 max rho),
* pair routing via a uniform interior vertex (volume <= 2 (max ent + max exi)),
* bottom-to-top frame crossing (volume <= max theta; exactly 1 on vertical
  edges for the constant unit measure),
* torus neighborhood mixing over an odd L x L box (volume <= L / (4 N^2)),

plus the capacity blend that trades a small volume overshoot against the
uniform minimal-path flow.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .flow import FlowVolume, PathFlow, uniform_flow_value
from .lattice import BoundaryPoint, ExtendedSquare, Side, Torus, boundary_point


def _one_turn_path(sq: ExtendedSquare, b_index: int, target: tuple[int, int]) -> tuple[int, ...]:
    """Path from a boundary point to an internal vertex with at most one turn.

    Leaves the boundary perpendicular to its side, runs to the target's
    line, then turns once.
    """
    m = sq.m
    b = boundary_point(b_index, m)
    tx, ty = target
    path = [sq.boundary_vertex(b_index)]
    if b.side in (Side.LEFT, Side.RIGHT):
        y = b.offset
        xs = range(0, tx + 1) if b.side == Side.LEFT else range(m - 1, tx - 1, -1)
        for x in xs:
            path.append(sq.internal_index(x, y))
        step = 1 if ty >= y else -1
        for yy in range(y + step, ty + step, step):
            path.append(sq.internal_index(tx, yy))
    else:
        x = b.offset
        ys = range(0, ty + 1) if b.side == Side.BOTTOM else range(m - 1, ty - 1, -1)
        for y in ys:
            path.append(sq.internal_index(x, y))
        step = 1 if tx >= x else -1
        for xx in range(x + step, tx + step, step):
            path.append(sq.internal_index(xx, ty))
    return tuple(path)


def route_to_uniform_interior(m: int, rho, sq: ExtendedSquare | None = None) -> PathFlow:
    """Spread boundary mass uniformly over the interior with one-turn paths.

    The transportation measure is rho x (uniform over the m^2 internal
    vertices) and no edge carries more than 2 max_b rho(b).
    """
    sq = sq or ExtendedSquare(m)
    mu = PathFlow(sq)
    unit = _as_fractionable(rho, m)
    for b in range(4 * m):
        if not unit[b]:
            continue
        w = unit[b] / (m * m)
        for ty in range(m):
            for tx in range(m):
                mu.add(_one_turn_path(sq, b, (tx, ty)), w)
    return mu


def _as_fractionable(rho, m):
    vals = list(rho)
    if len(vals) != 4 * m:
        raise ValueError("boundary measure must have 4m entries")
    if any(v < 0 for v in vals):
        raise ValueError("boundary measure must be nonnegative")
    return vals


def route_pairs_via_interior(m: int, Q, sq: ExtendedSquare | None = None) -> PathFlow:
    """Realize a boundary pair measure by routing through a uniform interior vertex.

    Concatenates two one-turn legs; the volume bound is
    2 (max exit marginal + max entrance marginal).
    """
    sq = sq or ExtendedSquare(m)
    q = np.asarray(Q.q if hasattr(Q, "q") else Q)
    mu = PathFlow(sq)
    for b1 in range(4 * m):
        for b2 in range(4 * m):
            mass = q[b1, b2]
            if mass == 0:
                continue
            w = mass / (m * m)
            for ty in range(m):
                for tx in range(m):
                    leg1 = _one_turn_path(sq, b1, (tx, ty))
                    leg2 = _one_turn_path(sq, b2, (tx, ty))
                    mu.add(leg1 + tuple(reversed(leg2[:-1])), w)
    return mu


def route_frame_crossing(k: int, theta, sq: ExtendedSquare | None = None) -> PathFlow:
    """Carry bottom-boundary mass to a uniform top exit through a K x K frame.

    Equal columns route straight up; otherwise the path climbs to row
    d = |y - x| - 1, jogs across, and climbs out.  For the constant unit
    measure every vertical edge carries exactly 1, and in general no edge
    exceeds max theta.
    """
    sq = sq or ExtendedSquare(k)
    vals = list(theta)
    if len(vals) != k:
        raise ValueError("bottom-boundary measure must have k entries")
    mu = PathFlow(sq)
    for x in range(k):
        if not vals[x]:
            continue
        w = vals[x] / k
        for y in range(k):
            path = [sq.boundary_vertex(BoundaryPoint(Side.BOTTOM, x))]
            if x == y:
                for yy in range(k):
                    path.append(sq.internal_index(x, yy))
            else:
                d = abs(y - x) - 1
                for yy in range(0, d + 1):
                    path.append(sq.internal_index(x, yy))
                step = 1 if y > x else -1
                for xx in range(x + step, y + step, step):
                    path.append(sq.internal_index(xx, d))
                for yy in range(d + 1, k):
                    path.append(sq.internal_index(y, yy))
            path.append(sq.boundary_vertex(BoundaryPoint(Side.TOP, y)))
            mu.add(tuple(path), w)
    return mu


@lru_cache(maxsize=None)
def _monotone_paths(a: int, b: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    """All monotone lattice paths from (0,0) to (a,b), as offset sequences."""
    if a == 0 and b == 0:
        return (((0, 0),),)
    out = []
    sa = 1 if a > 0 else -1
    sb = 1 if b > 0 else -1
    if a != 0:
        for rest in _monotone_paths(a - sa, b):
            out.append(((0, 0),) + tuple((x + sa, y) for x, y in rest))
    if b != 0:
        for rest in _monotone_paths(a, b - sb):
            out.append(((0, 0),) + tuple((x, y + sb) for x, y in rest))
    return tuple(out)


def route_neighborhood_mix(n: int, box: int, torus: Torus | None = None) -> PathFlow:
    """Unit-mass transport from a uniform vertex to a uniform point of the
    odd box x box square centered on it, spread over all minimal paths.

    Box side 1 is the identity transport (zero-length paths, no edges);
    the volume bound is box / (4 n^2).
    """
    if box % 2 == 0 or box < 1 or box > n:
        raise ValueError("box side must be odd and between 1 and n")
    torus = torus or Torus(n)
    half = (box - 1) // 2
    mu = PathFlow(torus)
    base = 1.0 / (n * n * box * box)
    for v in range(torus.n_vertices):
        vi, vj = v % n, v // n
        for dx in range(-half, half + 1):
            for dy in range(-half, half + 1):
                paths = _monotone_paths(dx, dy)
                w = base / len(paths)
                for offsets in paths:
                    mu.add(tuple(torus.vertex_index(vi + x, vj + y) for x, y in offsets), w)
    return mu


def neighborhood_mix_edge_volume(n: int, box: int) -> float:
    """Exact constant per-edge volume of the neighborhood mix: l(l+1)/(box n^2)."""
    half = (box - 1) // 2
    return half * (half + 1) / (box * n * n)


def blend_with_uniform(f1: FlowVolume, f2: FlowVolume, b0: float, delta: float,
                       n: int) -> tuple[FlowVolume, float]:
    """Mix a near-feasible standardized flow with the uniform flow.

    Given max f1 <= b0 and max f2 <= delta with 0 < delta < b0 - 1/4, the
    blend at lam = 2 delta / (delta + b0 - 1/4) has maximum volume at most
    b0 - delta and costs at most 8 delta n^2 b0^2 max(c) / (b0 - 1/4) more
    than f1 alone.  Returns (blended flow, lam).
    """
    if not 0 < delta < b0 - 0.25:
        raise ValueError("delta must lie strictly between 0 and b0 - 1/4")
    if f1.graph.n_edges != f2.graph.n_edges:
        raise ValueError("flows live on different graphs")
    lam = 2.0 * delta / (delta + b0 - 0.25)
    vols = (1 - lam) * (f1.volumes + f2.volumes) + lam * uniform_flow_value(n)
    meta = dict(f1.meta)
    return FlowVolume(f1.graph, vols, meta), lam
