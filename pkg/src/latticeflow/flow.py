"""Path-flow algebra: paths, weighted path measures, flow volumes, the
quadratic congestion cost, winding numbers, and the uniform minimal-path
flow.

A path is a tuple of vertex ids with consecutive vertices adjacent in the
graph.  Volumes count traversals in either direction, with multiplicity,
so an out-and-back path loads an edge twice.  All operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

SERIAL_VERSION = "latticeflow-flow/1"


@dataclass
class PathFlow:
    """Finitely supported nonnegative measure on lattice paths."""

    graph: object
    items: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def add(self, path, weight) -> None:
        if weight < 0:
            raise ValueError("path weights must be nonnegative")
        if weight != 0:
            self.items.append((tuple(path), weight))

    def total_mass(self):
        return sum(w for _, w in self.items)

    def scaled(self, factor) -> "PathFlow":
        return PathFlow(self.graph, [(p, w * factor) for p, w in self.items])

    def __add__(self, other: "PathFlow") -> "PathFlow":
        if other.graph is not self.graph and type(other.graph) is not type(self.graph):
            raise ValueError("cannot add path-flows on different graphs")
        return PathFlow(self.graph, list(self.items) + list(other.items))


@dataclass
class FlowVolume:
    """Per-edge nonnegative traversal volume."""

    graph: object
    volumes: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=float)
        if self.volumes.shape != (self.graph.n_edges,):
            raise ValueError("volume array does not match edge count")

    def max_volume(self) -> float:
        return float(self.volumes.max(initial=0.0))


def path_edges(graph, path) -> list[int]:
    """Edge ids traversed by a path, in order, with multiplicity."""
    return [graph.edge_index(path[i], path[i + 1]) for i in range(len(path) - 1)]


def flo_map(mu: PathFlow) -> dict[int, object]:
    """Exact edge-volume accumulation; preserves weight arithmetic (e.g. Fractions)."""
    acc: dict[int, object] = {}
    for path, w in mu.items:
        for e in path_edges(mu.graph, path):
            acc[e] = acc.get(e, 0) + w
    return acc

def flo(mu: PathFlow) -> FlowVolume:
    """Flow volume of a path-flow: volume(e) = sum of weight * multiplicity."""
    out = np.zeros(mu.graph.n_edges)
    for e, v in flo_map(mu).items():
        out[e] = float(v)
    return FlowVolume(mu.graph, out)


def tra(mu: PathFlow) -> dict[tuple[int, int], float]:
    """Transportation measure: push path mass to (entrance, exit) pairs.

    Weight arithmetic is preserved, so exact types such as Fraction pass
    through unchanged.
    """
    out: dict[tuple[int, int], float] = {}
    for path, w in mu.items:
        key = (path[0], path[-1])
        out[key] = out.get(key, 0) + w
    return out


def cost(f: FlowVolume, env) -> float:
    """Quadratic congestion cost: sum over edges of c(e) * volume(e)^2."""
    if env.graph.n_edges != f.graph.n_edges or type(env.graph) is not type(f.graph):
        raise ValueError("flow and environment live on different graphs")
    return float(np.dot(env.costs, f.volumes * f.volumes))


def add_volumes(*flows: FlowVolume) -> FlowVolume:
    g = flows[0].graph
    total = np.zeros(g.n_edges)
    for f in flows:
        total += f.volumes
    return FlowVolume(g, total)


def scale_volume(factor: float, f: FlowVolume) -> FlowVolume:
    return FlowVolume(f.graph, factor * f.volumes, dict(f.meta))


# ---------------------------------------------------------------------------
# Winding number of a torus path
# ---------------------------------------------------------------------------

def winding(path, n: int) -> tuple[float, float]:
    """Net displacement of the plane-lifted path divided by the torus size.

    Integer parts count full winds around each axis; the map is the
    per-step increment sum, so a closed non-winding loop returns (0, 0).
    """
    wx = wy = 0
    for a, b in zip(path, path[1:]):
        ai, aj = a % n, a // n
        bi, bj = b % n, b // n
        di = (bi - ai) % n
        dj = (bj - aj) % n
        if di == 1:
            wx += 1
        elif di == n - 1:
            wx -= 1
        elif di != 0:
            raise ValueError("path steps must join adjacent vertices")
        if dj == 1:
            wy += 1
        elif dj == n - 1:
            wy -= 1
        elif dj != 0:
            raise ValueError("path steps must join adjacent vertices")
        if (di != 0) == (dj != 0):
            raise ValueError("path steps must move along exactly one axis")
    return wx / n, wy / n


# ---------------------------------------------------------------------------
# Uniform minimal-path flow
# ---------------------------------------------------------------------------

def uniform_flow_value(n: int) -> float:
    """Constant edge volume of the uniform minimal-path flow: floor(n^2/2)/(2 n^2)."""
    return (n * n // 2) / (2 * n * n)


def uniform_flow(n: int, torus=None) -> FlowVolume:
    """Standardized flow spreading each pair's demand over all minimal paths.

    Represented analytically as a constant volume with a certificate flag;
    the transportation measure is constant n^-3 by construction and the
    value never exceeds 1/4.
    """
    from .lattice import Torus

    g = torus if torus is not None else Torus(n)
    vols = np.full(g.n_edges, uniform_flow_value(n))
    return FlowVolume(g, vols, {"standardized": True, "constant_tra": n ** -3})


def _axis_representatives(d: int, n: int) -> list[int]:
    """Signed minimal representatives of a displacement mod n (two when tied)."""
    d %= n
    if 2 * d == n:
        return [d, d - n]
    return [d] if 2 * d < n else [d - n]


@lru_cache(maxsize=None)
def _rectangle_usage(a: int, b: int) -> tuple[dict, dict, int]:
    """Minimal-path edge-usage counts in the a x b rectangle (a, b >= 0).

    Returns (horizontal, vertical, total) where horizontal[(x, y)] counts
    the monotone paths from (0,0) to (a,b) crossing the edge
    (x,y)-(x+1,y) and total is the number of such paths.
    """
    total = comb(a + b, a)
    h: dict[tuple[int, int], int] = {}
    v: dict[tuple[int, int], int] = {}
    for x in range(a):
        for y in range(b + 1):
            h[(x, y)] = comb(x + y, y) * comb(a - 1 - x + b - y, b - y)
    for x in range(a + 1):
        for y in range(b):
            v[(x, y)] = comb(x + y, x) * comb(a + b - 1 - x - y, a - x)
    return h, v, total


@lru_cache(maxsize=None)
def uniform_flow_source_profile(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-source edge usage of the uniform minimal-path flow.

    Returns (rho_h, rho_v), each (n, n), where rho_h[oy, ox] is the volume
    the flow out of one source places on the horizontal edge whose origin
    is offset (ox, oy) from the source.  Summing a profile over all offsets
    recovers the constant uniform-flow value.
    """
    if n > 64:
        raise ValueError("profile computation is desk-scale (n <= 64)")
    rho_h = np.zeros((n, n))
    rho_v = np.zeros((n, n))
    mass = n ** -3
    for dx_raw in range(n):
        xs = _axis_representatives(dx_raw, n)
        for dy_raw in range(n):
            ys = _axis_representatives(dy_raw, n)
            w = mass / (len(xs) * len(ys))
            for a in xs:
                sa = 1 if a >= 0 else -1
                for b in ys:
                    sb = 1 if b >= 0 else -1
                    h, v, total = _rectangle_usage(abs(a), abs(b))
                    for (x, y), count in h.items():
                        ox = x if sa > 0 else -x - 1
                        rho_h[(sb * y) % n, ox % n] += w * count / total
                    for (x, y), count in v.items():
                        oy = y if sb > 0 else -y - 1
                        rho_v[oy % n, (sa * x) % n] += w * count / total
    return rho_h, rho_v


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def serialize_flow(f: FlowVolume, kind: str = "torus") -> str:
    size = f.graph.n if kind == "torus" else f.graph.m
    lines = [f"# {SERIAL_VERSION}", f"kind={kind}", f"size={size}", f"edges={f.graph.n_edges}"]
    lines += [f"{e} {float(v)!r}" for e, v in enumerate(f.volumes)]
    return "\n".join(lines) + "\n"


def deserialize_flow(text: str) -> FlowVolume:
    from .lattice import ExtendedSquare, Torus

    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith(f"# {SERIAL_VERSION}"):
        raise ValueError("not a recognized flow file")
    header: dict[str, str] = {}
    rows: list[tuple[int, float]] = []
    for line in lines[1:]:
        if "=" in line and " " not in line:
            k, _, val = line.partition("=")
            header[k] = val
        elif line:
            e, val = line.split()
            rows.append((int(e), float(val)))
    size = int(header["size"])
    graph = Torus(size) if header["kind"] == "torus" else ExtendedSquare(size)
    vols = np.zeros(graph.n_edges)
    for e, val in rows:
        vols[e] = val
    return FlowVolume(graph, vols)
