"""Random cost environments on lattice edges.

Costs are drawn i.i.d. from a bounded distribution, one value per edge,
using a counter-based generator keyed by (seed, edge index order) so the
result never depends on iteration order or thread count.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .lattice import ExtendedSquare, Torus, require_divides, square_corner, torus_edge_of_square_edge

RNG_VERSION = "numpy-philox4x64/1"

SERIAL_VERSION = "latticeflow-environment/1"


@dataclass(frozen=True)
class CostDistribution:
    """Bounded edge-cost distribution.

    Supported kinds: ``constant`` (a single value c), ``uniform`` (uniform
    on [0, c*]), ``twopoint`` (0 with probability p, else c*), and
    ``discrete`` (finite list of values with weights).  The support must
    lie in [0, c*]; unbounded distributions are rejected at construction.
    """

    kind: str
    params: tuple[float, ...]
    values: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "twopoint", "discrete"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "discrete":
            if len(self.values) != len(self.weights) or not self.values:
                raise ValueError("discrete distribution needs matching values and weights")
            if any(w < 0 for w in self.weights):
                raise ValueError("weights must be nonnegative")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")
            if any(v < 0 for v in self.values):
                raise ValueError("support must be nonnegative")
        if self.kind == "twopoint" and not 0.0 <= self.params[0] <= 1.0:
            raise ValueError("twopoint probability must lie in [0, 1]")
        if self.c_star < 0 or not np.isfinite(self.c_star):
            raise ValueError("cost support must be bounded and nonnegative")

    # -- constructors ----------------------------------------------------
    @staticmethod
    def constant(c: float) -> "CostDistribution":
        return CostDistribution("constant", (float(c),))

    @staticmethod
    def uniform(c_star: float) -> "CostDistribution":
        return CostDistribution("uniform", (float(c_star),))

    @staticmethod
    def twopoint(p: float, c_star: float) -> "CostDistribution":
        """P(cost = 0) = p, P(cost = c*) = 1 - p."""
        return CostDistribution("twopoint", (float(p), float(c_star)))

    @staticmethod
    def discrete(values, weights) -> "CostDistribution":
        return CostDistribution("discrete", (), tuple(float(v) for v in values),
                                tuple(float(w) for w in weights))

    @property
    def c_star(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return self.params[0]
        if self.kind == "twopoint":
            return self.params[1]
        return max(self.values)

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return self.params[0] / 2.0
        if self.kind == "twopoint":
            p, c = self.params
            return (1.0 - p) * c
        return float(sum(v * w for v, w in zip(self.values, self.weights)))

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Map uniform [0,1) draws to cost values."""
        if self.kind == "constant":
            return np.full_like(uniforms, self.params[0])
        if self.kind == "uniform":
            return uniforms * self.params[0]
        if self.kind == "twopoint":
            p, c = self.params
            return np.where(uniforms < p, 0.0, c)
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(cum, uniforms, side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return np.asarray(self.values, dtype=float)[idx]

    # -- one-line spec strings -------------------------------------------
    def spec_string(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.params[0]!r}"
        if self.kind == "uniform":
            return f"uniform:{self.params[0]!r}"
        if self.kind == "twopoint":
            return f"twopoint:{self.params[0]!r}:{self.params[1]!r}"
        pairs = ",".join(f"{v!r}:{w!r}" for v, w in zip(self.values, self.weights))
        return f"discrete:{pairs}"

    @staticmethod
    def parse(text: str) -> "CostDistribution":
        """Parse ``constant:<c>``, ``uniform:<c*>``, ``twopoint:<p>:<c*>`` or
        ``discrete:<v1>:<w1>,<v2>:<w2>,...``."""
        head, _, rest = text.partition(":")
        try:
            if head == "constant":
                return CostDistribution.constant(float(rest))
            if head == "uniform":
                return CostDistribution.uniform(float(rest))
            if head == "twopoint":
                p, c = rest.split(":")
                return CostDistribution.twopoint(float(p), float(c))
            if head == "discrete":
                values, weights = [], []
                for pair in rest.split(","):
                    v, w = pair.split(":")
                    values.append(float(v))
                    weights.append(float(w))
                return CostDistribution.discrete(values, weights)
        except ValueError as exc:
            raise ValueError(f"bad distribution spec {text!r}: {exc}") from None
        raise ValueError(f"unknown distribution kind in {text!r}")


@dataclass
class Environment:
    """Edge costs on a torus or extended square."""

    graph: object
    costs: np.ndarray
    kind: str = "torus"  # "torus" or "square"
    seed: int | None = None
    dist: CostDistribution | None = None

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float)
        if self.costs.shape != (self.graph.n_edges,):
            raise ValueError("cost array does not match edge count")
        if np.any(self.costs < 0):
            raise ValueError("costs must be nonnegative")

    @property
    def c_star(self) -> float:
        return self.dist.c_star if self.dist is not None else float(self.costs.max(initial=0.0))

    def size(self) -> int:
        return self.graph.n if self.kind == "torus" else self.graph.m


def _uniform_draws(seed: int, count: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))
    return rng.random(count)


def sample_torus_env(n: int, dist: CostDistribution, seed: int) -> Environment:
    """Draw 2*n^2 i.i.d. edge costs; deterministic given (n, dist, seed)."""
    torus = Torus(n)
    u = _uniform_draws(seed, torus.n_edges)
    return Environment(torus, dist.sample(u), "torus", seed, dist)


def sample_square_env(m: int, dist: CostDistribution, seed: int) -> Environment:
    """Draw costs for the extended m x m square.

    The 2*m^2 internal and left/bottom half-edges get i.i.d. draws; the
    right/top half-edges are pinned to cost zero so that tiling the torus
    counts every crossing edge exactly once.
    """
    sq = ExtendedSquare(m)
    costs = np.zeros(sq.n_edges)
    u = _uniform_draws(seed, sq.n_assigned_edges)
    costs[: sq.n_assigned_edges] = dist.sample(u)
    return Environment(sq, costs, "square", seed, dist)


def restrict_env(torus_env: Environment, square_index: tuple[int, int], n: int, m: int) -> Environment:
    """Local environment induced on one square of the natural partition.

    The square's internal edges and left/bottom half-edges take the cost
    of the torus edge they own; right/top half-edges are zero.
    """
    if torus_env.kind != "torus" or torus_env.graph.n != n:
        raise ValueError("environment is not a torus environment of the given size")
    require_divides(m, n)
    sq = ExtendedSquare(m)
    corner = square_corner(square_index, m)
    costs = np.zeros(sq.n_edges)
    for e in range(sq.n_assigned_edges):
        te = torus_edge_of_square_edge(sq, e, corner, torus_env.graph)
        costs[e] = torus_env.costs[te]
    return Environment(sq, costs, "square", torus_env.seed, torus_env.dist)


# ---------------------------------------------------------------------------
# Serialization: textual (edge index, cost) table, bit-exact round trip
# ---------------------------------------------------------------------------

def serialize_env(env: Environment) -> str:
    buf = io.StringIO()
    buf.write(f"# {SERIAL_VERSION}\n")
    buf.write(f"kind={env.kind}\n")
    buf.write(f"size={env.size()}\n")
    buf.write(f"seed={env.seed if env.seed is not None else ''}\n")
    buf.write(f"dist={env.dist.spec_string() if env.dist is not None else ''}\n")
    buf.write(f"rng={RNG_VERSION}\n")
    buf.write(f"edges={env.graph.n_edges}\n")
    for e, c in enumerate(env.costs):
        buf.write(f"{e} {float(c)!r}\n")
    return buf.getvalue()


def deserialize_env(text: str) -> Environment:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith(f"# {SERIAL_VERSION}"):
        raise ValueError("not a recognized environment file")
    header: dict[str, str] = {}
    rows: list[tuple[int, float]] = []
    for line in lines[1:]:
        if "=" in line and " " not in line:
            k, _, v = line.partition("=")
            header[k] = v
        elif line:
            e, c = line.split()
            rows.append((int(e), float(c)))
    kind = header["kind"]
    size = int(header["size"])
    graph = Torus(size) if kind == "torus" else ExtendedSquare(size)
    costs = np.zeros(graph.n_edges)
    for e, c in rows:
        costs[e] = c
    seed = int(header["seed"]) if header.get("seed") else None
    dist = CostDistribution.parse(header["dist"]) if header.get("dist") else None
    return Environment(graph, costs, kind, seed, dist)


def env_hash(env: Environment) -> str:
    return hashlib.sha256(serialize_env(env).encode()).hexdigest()


def derive_seed(master: int, *indices: int) -> int:
    """Stable per-replicate seed derived from a master seed and indices."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=tuple(indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
