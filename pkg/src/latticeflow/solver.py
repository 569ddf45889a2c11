"""Convex minimization of the quadratic congestion cost.

Two problems share one conditional-gradient engine:

* the global problem on the N x N torus over standardized flows (constant
  transportation measure N^-3 between every ordered vertex pair) under a
  per-edge volume cap, and
* the local problem across the extended M x M square with a prescribed
  boundary transportation measure.

The linear subproblem decomposes into one shortest-path tree per source,
so every iterate is a convex combination of tree assignments (plus the
uniform minimal-path flow for the global start) and stays standardized by
construction.  The cap is honored by quadratic penalty rounds followed by
an exact repair step (global: mixing with the uniform flow).  The
Frank-Wolfe gap is a true upper bound on suboptimality and the Wardrop
residual is the per-commodity optimality certificate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .environment import Environment, env_hash
from .flow import FlowVolume, cost, uniform_flow, uniform_flow_source_profile, uniform_flow_value
from .lattice import ExtendedSquare, Torus
from .transport import TransportMeasure, marginals

WEIGHT_FLOOR = 1e-15


@dataclass
class SolverConfig:
    """Knobs for the conditional-gradient solver.

    ``away_steps=None`` picks the variant automatically: plain steps for
    the global problem, away steps for the (small, tight-tolerance) local
    problem.  ``capacity_mode`` is ``penalty`` (always penalize overflow)
    or ``ignore-if-slack`` (solve unconstrained first, penalize only if
    the cap is violated).
    """

    cap: float = 0.5
    rel_tol: float = 1e-6
    max_iters: int = 600
    capacity_mode: str = "penalty"
    penalty_initial: float = 10.0
    penalty_growth: float = 10.0
    penalty_rounds: int = 4
    oracle_length_cap: int | None = None
    away_steps: bool | None = None
    track_commodities: bool = True
    violation_tol: float = 1e-4
    size_guard: int = 64

    def validate_global(self, n: int) -> list[str]:
        errors = []
        if self.cap < 0.25:
            errors.append("cap must be at least 1/4 for standardized global flows")
        if self.cap == 0.25 and n % 2 == 1:
            errors.append("cap exactly 1/4 is supported only for even torus sizes")
        if n > self.size_guard:
            errors.append(f"torus size {n} exceeds the size guard {self.size_guard}")
        if self.rel_tol <= 0:
            errors.append("tolerance must be positive")
        return errors


@dataclass
class SolveResult:
    """Solver output: returned flow plus certificates.

    ``objective`` is always an independent recomputation of the quadratic
    cost from the returned volumes.  ``gap`` upper-bounds the
    suboptimality of the returned flow (conditional-gradient gap plus any
    repair cost).  ``max_violation`` is max(0, max volume - cap).
    """

    flow: FlowVolume
    objective: float
    gap: float
    max_violation: float
    wardrop_residual: float | None
    iterations: int
    wall_time: float
    converged: bool
    feasible: bool
    env_hash: str
    config: SolverConfig
    gap_trace: list[float] = field(default_factory=list)
    internals: object | None = None


# ---------------------------------------------------------------------------
# Graph arrays shared by both problems
# ---------------------------------------------------------------------------

class _GraphArrays:
    """CSR scaffolding with per-edge weight scatter and pair->edge lookup."""

    def __init__(self, graph):
        self.graph = graph
        self.n_vertices = graph.n_vertices
        self.n_edges = graph.n_edges
        if isinstance(graph, Torus):
            if graph.n < 3:
                raise ValueError("solver requires torus size at least 3")
            v = np.arange(self.n_vertices)
            heads = np.repeat(v, 4)
            tails = graph.neighbors.ravel()
            eids = graph.edge_of_direction.ravel()
            self.neighbors = graph.neighbors
            self.edge_of = graph.edge_of_direction
        else:
            heads, tails, eids = graph.directed_pairs()
            order = np.lexsort((tails, heads))
            heads, tails, eids = heads[order], tails[order], eids[order]
            self.neighbors = np.full((self.n_vertices, 4), -1, dtype=np.int64)
            self.edge_of = np.full((self.n_vertices, 4), -1, dtype=np.int64)
            fill = np.zeros(self.n_vertices, dtype=np.int64)
            for h, t, e in zip(heads, tails, eids):
                self.neighbors[h, fill[h]] = t
                self.edge_of[h, fill[h]] = e
                fill[h] += 1
        template = coo_matrix(
            (np.arange(len(heads)) + 1, (heads, tails)),
            shape=(self.n_vertices, self.n_vertices),
        ).tocsr()
        self._csr = template
        slot_pair = template.data - 1  # pair index stored in each csr slot
        pair_edge = eids if not isinstance(graph, Torus) else graph.edge_of_direction.ravel()
        self._slot_edge = np.asarray(pair_edge)[slot_pair]

    def csr_with_weights(self, edge_weights: np.ndarray):
        self._csr.data = edge_weights[self._slot_edge].astype(float)
        return self._csr

    def edges_between(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Edge ids for adjacent vertex pairs, vectorized."""
        match = self.neighbors[us] == vs[:, None]
        d = np.argmax(match, axis=1)
        if not match.any(axis=1).all():
            raise ValueError("non-adjacent pair in tree")
        return self.edge_of[us, d]


def _tree_depths(pred: np.ndarray) -> np.ndarray:
    """Depth of each vertex in its shortest-path tree, by pointer doubling."""
    s, v = pred.shape
    jump = np.where(pred < 0, -1, pred).astype(np.int64)
    depth = (jump >= 0).astype(np.int64)
    hop = depth.copy()
    while (jump >= 0).any():
        gathered = np.take_along_axis(hop, np.maximum(jump, 0), axis=1)
        depth = depth + np.where(jump >= 0, gathered, 0)
        jump_next = np.take_along_axis(jump, np.maximum(jump, 0), axis=1)
        jump = np.where(jump >= 0, jump_next, -1)
        hop = depth.copy()
        if depth.max(initial=0) > v:
            raise RuntimeError("cycle detected in predecessor forest")
    return depth


class _Commodities:
    """Demand model: one aggregated commodity per source vertex."""

    def __init__(self, arrays: _GraphArrays, sources: np.ndarray, demands: np.ndarray):
        self.arrays = arrays
        self.sources = sources
        self.demands = demands  # (S, V), nonnegative; diagonal = zero-length
        self.masses = demands.sum(axis=1)
        self.total_mass = float(self.masses.sum())

    def all_or_nothing(self, edge_weights, want_per_source):
        """Route every demand along current shortest paths.

        Returns (volumes, per-source volumes or None, distances).  Mass
        conservation is audited: the full demand of each source must
        accumulate back at the source.
        """
        arrays = self.arrays
        csr = arrays.csr_with_weights(edge_weights)
        dist, pred = dijkstra(csr, directed=True, indices=self.sources,
                              return_predecessors=True)
        depth = _tree_depths(pred)
        order = np.argsort(-depth, axis=1, kind="stable")
        s_count, v_count = pred.shape
        rows = np.arange(s_count)
        acc = self.demands.copy()
        volumes = np.zeros(arrays.n_edges)
        per_source = np.zeros((s_count, arrays.n_edges)) if want_per_source else None
        for pos in range(v_count):
            v = order[:, pos]
            pr = pred[rows, v]
            valid = pr >= 0
            if not valid.any():
                continue
            rv, vv, pv = rows[valid], v[valid], pr[valid]
            mass = acc[rv, vv]
            eids = arrays.edges_between(pv, vv)
            np.add.at(volumes, eids, mass)
            if per_source is not None:
                np.add.at(per_source, (rv, eids), mass)
            acc[rv, pv] += mass
        back = acc[rows, self.sources]
        if not np.allclose(back, self.masses, rtol=1e-12, atol=1e-15):
            raise RuntimeError("demand accounting leak in tree assignment")
        return volumes, per_source, dist

    def best_cost(self, dist: np.ndarray) -> np.ndarray:
        """Cheapest possible routing cost per source at given distances."""
        return (self.demands * np.where(np.isfinite(dist), dist, 0.0)).sum(axis=1)


# ---------------------------------------------------------------------------
# Conditional-gradient engine
# ---------------------------------------------------------------------------

class _Atom:
    __slots__ = ("volumes", "per_source", "weight")

    def __init__(self, volumes, per_source, weight):
        self.volumes = volumes
        self.per_source = per_source
        self.weight = weight


class _Engine:
    def __init__(self, arrays, commodities, env, cfg: SolverConfig, use_away: bool,
                 start_volumes, start_per_source):
        self.arrays = arrays
        self.com = commodities
        self.costs = env.costs
        self.cfg = cfg
        self.use_away = use_away
        self.f = start_volumes.copy()
        self.fs = start_per_source.copy() if start_per_source is not None else None
        self.atoms = [_Atom(start_volumes.copy(),
                            None if start_per_source is None else start_per_source.copy(),
                            1.0)] if use_away else []
        self.iterations = 0
        self.gap_trace: list[float] = []
        self.last_dist = None

    # objective pieces -------------------------------------------------
    def _penalty_excess(self, f):
        return np.maximum(0.0, f - self.cfg.cap)

    def objective(self, f, w):
        pen = self._penalty_excess(f)
        return float(np.dot(self.costs, f * f) + w * np.dot(pen, pen))

    def gradient(self, f, w):
        return 2.0 * self.costs * f + 2.0 * w * self._penalty_excess(f)

    def _line_search(self, f, d, w, lam_max):
        """Exact minimization of the convex penalized objective on [0, lam_max]."""

        def deriv(lam):
            x = f + lam * d
            return float(np.dot(2.0 * self.costs * x + 2.0 * w * self._penalty_excess(x), d))

        if deriv(lam_max) <= 0:
            return lam_max
        lo, hi = 0.0, lam_max
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            if deriv(mid) <= 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def _apply_fw_step(self, lam, phi, phi_s):
        self.f = (1 - lam) * self.f + lam * phi
        if self.fs is not None:
            self.fs *= 1 - lam
            self.fs += lam * phi_s
        if self.use_away:
            for a in self.atoms:
                a.weight *= 1 - lam
            self.atoms.append(_Atom(phi, phi_s, lam))
            self._prune_atoms()

    def _apply_away_step(self, lam, atom):
        self.f = (1 + lam) * self.f - lam * atom.volumes
        np.maximum(self.f, 0.0, out=self.f)
        if self.fs is not None:
            self.fs *= 1 + lam
            self.fs -= lam * atom.per_source
            np.maximum(self.fs, 0.0, out=self.fs)
        for a in self.atoms:
            a.weight *= 1 + lam
        atom.weight -= lam
        self._prune_atoms()

    def _prune_atoms(self):
        self.atoms = [a for a in self.atoms if a.weight > 1e-14]
        total = sum(a.weight for a in self.atoms)
        if abs(total - 1.0) > 1e-9:
            for a in self.atoms:
                a.weight /= total

    def run_round(self, w, max_iters):
        track = self.fs is not None
        for _ in range(max_iters):
            g = self.gradient(self.f, w)
            weights = np.maximum(g, WEIGHT_FLOOR)
            phi, phi_s, dist = self.com.all_or_nothing(weights, track)
            self.last_dist = dist
            gap = float(np.dot(g, self.f - phi))
            self.gap_trace.append(gap)
            self.iterations += 1
            obj = self.objective(self.f, w)
            if gap <= self.cfg.rel_tol * max(abs(obj), 1e-12):
                return True
            d_fw = phi - self.f
            use_away = False
            if self.use_away and self.atoms:
                away = max(self.atoms, key=lambda a: float(np.dot(g, a.volumes)))
                d_aw = self.f - away.volumes
                if float(np.dot(g, d_aw)) < float(np.dot(g, d_fw)) and away.weight < 1.0:
                    use_away = True
            if use_away:
                lam_max = away.weight / (1.0 - away.weight)
                lam = self._line_search(self.f, d_aw, w, lam_max)
                if lam <= 0:
                    use_away = False
                else:
                    self._apply_away_step(lam, away)
            if not use_away:
                lam = self._line_search(self.f, d_fw, w, 1.0)
                if lam <= 0:
                    return True
                self._apply_fw_step(lam, phi, phi_s)
        return False

    def solve(self):
        cfg = self.cfg
        converged = True
        final_gap = 0.0
        if cfg.capacity_mode == "ignore-if-slack":
            converged = self.run_round(0.0, cfg.max_iters)
            final_gap = self.gap_trace[-1] if self.gap_trace else 0.0
            if self.f.max(initial=0.0) <= cfg.cap + cfg.violation_tol:
                return converged, final_gap
        for r in range(cfg.penalty_rounds):
            w = cfg.penalty_initial * cfg.penalty_growth ** r
            violation = float(np.maximum(self.f - cfg.cap, 0.0).max(initial=0.0))
            if r > 0 and violation <= cfg.violation_tol:
                break
            converged = self.run_round(w, cfg.max_iters)
            final_gap = self.gap_trace[-1] if self.gap_trace else 0.0
        return converged, final_gap


# ---------------------------------------------------------------------------
# Wardrop residual
# ---------------------------------------------------------------------------

@dataclass
class _Internals:
    arrays: _GraphArrays
    commodities: _Commodities
    per_source: np.ndarray | None


def wardrop_residual(result: SolveResult, env: Environment, commodities=None) -> float:
    """Max over source commodities of (used marginal cost - cheapest), per unit mass.

    Marginal edge weight is 2 c(e) f(e) at the returned flow (the penalty
    gradient vanishes once the cap holds).  Requires the solve to have
    retained its per-commodity decomposition.
    """
    internals: _Internals = commodities or result.internals
    if internals is None or internals.per_source is None:
        raise ValueError("solve was run without commodity tracking")
    com = internals.commodities
    g = 2.0 * env.costs * result.flow.volumes
    weights = np.maximum(g, WEIGHT_FLOOR)
    csr = internals.arrays.csr_with_weights(weights)
    dist = dijkstra(csr, directed=True, indices=com.sources)
    used = internals.per_source @ g
    best = com.best_cost(dist)
    masses = np.maximum(com.masses, 1e-300)
    return float(np.max((used - best) / masses, initial=0.0))


# ---------------------------------------------------------------------------
# Global problem
# ---------------------------------------------------------------------------

def _uniform_per_source(n: int, torus: Torus) -> np.ndarray:
    rho_h, rho_v = uniform_flow_source_profile(n)
    s_count = torus.n_vertices
    out = np.zeros((s_count, torus.n_edges))
    for s in range(s_count):
        si, sj = s % n, s // n
        out[s, : n * n] = np.roll(rho_h, (sj, si), axis=(0, 1)).ravel()
        out[s, n * n:] = np.roll(rho_v, (sj, si), axis=(0, 1)).ravel()
    return out


def solve_global(n: int, env: Environment, cfg: SolverConfig) -> SolveResult:
    """Minimum-cost standardized global flow on the N x N torus under a cap.

    Every iterate is standardized by construction: the start is the
    uniform minimal-path flow and every step mixes in per-source
    shortest-path tree assignments routing exactly n^-3 to each
    destination.  If the final volumes exceed the cap they are repaired by
    mixing with the uniform flow, which raises the cost by a bounded,
    reported amount folded into ``gap``.
    """
    errors = cfg.validate_global(n)
    if errors:
        raise ValueError("; ".join(errors))
    if env.kind != "torus" or env.graph.n != n:
        raise ValueError("environment does not match the requested torus")
    t0 = time.perf_counter()
    torus = env.graph
    ehash = env_hash(env)

    if cfg.cap == 0.25:
        # the feasible set collapses to the uniform minimal-path flow
        f = uniform_flow(n, torus)
        obj = cost(f, env)
        return SolveResult(f, obj, 0.0, 0.0, None, 0, time.perf_counter() - t0,
                           True, True, ehash, cfg)

    arrays = _GraphArrays(torus)
    sources = np.arange(torus.n_vertices)
    demands = np.full((torus.n_vertices, torus.n_vertices), float(n) ** -3)
    com = _Commodities(arrays, sources, demands)

    start = uniform_flow(n, torus).volumes
    start_s = _uniform_per_source(n, torus) if cfg.track_commodities else None
    use_away = cfg.away_steps if cfg.away_steps is not None else False
    engine = _Engine(arrays, com, env, cfg, use_away, start, start_s)
    converged, gap = engine.solve()

    f = engine.f
    repair_delta = 0.0
    vmax = float(f.max(initial=0.0))
    if vmax > cfg.cap:
        # blend with the uniform flow: (1 - lam) vmax + lam/4 = cap exactly
        lam = (vmax - cfg.cap) / (vmax - 0.25)
        pre = float(np.dot(env.costs, f * f))
        f = (1 - lam) * f + lam * uniform_flow_value(n)
        repair_delta = float(np.dot(env.costs, f * f)) - pre
        if engine.fs is not None:
            engine.fs *= 1 - lam
            engine.fs += lam * _uniform_per_source(n, torus)
    flow = FlowVolume(torus, f, {"standardized": True, "constant_tra": float(n) ** -3})
    violation = float(np.maximum(f - cfg.cap, 0.0).max(initial=0.0))
    internals = _Internals(arrays, com, engine.fs)
    result = SolveResult(
        flow,
        cost(flow, env),
        gap + max(repair_delta, 0.0),
        violation,
        None,
        engine.iterations,
        time.perf_counter() - t0,
        converged,
        violation <= cfg.violation_tol,
        ehash,
        cfg,
        engine.gap_trace,
        internals,
    )
    if cfg.track_commodities:
        result.wardrop_residual = wardrop_residual(result, env)
    return result


# ---------------------------------------------------------------------------
# Local problem
# ---------------------------------------------------------------------------

def local_feasibility_probe(Q: TransportMeasure, cap: float) -> bool:
    """Sufficient condition: the via-interior router bound fits under the cap."""
    ent, exi = marginals(Q)
    return 2.0 * (float(ent.max(initial=0.0)) + float(exi.max(initial=0.0))) <= cap


def solve_local(m: int, env: Environment, Q: TransportMeasure, cfg: SolverConfig) -> SolveResult:
    """Cheapest flow across the extended square realizing a boundary measure.

    Commodities are the entrance boundary points; every iterate routes
    exactly Q(b, b') from b to b', so the transportation measure is
    preserved throughout.  Diagonal entries ride zero-length paths and use
    no edges.  There is no repair mixture for the local problem: residual
    cap violation is reported and flags the result infeasible.
    """
    if env.kind != "square" or env.graph.m != m:
        raise ValueError("environment does not match the requested square")
    if Q.m != m:
        raise ValueError("transportation measure does not match the square size")
    t0 = time.perf_counter()
    sq: ExtendedSquare = env.graph
    ehash = env_hash(env)

    ent, _ = marginals(Q)
    src_bidx = np.nonzero(ent > 0)[0]
    if len(src_bidx) == 0:
        flow = FlowVolume(sq, np.zeros(sq.n_edges))
        return SolveResult(flow, 0.0, 0.0, 0.0, 0.0, 0, time.perf_counter() - t0,
                           True, True, ehash, cfg)

    arrays = _GraphArrays(sq)
    sources = np.array([sq.boundary_vertex(int(b)) for b in src_bidx])
    demands = np.zeros((len(sources), sq.n_vertices))
    for row, b in enumerate(src_bidx):
        for b2 in range(4 * m):
            mass = Q.q[b, b2]
            if mass > 0:
                demands[row, sq.boundary_vertex(b2)] = mass
    com = _Commodities(arrays, sources, demands)

    # cost-aware all-or-nothing start; tra equals Q for every atom
    start, start_s, _ = com.all_or_nothing(
        np.maximum(env.costs, WEIGHT_FLOOR), cfg.track_commodities
    )
    use_away = cfg.away_steps if cfg.away_steps is not None else True
    engine = _Engine(arrays, com, env, cfg, use_away, start, start_s)
    converged, gap = engine.solve()

    flow = FlowVolume(sq, engine.f)
    violation = float(np.maximum(engine.f - cfg.cap, 0.0).max(initial=0.0))
    internals = _Internals(arrays, com, engine.fs)
    result = SolveResult(
        flow,
        cost(flow, env),
        gap,
        violation,
        None,
        engine.iterations,
        time.perf_counter() - t0,
        converged,
        violation <= max(cfg.violation_tol, 1e-9 * max(cfg.cap, 1.0)),
        ehash,
        cfg,
        engine.gap_trace,
        internals,
    )
    if cfg.track_commodities:
        result.wardrop_residual = wardrop_residual(result, env)
    return result


# ---------------------------------------------------------------------------
# Independent oracle: exhaustive path enumeration + projected gradient
# ---------------------------------------------------------------------------

def _enumerate_simple_paths(sq: ExtendedSquare, b_from: int, b_to: int,
                            length_cap: int, budget: list[int]) -> list[tuple[int, ...]]:
    """All simple boundary-to-boundary paths with at most length_cap edges.

    Boundary points have degree one, so intermediates are internal and a
    crossing path is two half-edges around a simple internal path.
    """
    start = sq.boundary_vertex(b_from)
    goal = sq.boundary_vertex(b_to)
    first = sq.neighbors_of(start)[0]
    last = sq.neighbors_of(goal)[0]
    paths: list[tuple[int, ...]] = []

    def dfs(v, trail, visited):
        internal_edges = len(trail) - 1
        if v == last and internal_edges + 2 <= length_cap:
            paths.append((start, *trail, goal))
            budget[0] -= 1
            if budget[0] <= 0:
                raise RuntimeError("path enumeration budget exceeded")
        if internal_edges + 3 > length_cap:
            return
        for u in sq.neighbors_of(v):
            if not sq.is_boundary_vertex(u) and u not in visited:
                dfs(u, trail + [u], visited | {u})

    dfs(first, [first], {first})
    return paths


def _project_simplex(y: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total}."""
    if total <= 0:
        return np.zeros_like(y)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, len(y) + 1)
    cond = u - css / ks > 0
    rho = np.max(np.nonzero(cond)[0]) + 1
    tau = css[rho - 1] / rho
    return np.maximum(y - tau, 0.0)


def brute_force_local(m: int, env: Environment, Q: TransportMeasure, cap: float,
                      length_cap: int | None = None, tol: float = 1e-8,
                      max_iters: int = 200_000, path_budget: int = 200_000) -> SolveResult:
    """Ground-truth local solve for tiny squares by full path enumeration.

    Enumerates every simple crossing path per commodity and minimizes the
    exact quadratic objective over path weights by projected gradient with
    a fixed 1/L step, projecting each commodity onto its scaled simplex.
    Serves as the independent oracle for solve_local.
    """
    if m > 3:
        raise ValueError("the enumeration oracle is limited to squares of size <= 3")
    if env.kind != "square" or env.graph.m != m:
        raise ValueError("environment does not match the requested square")
    t0 = time.perf_counter()
    sq: ExtendedSquare = env.graph
    if length_cap is None:
        length_cap = m * m + 3
    budget = [path_budget]

    pairs = [(i, j) for i in range(4 * m) for j in range(4 * m)
             if Q.q[i, j] > 0 and i != j]
    groups: list[slice] = []
    all_paths: list[tuple[int, ...]] = []
    for (i, j) in pairs:
        paths = _enumerate_simple_paths(sq, i, j, length_cap, budget)
        if not paths:
            raise RuntimeError(f"no admissible path for pair ({i}, {j}) under length cap")
        groups.append(slice(len(all_paths), len(all_paths) + len(paths)))
        all_paths.extend(paths)

    n_paths = len(all_paths)
    if n_paths == 0:
        flow = FlowVolume(sq, np.zeros(sq.n_edges))
        return SolveResult(flow, 0.0, 0.0, 0.0, 0.0, 0, time.perf_counter() - t0,
                           True, True, env_hash(env), SolverConfig(cap=cap))
    incidence = np.zeros((n_paths, sq.n_edges))
    for p, path in enumerate(all_paths):
        for a, b in zip(path, path[1:]):
            incidence[p, sq.edge_index(a, b)] += 1.0

    quotas = np.array([Q.q[i, j] for (i, j) in pairs])
    x = np.zeros(n_paths)
    for sl, quota in zip(groups, quotas):
        x[sl] = quota / (sl.stop - sl.start)

    C = env.costs
    H = 2.0 * incidence @ (C[:, None] * incidence.T)
    base_L = float(np.linalg.eigvalsh(H).max()) if n_paths else 1.0
    AAt = incidence @ incidence.T
    pen_L = float(np.linalg.eigvalsh(AAt).max()) if n_paths else 1.0

    def project(y):
        out = np.empty_like(y)
        for sl, quota in zip(groups, quotas):
            out[sl] = _project_simplex(y[sl], quota)
        return out

    def objective_at(x, w):
        f = incidence.T @ x
        excess = np.maximum(0.0, f - cap)
        return float(np.dot(C, f * f) + w * np.dot(excess, excess))

    def solve_at(w, x):
        # accelerated projected gradient with restart on non-monotone steps
        L = base_L + 2.0 * w * pen_L + 1e-12
        y = x.copy()
        t_mom = 1.0
        best_obj = objective_at(x, w)
        for _ in range(max_iters):
            f = incidence.T @ y
            grad_x = incidence @ (2.0 * C * f + 2.0 * w * np.maximum(0.0, f - cap))
            x_new = project(y - grad_x / L)
            obj_new = objective_at(x_new, w)
            if obj_new > best_obj:
                # restart momentum from the last good point
                y = x.copy()
                t_mom = 1.0
                f = incidence.T @ y
                grad_x = incidence @ (2.0 * C * f + 2.0 * w * np.maximum(0.0, f - cap))
                x_new = project(y - grad_x / L)
                obj_new = objective_at(x_new, w)
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            y = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            move = float(np.abs(x_new - x).max(initial=0.0))
            converged = (move <= tol * max(1.0, float(np.abs(x_new).max(initial=0.0)))
                         and best_obj - obj_new <= tol * max(obj_new, 1e-12))
            x, t_mom = x_new, t_next
            best_obj = min(best_obj, obj_new)
            if converged:
                break
        return x

    x = solve_at(0.0, x)
    f = incidence.T @ x
    w = 0.0
    if f.max(initial=0.0) > cap + 1e-9:
        for w in [10.0 * 10.0 ** r for r in range(6)]:
            x = solve_at(w, x)
            f = incidence.T @ x
            if f.max(initial=0.0) <= cap + 1e-7:
                break

    flow = FlowVolume(sq, f)
    grad_x = incidence @ (2.0 * C * f + 2.0 * w * np.maximum(0.0, f - cap))
    gap = 0.0
    for sl, quota in zip(groups, quotas):
        gap += float(np.dot(grad_x[sl], x[sl]) - quota * grad_x[sl].min())
    violation = float(np.maximum(f - cap, 0.0).max(initial=0.0))
    obj = cost(flow, env)
    result = SolveResult(flow, obj, gap, violation, None, 0,
                         time.perf_counter() - t0, True,
                         violation <= 1e-7 * max(1.0, cap), env_hash(env),
                         SolverConfig(cap=cap))
    result.internals = (x, groups, pairs, all_paths)
    return result
