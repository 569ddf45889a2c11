"""Constructive pipeline from local transportation measures to global flows.

A compatible boundary measure drives a Markov walk on the directed
inter-square boundary states of the torus partition.  Its stationary law
is proportional to the entrance marginal at the walk's relative position,
the per-square step measure reproduces the driving measure exactly, and
the projected walk on the standard square's boundary obeys a law of large
numbers whose limit is the drift.  Assembly expands each walk step into
the environment-optimal local flow, patches the ends so the transportation
measure becomes exactly constant, and repairs the volume cap by blending
with the uniform minimal-path flow.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .environment import Environment, restrict_env
from .flow import FlowVolume, cost, flo, uniform_flow_value
from .lattice import (
    ExtendedSquare,
    SkeletonSpace,
    Torus,
    boundary_coord_array,
    reflect_permutation,
    require_divides,
    square_corner,
    torus_edge_of_square_edge,
)
from .routing import neighborhood_mix_edge_volume, route_to_uniform_interior
from .solver import SolveResult, SolverConfig, solve_local
from .transport import (
    IsotropicMixture,
    TransportMeasure,
    drift,
    drift_measure,
    in_qm,
    isotropic_grid,
    marginals,
)


# ---------------------------------------------------------------------------
# Skeleton chain
# ---------------------------------------------------------------------------

@dataclass
class SkeletonChain:
    """Walk on directed boundary states driven by a compatible measure.

    ``pi`` is the stationary law: entrance mass of the relative position
    over the normalization (N/M)^2 q_bar.  ``t`` is the step count
    N q_bar / M^2, realized as a floor/ceil mixture when fractional.
    """

    n: int
    m: int
    measure: TransportMeasure
    space: SkeletonSpace
    transition: csr_matrix
    pi: np.ndarray
    q_bar: float
    t: float

    @property
    def t_parts(self) -> tuple[int, int, float]:
        """(floor, ceil, weight on floor) realizing the expected step count."""
        lo = int(np.floor(self.t))
        hi = int(np.ceil(self.t))
        alpha = 1.0 if hi == lo else hi - self.t
        return lo, hi, alpha


def conditional_rows(Q: TransportMeasure) -> np.ndarray:
    """Row-normalized measure: transition from entrance to exit positions."""
    ent, _ = marginals(Q)
    rows = np.zeros_like(Q.q)
    nz = ent > 0
    rows[nz] = Q.q[nz] / ent[nz, None]
    return rows


def build_chain(Q: TransportMeasure, n: int, m: int, tol: float = 1e-8) -> SkeletonChain:
    """Build the boundary walk of a compatible measure on the (n, m) partition."""
    require_divides(m, n)
    if Q.m != m:
        raise ValueError("measure size does not match the partition")
    if Q.total_mass <= 0:
        raise ValueError("measure must carry positive mass")
    if not in_qm(Q, tol * max(1.0, Q.total_mass)):
        raise ValueError("measure is not compatible (reflected exit != entrance)")
    space = SkeletonSpace(n, m)
    ent, _ = marginals(Q)
    qbar = Q.total_mass
    q_norm = (n // m) ** 2 * qbar
    rows_rel = conditional_rows(Q)

    pro = np.array([space.pro(s) for s in range(space.n_states)])
    pi = ent[pro] / q_norm

    heads, tails, probs = [], [], []
    for s in range(space.n_states):
        b0 = pro[s]
        if ent[b0] <= 0:
            continue
        corner = space.entered_corner(s)
        for b1 in np.nonzero(rows_rel[b0])[0]:
            heads.append(s)
            tails.append(space.state_at_exit(corner, int(b1)))
            probs.append(rows_rel[b0, b1])
    transition = csr_matrix(
        (probs, (heads, tails)), shape=(space.n_states, space.n_states)
    )
    t = n * qbar / m ** 2
    return SkeletonChain(n, m, Q, space, transition, pi, qbar, t)


def stationarity_error(chain: SkeletonChain) -> float:
    """L1 distance between pi P and pi."""
    return float(np.abs(chain.transition.T @ chain.pi - chain.pi).sum())


# ---------------------------------------------------------------------------
# Projection chain on the standard square's boundary
# ---------------------------------------------------------------------------

@dataclass
class ProjectionChain:
    """Relative-position walk: from entrance position to the reflected exit."""

    m: int
    matrix: np.ndarray
    pi_star: np.ndarray

    def is_irreducible(self) -> bool:
        """Strong connectivity of the support over all 4m states."""
        support = csr_matrix((self.matrix > 0).astype(np.int8))
        count, _ = connected_components(support, directed=True, connection="strong")
        return count == 1


def projection(chain: SkeletonChain) -> ProjectionChain:
    m = chain.m
    rows_rel = conditional_rows(chain.measure)
    perm = reflect_permutation(m)
    matrix = rows_rel[:, perm]
    ent, _ = marginals(chain.measure)
    pi_star = ent / ent.sum()
    return ProjectionChain(m, matrix, pi_star)


def repair_measure(Q: TransportMeasure, eps: float,
                   support_mass: float | None = None) -> TransportMeasure:
    """Mix a measure with a same-drift irreducible representative.

    (1 - eps) Q + eps Q'(drift(Q)) keeps the drift exactly and makes the
    projected walk irreducible for any eps > 0.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    kwargs = {} if support_mass is None else {"support_mass": support_mass}
    rep = drift_measure(Q.m, drift(Q), **kwargs)
    return TransportMeasure(Q.m, (1 - eps) * Q.q + eps * rep.q)


def repair_mixture(mix: IsotropicMixture, eps: float) -> IsotropicMixture:
    comps = [repair_measure(c, eps) for c in mix.components]
    return replace(mix, components=comps)


def mean_drift_formula_check(chain: SkeletonChain) -> tuple[np.ndarray, np.ndarray]:
    """Mean step displacement two ways: stationary average and drift formula.

    Returns (sum over pairs of pi*(b) P*(b, b') g(b, b'),
    m^2 drift(Q) / q_bar); the two must agree to floating precision.
    """
    proj = projection(chain)
    coords = boundary_coord_array(chain.m)
    perm = reflect_permutation(chain.m)
    g = coords[perm][None, :, :] - coords[:, None, :]
    empirical = (proj.pi_star[:, None, None] * proj.matrix[:, :, None] * g).sum(axis=(0, 1))
    formula = chain.m ** 2 * drift(chain.measure) / chain.q_bar
    return empirical, formula


# ---------------------------------------------------------------------------
# Walk simulation and the drift law of large numbers
# ---------------------------------------------------------------------------

@dataclass
class DriftCheck:
    empirical: np.ndarray
    target: np.ndarray
    l1_error: float
    steps: int
    replicas: int


def drift_lln_check(chain: SkeletonChain, replicas: int = 100, seed: int = 0,
                    steps: int | None = None) -> DriftCheck:
    """Simulate the projected walk and compare N^-1 (Y_t - Y_0) to the drift.

    The plane displacement of the full walk telescopes into increments
    reflect(X_s) - X_{s-1} of the projected walk, so the small projected
    chain suffices for the law-of-large-numbers check.
    """
    proj = projection(chain)
    if not proj.is_irreducible():
        raise ValueError("projected walk is reducible; repair the measure first")
    m, n = chain.m, chain.n
    coords = boundary_coord_array(m)
    perm = reflect_permutation(m)
    g = coords[perm][None, :, :] - coords[:, None, :]  # increment for (b0 -> b1)
    cum = np.cumsum(proj.matrix, axis=1)
    cum[:, -1] = 1.0
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2 ** 64 - 1))))
    lo, hi, alpha = chain.t_parts
    disp = np.zeros((replicas, 2))
    state = rng.choice(4 * m, size=replicas, p=proj.pi_star / proj.pi_star.sum())
    if steps is None:
        t_choice = np.where(rng.random(replicas) < alpha, lo, hi)
    else:
        t_choice = np.full(replicas, steps)
    for s in range(int(t_choice.max(initial=0))):
        active = t_choice > s
        if not active.any():
            break
        u = rng.random(int(active.sum()))
        rows = cum[state[active]]
        nxt = (u[:, None] < rows).argmax(axis=1)
        disp[active] += g[state[active], nxt]
        state[active] = nxt
    empirical = disp.mean(axis=0) / n
    target = drift(chain.measure)
    return DriftCheck(empirical, target, float(np.abs(empirical - target).sum()),
                      int(t_choice.max(initial=0)), replicas)


def walk_projection_audit(chain: SkeletonChain, steps: int, seed: int = 0,
                          replicas: int = 50) -> dict:
    """Simulate the full walk; audit the projection identity.

    Runs several stationary-start trajectories and checks that (i) the
    projected states step with the projection matrix's statistics and
    (ii) every trajectory's plane displacement equals the sum of projected
    increments modulo the torus.
    """
    space = chain.space
    trans = chain.transition.tocsr()
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2 ** 64 - 1))))
    pi = chain.pi / chain.pi.sum()
    m = chain.m
    coords = boundary_coord_array(m)
    perm = reflect_permutation(m)
    counts = np.zeros((4 * m, 4 * m))
    worst_wrap = 0.0
    for r in range(replicas):
        state = int(rng.choice(space.n_states, p=pi))
        increments = np.zeros(2)
        start_xy = np.array(space.point_coords(space.state_point(state)))
        for _ in range(steps):
            row = trans.getrow(state)
            nxt = int(rng.choice(row.indices, p=row.data / row.data.sum()))
            b0 = space.pro(state)
            b1 = space.pro(nxt)
            counts[b0, b1] += 1
            increments += coords[perm[b1]] - coords[b0]
            state = nxt
        end_xy = np.array(space.point_coords(space.state_point(state)))
        wrap = np.abs(np.mod(start_xy + increments - end_xy, chain.n))
        wrap = np.minimum(wrap, chain.n - wrap)
        worst_wrap = max(worst_wrap, float(wrap.max()))
    proj = projection(chain)
    freq = counts / max(counts.sum(), 1.0)
    expected = proj.pi_star[:, None] * proj.matrix
    return {
        "projected_transition_l1": float(np.abs(freq - expected).sum()),
        "displacement_wrap_error": worst_wrap,
        "steps": steps,
        "replicas": replicas,
    }


# ---------------------------------------------------------------------------
# Exact and Monte Carlo skeleton measures
# ---------------------------------------------------------------------------

@dataclass
class SkeletonMeasure:
    """Step measure and endpoint law of the mixture walk.

    ``nu_square`` is the per-square step measure relative to the standard
    square; it must reproduce the mixture mean measure.  ``theta`` is the
    endpoint pair law over partition boundary points, total mass N.
    """

    n: int
    m: int
    nu_square: np.ndarray
    theta: np.ndarray
    mode: str
    diagnostics: dict = field(default_factory=dict)


def _component_chains(mixture: IsotropicMixture, n: int, m: int) -> list[SkeletonChain]:
    chains = []
    for comp in mixture.components:
        chain = build_chain(comp, n, m)
        if not projection(chain).is_irreducible():
            raise ValueError("mixture component is reducible; repair it first")
        chains.append(chain)
    return chains


def skeleton_measure(mixture: IsotropicMixture, n: int, m: int, mode: str = "exact",
                     samples: int = 20_000, seed: int = 0,
                     op_budget: float = 2e8) -> SkeletonMeasure:
    """Aggregate step measure and endpoint law of the mixture's walks."""
    chains = _component_chains(mixture, n, m)
    space = chains[0].space
    if mode == "exact":
        steps_bound = max(ch.t_parts[1] for ch in chains)
        est_ops = len(chains) * max(steps_bound, 1) * float(space.n_states) ** 2
        if est_ops > op_budget:
            raise ValueError(
                f"exact mode needs about {est_ops:.2e} operations, over the"
                f" {op_budget:.0e} budget; use monte_carlo mode"
            )
        return _skeleton_exact(mixture, chains, space)
    if mode == "monte_carlo":
        return _skeleton_monte_carlo(mixture, chains, space, samples, seed)
    raise ValueError(f"unknown mode {mode!r}")


def _square_zero_states(space: SkeletonSpace) -> np.ndarray:
    """States entering the square at the origin."""
    return np.array([s for s in range(space.n_states)
                     if space.entered_corner(s) == (0, 0)])


def _skeleton_exact(mixture, chains, space) -> SkeletonMeasure:
    n, m = chains[0].n, chains[0].m
    pro = np.array([space.pro(s) for s in range(space.n_states)])
    points = np.array([space.state_point(s) for s in range(space.n_states)])
    nu_square = np.zeros((4 * m, 4 * m))
    theta = np.zeros((space.n_points, space.n_points))
    sq0 = _square_zero_states(space)
    for w, chain in zip(mixture.weights, chains):
        lo, hi, alpha = chain.t_parts
        rows_rel = conditional_rows(chain.measure)
        # per-square step measure: evolve the state law, crediting each step
        p = chain.pi.copy()
        for s in range(hi):
            step_weight = 1.0 if s < lo else (1.0 - alpha)
            if step_weight > 0:
                mass0 = p[sq0]
                nu_square += n * w * step_weight * (mass0[:, None] * rows_rel[pro[sq0]])
            p = chain.transition.T @ p
        # endpoint pair law: evolve the identity kernel from every state
        kernel = np.eye(space.n_states)
        k_lo = kernel if lo == 0 else None
        for s in range(hi):
            kernel = (chain.transition.T @ kernel.T).T
            if s + 1 == lo:
                k_lo = kernel.copy()
        if k_lo is None:
            k_lo = kernel
        mixed = alpha * k_lo + (1 - alpha) * kernel
        pair_states = (n * w * chain.pi)[:, None] * mixed
        np.add.at(theta, (points[:, None], points[None, :]), pair_states)
    diag = _theta_diagnostics(theta, space, n)
    return SkeletonMeasure(n, m, nu_square, theta, "exact", diag)


def _skeleton_monte_carlo(mixture, chains, space, samples, seed) -> SkeletonMeasure:
    n, m = chains[0].n, chains[0].m
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2 ** 64 - 1))))
    pro = np.array([space.pro(s) for s in range(space.n_states)])
    points = np.array([space.state_point(s) for s in range(space.n_states)])
    corner0 = np.array([space.entered_corner(s) == (0, 0)
                        for s in range(space.n_states)])
    perm = reflect_permutation(m)
    nu_square = np.zeros((4 * m, 4 * m))
    theta = np.zeros((space.n_points, space.n_points))
    weights = np.array(mixture.weights)
    comp_choice = rng.choice(len(chains), size=samples, p=weights)
    for ci, chain in enumerate(chains):
        reps = int((comp_choice == ci).sum())
        if reps == 0:
            continue
        trans = chain.transition.tocsr()
        rows = [(trans.indices[trans.indptr[s]:trans.indptr[s + 1]],
                 trans.data[trans.indptr[s]:trans.indptr[s + 1]])
                for s in range(space.n_states)]
        lo, hi, alpha = chain.t_parts
        pi = chain.pi / chain.pi.sum()
        states = rng.choice(space.n_states, size=reps, p=pi)
        t_choice = np.where(rng.random(reps) < alpha, lo, hi)
        for r in range(reps):
            cur = int(states[r])
            for _ in range(int(t_choice[r])):
                targets, probs = rows[cur]
                nxt = int(rng.choice(targets, p=probs / probs.sum()))
                if corner0[cur]:
                    b1 = int(perm[pro[nxt]])
                    nu_square[pro[cur], b1] += 1.0
                cur = nxt
            theta[points[states[r]], points[cur]] += 1.0
    theta *= n / samples
    nu_square *= n / samples
    diag = _theta_diagnostics(theta, space, n)
    diag["samples"] = samples
    return SkeletonMeasure(n, m, nu_square, theta, "monte_carlo", diag)


def _theta_diagnostics(theta: np.ndarray, space: SkeletonSpace, n: int,
                       cells: int = 4) -> dict:
    p_count = space.n_points
    uniform = 1.0 / (p_count * p_count)
    tv = 0.5 * float(np.abs(theta / max(theta.sum(), 1e-300) - uniform).sum())
    # coarse-grained pair law on a fixed cells x cells grid of the unit
    # torus; its distance to uniform tracks weak convergence across sizes
    cell_of = np.empty(p_count, dtype=np.int64)
    for p in range(p_count):
        x, y = space.point_coords(p)
        cx = int((x % n) * cells / n) % cells
        cy = int((y % n) * cells / n) % cells
        cell_of[p] = cy * cells + cx
    coarse = np.zeros((cells * cells, cells * cells))
    np.add.at(coarse, (cell_of[:, None], cell_of[None, :]), theta)
    coarse /= max(coarse.sum(), 1e-300)
    tv_cells = 0.5 * float(np.abs(coarse - 1.0 / coarse.size).sum())
    ent = theta.sum(axis=1)
    exi = theta.sum(axis=0)
    perm_m = np.array([space.translate_point(p, space.m, 0) for p in range(p_count)])
    perm_mv = np.array([space.translate_point(p, 0, space.m) for p in range(p_count)])
    shift_err = float(np.abs(theta[np.ix_(perm_m, perm_m)] - theta).max(initial=0.0))
    shift_err_v = float(np.abs(theta[np.ix_(perm_mv, perm_mv)] - theta).max(initial=0.0))
    return {
        "total_mass": float(theta.sum()),
        "tv_to_uniform_pairs": tv,
        "tv_to_uniform_cells": tv_cells,
        "ent_exi_l1": float(np.abs(ent - exi).sum()),
        "translation_invariance_max_abs": max(shift_err, shift_err_v),
    }


def properties_check(sk: SkeletonMeasure) -> dict:
    """Endpoint-law certificate: total mass N, shift invariance, equal marginals."""
    d = dict(sk.diagnostics)
    d["mass_error"] = abs(d["total_mass"] - sk.n)
    return d


# ---------------------------------------------------------------------------
# Global assembly
# ---------------------------------------------------------------------------

@dataclass
class AssembleResult:
    flow: FlowVolume
    cost: float
    target: float
    scale: float
    correction_mass: float
    repair_lambda: float
    tra_audit: float
    local_summary: dict
    diagnostics: dict
    wall_time: float


def _staircase_edges(n: int, dx: int, dy: int) -> list[tuple[int, int, int]]:
    """(axis, ox, oy) edge offsets of the canonical staircase for a displacement."""
    out = []
    sx = 1 if dx >= 0 else -1
    for k in range(abs(dx)):
        ox = k if sx > 0 else -k - 1
        out.append((0, ox % n, 0))
    sy = 1 if dy >= 0 else -1
    for k in range(abs(dy)):
        oy = k if sy > 0 else -k - 1
        out.append((1, dx % n, oy % n))
    return out


def _shortest_rep(d: int, n: int) -> int:
    d %= n
    return d if 2 * d <= n else d - n


def assemble_global(n: int, m: int, env: Environment,
                    mixture: IsotropicMixture | None = None,
                    box: int | None = None,
                    cfg: SolverConfig | None = None,
                    repair_eps: float = 1e-3) -> AssembleResult:
    """Build a standardized global flow from local optimal flows.

    Steps: (1) send each vertex's outflow to its square's boundary in
    proportion to the walk's boundary law, (2) run the mixture walk and
    expand every step into the environment-optimal local flow realizing
    the mixture mean measure, (3) reverse step 1 at the walk's end, and
    (4) spread over an odd box to smooth the endpoint law.  The composed
    pair law is then topped up to its maximum with minimal-path demands
    and rescaled, making the transportation measure exactly constant; a
    final blend with the uniform flow restores the volume cap.  Only step
    2 depends on the environment; the cost of the returned flow upper
    bounds the optimum by construction.
    """
    t0 = time.perf_counter()
    require_divides(m, n)
    if env.kind != "torus" or env.graph.n != n:
        raise ValueError("environment does not match the requested torus")
    cfg = cfg or SolverConfig()
    if cfg.cap <= 0.25:
        raise ValueError("assembly needs a cap above 1/4 for the final repair")
    mixture = mixture or isotropic_grid(m, 2)
    if box is None:
        box = max(1, n // 8)
        if box % 2 == 0:
            box += 1
    repaired = repair_mixture(mixture, repair_eps)
    chains = _component_chains(repaired, n, m)
    space = chains[0].space
    torus: Torus = env.graph
    k_side = n // m
    n_squares = k_side * k_side

    q0 = repaired.mean_measure()
    if float(np.abs(np.diag(q0.q)).sum()) > 1e-12:
        raise ValueError("assembly requires an off-diagonal mixture mean")

    # step 2: per-square optimal local flows realizing q0.  Each physical
    # crossing between squares is counted exactly once, by the owning
    # (left/bottom) half-edge volume.
    sq = ExtendedSquare(m)
    local_cfg = replace(cfg, away_steps=True, track_commodities=False,
                        rel_tol=min(cfg.rel_tol, 1e-7))
    cache: dict[bytes, SolveResult] = {}
    f2 = np.zeros(torus.n_edges)
    local_costs = np.zeros((k_side, k_side))
    local_gaps = np.zeros((k_side, k_side))
    local_violation = 0.0
    for si in range(k_side):
        for sj in range(k_side):
            local_env = restrict_env(env, (si, sj), n, m)
            key = local_env.costs.tobytes()
            res = cache.get(key)
            if res is None:
                res = solve_local(m, local_env, q0, local_cfg)
                cache[key] = res
            local_costs[si, sj] = res.objective
            local_gaps[si, sj] = res.gap
            local_violation = max(local_violation, res.max_violation)
            corner = square_corner((si, sj), m)
            for e in range(sq.n_assigned_edges):
                te = torus_edge_of_square_edge(sq, e, corner, torus)
                f2[te] += res.flow.volumes[e]

    # steps 1 and 3: spread each vertex's outflow to the boundary with the
    # walk's stationary point law; identical per square, internal edges
    # only (the half-edge crossings are already counted by step 2).
    perm = reflect_permutation(m)
    rho = np.zeros(4 * m)
    for w, chain in zip(repaired.weights, chains):
        ent, _ = marginals(chain.measure)
        rho += 0.5 * (m * m / n) * w * (ent + ent[perm]) / chain.q_bar
    router_vols = flo(route_to_uniform_interior(m, rho, sq)).volumes
    internal_count = sq.n_h_internal + sq.n_v_internal
    f1 = np.zeros(torus.n_edges)
    for si in range(k_side):
        for sj in range(k_side):
            corner = square_corner((si, sj), m)
            for e in range(internal_count):
                if router_vols[e]:
                    f1[torus_edge_of_square_edge(sq, e, corner, torus)] += router_vols[e]
    f3 = f1

    # composed pair law; rows are constant over each source square
    sq_of_vertex = np.array([(v % n) // m + ((v // n) // m) * k_side
                             for v in range(torus.n_vertices)])
    entered_sq = np.array(
        [sq_of_vertex[torus.vertex_index(*space.entered_corner(s))]
         for s in range(space.n_states)]
    )
    sibling = np.arange(space.n_states) ^ 1  # same point, flipped arrow
    other_sq = entered_sq[sibling]

    xi_sq = np.zeros((n_squares, n_squares))
    state_ids = np.arange(space.n_states)
    for w, chain in zip(repaired.weights, chains):
        lo, hi, alpha = chain.t_parts
        start = np.zeros((n_squares, space.n_states))
        alloc = 0.5 * n * w * chain.pi  # half from each square sharing the point
        np.add.at(start, (entered_sq, state_ids), alloc)
        np.add.at(start, (other_sq, state_ids), alloc)
        kernel = start
        k_lo = kernel if lo == 0 else None
        for s in range(hi):
            kernel = (chain.transition.T @ kernel.T).T
            if s + 1 == lo:
                k_lo = kernel.copy()
        if k_lo is None:
            k_lo = kernel
        mixed = alpha * k_lo + (1 - alpha) * kernel
        # the walk ends entering some square; step 3 lands uniformly in it
        np.add.at(xi_sq.T, entered_sq, np.asarray(mixed).T)

    per_pair = xi_sq / (m * m) / (m * m)  # per (vertex, vertex) mass by blocks
    x_target = per_pair[:, sq_of_vertex]  # (n_squares, V)
    half = (box - 1) // 2
    grid = x_target.reshape(n_squares, n, n)
    sm = np.zeros_like(grid)
    for dx in range(-half, half + 1):
        for dy in range(-half, half + 1):
            sm += np.roll(np.roll(grid, dy, axis=1), dx, axis=2)
    x4 = (sm / (box * box)).reshape(n_squares, torus.n_vertices)

    per_source_mass = x4.sum(axis=1)
    tra_audit = float(np.abs(per_source_mass - 1.0 / n).max())

    f4 = np.full(torus.n_edges, n * neighborhood_mix_edge_volume(n, box))

    # top up every pair to the ceiling so the law is exactly constant
    ceiling = float(x4.max())
    deficit = ceiling - x4
    corr_mass = float(deficit.sum() * m * m)
    f_corr = np.zeros(torus.n_edges)
    v_idx = np.arange(torus.n_vertices)
    vi, vj = v_idx % n, v_idx // n
    src_sq = sq_of_vertex
    for d in range(torus.n_vertices):
        raw_dx, raw_dy = d % n, d // n
        dx, dy = _shortest_rep(raw_dx, n), _shortest_rep(raw_dy, n)
        if dx == 0 and dy == 0:
            continue
        w_idx = ((vj + raw_dy) % n) * n + (vi + raw_dx) % n
        demand = deficit[src_sq, w_idx]
        if not demand.any():
            continue
        for axis, ox, oy in _staircase_edges(n, dx, dy):
            eids = axis * n * n + ((vj + oy) % n) * n + (vi + ox) % n
            np.add.at(f_corr, eids, demand)

    scale = n ** -3 / ceiling
    total = scale * (f1 + f2 + f3 + f4 + f_corr)
    pre_repair_max = float(total.max(initial=0.0))
    repair_lambda = 0.0
    if pre_repair_max > cfg.cap:
        repair_lambda = (pre_repair_max - cfg.cap) / (pre_repair_max - 0.25)
        total = (1 - repair_lambda) * total + repair_lambda * uniform_flow_value(n)
    flow = FlowVolume(torus, total, {"standardized": True, "constant_tra": float(n) ** -3})
    achieved = cost(flow, env)
    return AssembleResult(
        flow=flow,
        cost=achieved,
        target=float(local_costs.sum()),
        scale=scale,
        correction_mass=corr_mass,
        repair_lambda=repair_lambda,
        tra_audit=tra_audit,
        local_summary={
            "mean_cost": float(local_costs.mean()),
            "max_gap": float(local_gaps.max()),
            "max_violation": local_violation,
            "solves": len(cache),
        },
        diagnostics={
            "ceiling_factor": ceiling * n ** 3,
            "box": box,
            "pre_repair_max": pre_repair_max,
            "f1_max": float(f1.max(initial=0.0)),
            "f2_max": float(f2.max(initial=0.0)),
            "f4_max": float(f4.max(initial=0.0)),
            "f_corr_max": float(f_corr.max(initial=0.0)),
        },
        wall_time=time.perf_counter() - t0,
    )
