import numpy as np
import pytest

from latticeflow.environment import CostDistribution, sample_square_env, sample_torus_env
from latticeflow.flow import cost, uniform_flow
from latticeflow.lattice import BoundaryPoint, Side, boundary_index
from latticeflow.solver import (
    SolverConfig,
    brute_force_local,
    local_feasibility_probe,
    solve_global,
    solve_local,
    wardrop_residual,
)
from latticeflow.transport import TransportMeasure, drift_measure, scatter_measure


def _pair_measure(m, pairs):
    q = np.zeros((4 * m, 4 * m))
    for (ent, exi), mass in pairs.items():
        q[boundary_index(ent, m), boundary_index(exi, m)] = mass
    return TransportMeasure(m, q)


# ---------------------------------------------------------------------------
# Global problem
# ---------------------------------------------------------------------------

def test_global_constant_env_optimum():
    # closed form: with constant costs the uniform flow volume 1/4 is optimal
    # (total volume is forced and Cauchy-Schwarz makes the constant volume
    # cheapest), so the objective is N^2 * c / 8
    for n in (4, 6):
        env = sample_torus_env(n, CostDistribution.constant(1.0), seed=0)
        res = solve_global(n, env, SolverConfig(cap=0.3, rel_tol=1e-8))
        assert res.objective == pytest.approx(n * n / 8.0, rel=1e-4)
        assert res.feasible
        assert res.max_violation == 0.0


def test_global_forced_flow_identity_at_quarter_cap():
    # cap exactly 1/4 forces the uniform flow; objective = sum(c)/16 exactly
    n = 4
    env = sample_torus_env(n, CostDistribution.uniform(1.0), seed=5)
    res = solve_global(n, env, SolverConfig(cap=0.25))
    assert res.objective == pytest.approx(env.costs.sum() / 16.0, rel=1e-12)
    assert res.gap == 0.0
    with pytest.raises(ValueError):
        solve_global(5, sample_torus_env(5, CostDistribution.constant(1.0), seed=0),
                     SolverConfig(cap=0.25))


def test_global_rejects_small_cap():
    env = sample_torus_env(4, CostDistribution.constant(1.0), seed=0)
    with pytest.raises(ValueError):
        solve_global(4, env, SolverConfig(cap=0.2))


def test_global_objective_reported_is_recomputation():
    env = sample_torus_env(4, CostDistribution.uniform(1.0), seed=3)
    res = solve_global(4, env, SolverConfig(cap=0.5))
    assert res.objective == cost(res.flow, env)


def test_global_monotone_in_cap():
    # a larger cap can only lower the optimum, up to solver gaps
    for seed in range(4):
        env = sample_torus_env(4, CostDistribution.uniform(1.0), seed=seed)
        lo = solve_global(4, env, SolverConfig(cap=0.3))
        hi = solve_global(4, env, SolverConfig(cap=0.5))
        assert hi.objective <= lo.objective + 2 * (lo.gap + hi.gap) + 1e-9


def test_global_cap_respected_after_repair():
    for seed in (0, 1):
        env = sample_torus_env(6, CostDistribution.uniform(1.0), seed=seed)
        res = solve_global(6, env, SolverConfig(cap=0.3))
        assert res.flow.max_volume() <= 0.3 + 1e-12
        assert res.feasible


def test_global_gap_trace_trends_down():
    env = sample_torus_env(4, CostDistribution.uniform(1.0), seed=9)
    res = solve_global(4, env, SolverConfig(cap=0.6, rel_tol=1e-9, max_iters=200))
    trace = res.gap_trace
    assert len(trace) >= 8
    head = np.mean(trace[: max(1, len(trace) // 4)])
    tail = np.mean(trace[-max(1, len(trace) // 4):])
    assert tail <= head


def test_wardrop_residual_small_at_constant_optimum():
    env = sample_torus_env(4, CostDistribution.constant(1.0), seed=0)
    res = solve_global(4, env, SolverConfig(cap=0.5))
    assert res.wardrop_residual is not None
    assert res.wardrop_residual <= 1e-3


def test_wardrop_residual_positive_for_perturbed_flow():
    env = sample_torus_env(4, CostDistribution.constant(1.0), seed=0)
    res = solve_global(4, env, SolverConfig(cap=0.5))
    # move some volume of one commodity onto a longer route by hand
    internals = res.internals
    fs = internals.per_source
    g = res.flow
    # commodity 0: divert 10% of its volume onto a detour around a plaquette
    t = g.graph
    detour = [t.edge_index(0, 1), t.edge_index(1, 1 + t.n), t.edge_index(1 + t.n, t.n),
              t.edge_index(t.n, 0)]
    fs[0, detour] += 0.02
    g.volumes[detour] += 0.02
    res2_residual = wardrop_residual(res, env)
    assert res2_residual > 1e-4


# ---------------------------------------------------------------------------
# Local problem
# ---------------------------------------------------------------------------

def test_local_zero_measure():
    m = 2
    env = sample_square_env(m, CostDistribution.constant(1.0), seed=0)
    res = solve_local(m, env, TransportMeasure(m, np.zeros((8, 8))), SolverConfig(cap=1.0))
    assert res.objective == 0.0
    assert res.flow.volumes.sum() == 0.0


def test_local_single_crossing_constant_env():
    # unit mass from (left,0) to (right,0) on the 2x2 square, constant costs.
    # the quadratic optimum splits between the short branch (one cost edge)
    # and the long branch (three cost edges) after the shared left half-edge:
    # min_x [1 + x^2 + 3 (1-x)^2] = 1 + 3/4 at x = 3/4
    m = 2
    env = sample_square_env(m, CostDistribution.constant(1.0), seed=0)
    Q = _pair_measure(m, {(BoundaryPoint(Side.LEFT, 0), BoundaryPoint(Side.RIGHT, 0)): 1.0})
    res = solve_local(m, env, Q, SolverConfig(cap=2.0, rel_tol=1e-9, max_iters=3000))
    assert res.objective == pytest.approx(1.75, rel=1e-6)
    oracle = brute_force_local(m, env, Q, cap=2.0)
    assert oracle.objective == pytest.approx(1.75, rel=1e-8)


def test_local_tra_is_preserved():
    m = 3
    env = sample_square_env(m, CostDistribution.uniform(1.0), seed=1)
    rng = np.random.default_rng(0)
    q = np.where(rng.random((12, 12)) < 0.15, rng.random((12, 12)) * 0.2, 0.0)
    Q = TransportMeasure(m, q)
    res = solve_local(m, env, Q, SolverConfig(cap=5.0))
    # entrance half-edge volumes are forced: ent(b) + exi(b) at each point
    ent, exi = Q.q.sum(axis=1), Q.q.sum(axis=0)
    sq = env.graph
    for b in range(4 * m):
        from latticeflow.lattice import boundary_point

        bp = boundary_point(b, m)
        e = sq.half_edge(bp.side, bp.offset)
        expected = ent[b] + exi[b] - 2 * Q.q[b, b]
        assert res.flow.volumes[e] == pytest.approx(expected, abs=1e-9)


def test_local_quadratic_scaling():
    # with a slack cap the optimal objective scales as alpha^2
    m = 3
    env = sample_square_env(m, CostDistribution.uniform(1.0), seed=4)
    rng = np.random.default_rng(1)
    q = np.where(rng.random((12, 12)) < 0.1, rng.random((12, 12)) * 0.1, 0.0)
    Q = TransportMeasure(m, q)
    cfg = SolverConfig(cap=10.0, rel_tol=1e-9, max_iters=2000)
    base = solve_local(m, env, Q, cfg)
    scaled = solve_local(m, env, Q.scaled(0.5), cfg)
    assert scaled.objective == pytest.approx(0.25 * base.objective, rel=1e-4)


def test_local_oracle_agreement_sparse_instances():
    m = 2
    rng = np.random.default_rng(7)
    for trial in range(5):
        env = sample_square_env(m, CostDistribution.uniform(1.0), seed=100 + trial)
        q = np.where(rng.random((8, 8)) < 0.25, rng.random((8, 8)) * 0.5, 0.0)
        np.fill_diagonal(q, 0.0)
        Q = TransportMeasure(m, q)
        if Q.total_mass == 0:
            continue
        res = solve_local(m, env, Q, SolverConfig(cap=2.0, rel_tol=1e-9, max_iters=5000))
        oracle = brute_force_local(m, env, Q, cap=2.0)
        assert res.objective == pytest.approx(oracle.objective, rel=1e-5)
        # gap soundness: the oracle optimum is never below objective - gap
        assert oracle.objective >= res.objective - res.gap - 1e-12


def test_local_feasibility_probe():
    m = 2
    Q = scatter_measure(m, 1.0)
    ent, exi = Q.q.sum(axis=1), Q.q.sum(axis=0)
    bound = 2 * (ent.max() + exi.max())
    assert local_feasibility_probe(Q, bound + 0.01)
    assert not local_feasibility_probe(Q, bound - 0.01)


def test_local_infeasible_flag():
    # mass that cannot fit under a sub-unit cap through a single entrance
    m = 2
    env = sample_square_env(m, CostDistribution.constant(1.0), seed=0)
    Q = _pair_measure(m, {(BoundaryPoint(Side.LEFT, 0), BoundaryPoint(Side.RIGHT, 0)): 1.0})
    res = solve_local(m, env, Q, SolverConfig(cap=0.5))
    assert not res.feasible
    assert res.max_violation > 0.1


def test_local_convexity_in_measure():
    # the optimal-cost map is convex in the transportation measure
    m = 3
    env = sample_square_env(m, CostDistribution.uniform(1.0), seed=2)
    rng = np.random.default_rng(3)
    cfg = SolverConfig(cap=8.0, rel_tol=1e-9, max_iters=2000)
    for _ in range(3):
        qa = np.where(rng.random((12, 12)) < 0.1, rng.random((12, 12)) * 0.2, 0.0)
        qb = np.where(rng.random((12, 12)) < 0.1, rng.random((12, 12)) * 0.2, 0.0)
        np.fill_diagonal(qa, 0.0)
        np.fill_diagonal(qb, 0.0)
        Qa, Qb = TransportMeasure(m, qa), TransportMeasure(m, qb)
        lam = 0.4
        mix = TransportMeasure(m, lam * qa + (1 - lam) * qb)
        ra = solve_local(m, env, Qa, cfg)
        rb = solve_local(m, env, Qb, cfg)
        rm = solve_local(m, env, mix, cfg)
        slack = ra.gap + rb.gap + rm.gap + 1e-9
        assert rm.objective <= lam * ra.objective + (1 - lam) * rb.objective + slack


# ---------------------------------------------------------------------------
# Oracle-specific checks
# ---------------------------------------------------------------------------

def test_oracle_equal_branch_split():
    # craft two disjoint equal-cost branches after a shared half-edge:
    # minimizing c (x^2 + (1-x)^2) splits the mass exactly in half
    m = 2
    env = sample_square_env(m, CostDistribution.constant(1.0), seed=0)
    sq = env.graph
    env.costs[:] = 0.0
    env.costs[sq.v_edge(0, 0)] = 3.0
    env.costs[sq.h_edge(0, 0)] = 1.0
    env.costs[sq.v_edge(1, 0)] = 1.0
    env.costs[sq.h_edge(0, 1)] = 1.0
    Q = _pair_measure(m, {(BoundaryPoint(Side.BOTTOM, 0), BoundaryPoint(Side.TOP, 0)): 1.0})
    oracle = brute_force_local(m, env, Q, cap=10.0)
    x, groups, pairs, paths = oracle.internals
    assert len(paths) == 2
    assert sorted(np.round(x, 6)) == [0.5, 0.5]
    assert oracle.objective == pytest.approx(3.0 * 0.25 + 3.0 * 0.25, rel=1e-7)


def test_oracle_infeasible_mass():
    m = 2
    env = sample_square_env(m, CostDistribution.constant(1.0), seed=0)
    Q = _pair_measure(m, {(BoundaryPoint(Side.LEFT, 0), BoundaryPoint(Side.RIGHT, 0)): 3.0})
    res = brute_force_local(m, env, Q, cap=0.5)
    assert not res.feasible


def test_oracle_rejects_large_square():
    env = sample_square_env(4, CostDistribution.constant(1.0), seed=0)
    with pytest.raises(ValueError):
        brute_force_local(4, env, scatter_measure(4), cap=1.0)
