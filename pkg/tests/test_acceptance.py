"""Acceptance suite.

Each test implements one acceptance criterion at its stated tolerance and
prints a single pass/fail line.  Run with ``pytest tests/test_acceptance.py -s``
to see the lines as they complete.
"""

import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from latticeflow.cli import main as cli_main
from latticeflow.construction import (
    assemble_global,
    build_chain,
    drift_lln_check,
    repair_measure,
    repair_mixture,
    skeleton_measure,
)
from latticeflow.environment import CostDistribution, derive_seed, sample_square_env, sample_torus_env
from latticeflow.flow import flo_map, tra, uniform_flow, uniform_flow_value
from latticeflow.lattice import ExtendedSquare, Side, Torus, boundary_point
from latticeflow.routing import (
    route_frame_crossing,
    route_neighborhood_mix,
    route_pairs_via_interior,
    route_to_uniform_interior,
)
from latticeflow.solver import SolverConfig, brute_force_local, solve_global, solve_local
from latticeflow.transport import (
    IsotropicMixture,
    TransportMeasure,
    directional,
    drift,
    isotropic_grid,
    marginals,
    smooth,
    smooth_drift_bound,
)


def _report(index: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"ACCEPTANCE {index:02d} {label}: {status}{suffix}")
    assert ok, f"criterion {index} failed: {label} {suffix}"


def test_01_constant_environment_optimum():
    worst = 0.0
    for n in (4, 8):
        env = sample_torus_env(n, CostDistribution.constant(1.0), seed=0)
        res = solve_global(n, env, SolverConfig(cap=0.5))
        rel = abs(res.objective / (n * n) - 0.125) / 0.125
        worst = max(worst, rel)
    _report(1, "constant-environment optimum 1/8", worst <= 1e-3,
            f"worst rel err {worst:.2e}")


def test_02_forced_flow_identity_at_quarter_cap():
    n = 4
    worst = 0.0
    for i in range(20):
        env = sample_torus_env(n, CostDistribution.uniform(1.0), seed=derive_seed(2, i))
        res = solve_global(n, env, SolverConfig(cap=0.25))
        expected = env.costs.sum() / 16.0
        worst = max(worst, abs(res.objective - expected) / expected)
    _report(2, "quarter-cap forced-flow identity", worst <= 1e-6,
            f"worst rel err {worst:.2e}")


def test_03_local_oracle_equivalence():
    m, cap = 2, 2.0
    rng = np.random.default_rng(33)
    cfg = SolverConfig(cap=cap, rel_tol=1e-9, max_iters=6000, away_steps=True,
                       track_commodities=False)
    worst = 0.0
    tested = 0
    while tested < 20:
        q = np.where(rng.random((8, 8)) < 0.25, rng.random((8, 8)) * 0.5, 0.0)
        np.fill_diagonal(q, 0.0)
        Q = TransportMeasure(m, q)
        if Q.total_mass < 1e-6:
            continue
        env = sample_square_env(m, CostDistribution.uniform(1.0),
                                seed=derive_seed(3, tested))
        res = solve_local(m, env, Q, cfg)
        oracle = brute_force_local(m, env, Q, cap=cap)
        worst = max(worst, abs(res.objective - oracle.objective) / max(oracle.objective, 1e-12))
        tested += 1
    _report(3, "solver matches enumeration oracle", worst <= 1e-5,
            f"worst rel dev {worst:.2e} over 20 instances")


def test_04_uniform_flow_value():
    ok = True
    for n in (3, 4, 5, 10, 11):
        f = uniform_flow(n)
        expected = (n * n // 2) / (2 * n * n)
        ok = ok and np.all(f.volumes == expected) and uniform_flow_value(n) == expected
    _report(4, "uniform minimal-path flow value", bool(ok))


def test_05_router_volume_bounds_exact():
    ok = True
    # one-turn spreading: volume <= 2 max rho, exact arithmetic
    for m in (2, 3, 4, 5, 6):
        rho = [Fraction(0)] * (4 * m)
        rho[0], rho[m], rho[2 * m] = Fraction(2), Fraction(1, 3), Fraction(1, 2)
        vols = flo_map(route_to_uniform_interior(m, rho))
        ok = ok and max(vols.values()) <= 2 * Fraction(2)
    # via-interior pairs: volume <= 2 (max exit + max entrance)
    rng = np.random.default_rng(5)
    for m in (2, 3, 4, 5, 6):
        q = np.zeros((4 * m, 4 * m), dtype=object)
        for _ in range(8):
            i, j = rng.integers(0, 4 * m, 2)
            q[i, j] = Fraction(int(rng.integers(1, 6)), 4)
        ent = [sum(q[i][j] for j in range(4 * m)) for i in range(4 * m)]
        exi = [sum(q[i][j] for i in range(4 * m)) for j in range(4 * m)]
        mu = route_pairs_via_interior(m, type("Q", (), {"q": q})())
        vols = flo_map(mu)
        bound = 2 * (max(exi) + max(ent))
        ok = ok and (not vols or max(vols.values()) <= bound)
    # frame crossing: constant unit measure puts exactly 1 on vertical edges
    for k in (2, 3, 4, 5, 6):
        sq = ExtendedSquare(k)
        vols = flo_map(route_frame_crossing(k, [Fraction(1)] * k, sq))
        vertical = [sq.half_edge(Side.BOTTOM, i) for i in range(k)]
        vertical += [sq.half_edge(Side.TOP, i) for i in range(k)]
        vertical += [sq.v_edge(i, y) for i in range(k) for y in range(k - 1)]
        ok = ok and all(vols[e] == Fraction(1) for e in vertical)
        ok = ok and max(vols.values()) <= Fraction(1)
    # neighborhood mix: volume <= box / (4 n^2)
    for n, box in ((6, 3), (6, 5)):
        vols = flo_map(route_neighborhood_mix(n, box))
        ok = ok and max(vols.values()) <= box / (4 * n * n) + 1e-15
    _report(5, "router volume bounds with exact arithmetic", bool(ok))


def test_06_cap_sandwich():
    n, b1, b2 = 4, 0.3, 0.5
    c_star = 1.0
    cfg = SolverConfig(rel_tol=1e-4, max_iters=250, track_commodities=False)
    bound = c_star * n * n * b2 * (b2 - b1) / (b2 - 0.25)
    ok = True
    details = []
    from dataclasses import replace

    for i in range(20):
        env = sample_torus_env(n, CostDistribution.uniform(1.0), seed=derive_seed(6, i))
        lo = solve_global(n, env, replace(cfg, cap=b1))
        hi = solve_global(n, env, replace(cfg, cap=b2))
        slack = 2 * (lo.gap + hi.gap)
        diff = lo.objective - hi.objective
        ok = ok and (-slack - 1e-9 <= diff <= bound + slack + 1e-9)
        details.append(diff)
    _report(6, "cap sandwich inequality", ok,
            f"differences in [{min(details):.3g}, {max(details):.3g}], bound {bound:.3g}")


def test_07_skeleton_fidelity():
    n, m = 8, 2
    dirs = directional(m)
    comps = [repair_measure(dirs[k], 1e-2) for k in ("right", "left", "up", "down")]
    mix = IsotropicMixture(m, [0.25] * 4, comps, 1)
    sk = skeleton_measure(mix, n, m, mode="exact")
    q0 = mix.mean_measure()
    dev = float(np.abs(sk.nu_square - q0.q).max())
    d = sk.diagnostics
    ok = (dev <= 1e-9 and abs(d["total_mass"] - n) <= 1e-9
          and d["translation_invariance_max_abs"] <= 1e-9
          and d["ent_exi_l1"] <= 1e-9)
    _report(7, "skeleton step-measure fidelity", ok,
            f"step-measure dev {dev:.2e}, mass err {abs(d['total_mass'] - n):.2e}")


def test_08_drift_law_of_large_numbers():
    m = 2
    n = 64 * m
    worst = 0.0
    from latticeflow.transport import drift_measure

    for seed, u in enumerate(((0.5, 0.0), (0.0, 0.25), (0.75, 0.5))):
        chain = build_chain(drift_measure(m, u), n, m)
        check = drift_lln_check(chain, replicas=120, seed=seed)
        worst = max(worst, check.l1_error)
    _report(8, "walk drift law of large numbers", worst <= 0.05,
            f"worst L1 error {worst:.3f} at n={n}")


def test_09_concentration():
    from latticeflow.experiments import concentration_experiment

    m, b = 6, 0.5
    dist = CostDistribution.uniform(1.0)
    Q = isotropic_grid(m, 2).mean_measure().scaled(0.8)
    cfg = SolverConfig(rel_tol=1e-3, max_iters=150, track_commodities=False)
    out = concentration_experiment(m, b, Q, dist, n_samples=200,
                                   lambda_grid=[0.02, 0.05, 0.1, 0.2, 0.4],
                                   seed=99, cfg=cfg, n_resamples=100)
    ok = out["tail_all_within"] and out["audit_all_within"]
    max_delta = max(a["delta"] for a in out["audit"])
    _report(9, "concentration bound and bounded differences", ok,
            f"max single-edge delta {max_delta:.3g} vs c*b^2 = {b * b:.3g} + gaps")


def test_10_smoothing_block_constancy_and_drift():
    m, k, cap = 8, 2, 0.5
    rng = np.random.default_rng(10)
    ok = True
    worst = 0.0
    for _ in range(20):
        q = np.where(rng.random((32, 32)) < 0.1, rng.random((32, 32)), 0.0)
        Q = TransportMeasure(m, q)
        ent, exi = marginals(Q)
        scale = 0.9 * cap / max(2 * (ent.max() + exi.max()), 1e-9)
        Q = Q.scaled(min(scale, 1.0))  # feasible at the cap by the router probe
        sm = smooth(Q, k, cap)
        from latticeflow.transport import block_of, parallel_outer_index

        # block constancy, exact
        inner = list(range(4 * m))
        for bi in range(4 * m // k):
            rows = [parallel_outer_index(i, m, k) for i in inner if block_of(i, m, k) == bi]
            for bj in range(4 * m // k):
                cols = [parallel_outer_index(j, m, k) for j in inner
                        if block_of(j, m, k) == bj]
                vals = sm.measure.q[np.ix_(rows, cols)].ravel()
                ok = ok and bool(np.all(vals == vals[0]))
        dev = float(np.abs(drift(sm.measure) - drift(Q)).sum())
        worst = max(worst, dev)
        ok = ok and dev <= smooth_drift_bound(sm) + 1e-12
    _report(10, "smoothing block constancy and drift bound", ok,
            f"worst drift move {worst:.3g} vs bound {smooth_drift_bound(sm):.3g}")


def test_11_construction_dominance_and_trend():
    m = 4
    cfg = SolverConfig(cap=0.5, rel_tol=1e-4, max_iters=250, track_commodities=False)
    ratios = []
    ok = True
    for n in (8, 16, 32):
        env = sample_torus_env(n, CostDistribution.constant(1.0), seed=0)
        built = assemble_global(n, m, env, cfg=cfg)
        opt = solve_global(n, env, cfg)
        ok = ok and built.cost >= opt.objective - opt.gap - 1e-9
        ratios.append(built.cost / opt.objective)
    ok = ok and ratios[0] >= ratios[1] >= ratios[2]
    # dominance also on random paired runs
    for i in range(3):
        env = sample_torus_env(8, CostDistribution.uniform(1.0), seed=derive_seed(11, i))
        built = assemble_global(8, 2, env, cfg=cfg)
        opt = solve_global(8, env, cfg)
        ok = ok and built.cost >= opt.objective - opt.gap - 1e-9
    _report(11, "construction dominates optimum; ratio trend", ok,
            "ratios " + ", ".join(f"{r:.3f}" for r in ratios))


def test_12_cli_determinism(tmp_path):
    args = ["b-sweep", "--n", "4", "--b-list", "0.3,0.5", "--dist", "uniform:1",
            "--seed", "12", "--n-env", "3", "--tol", "1e-3", "--max-iters", "60"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli_main(args + ["--out", str(out1)]) == 0
    assert cli_main(args + ["--out", str(out2)]) == 0
    same = all((out1 / f).read_bytes() == (out2 / f).read_bytes()
               for f in ("results.csv", "summary.json"))
    args2 = ["solve-global", "--n", "4", "--b", "0.5", "--dist", "uniform:1",
             "--seed", "3", "--tol", "1e-3", "--max-iters", "60"]
    outs = []
    for sub in ("c", "d"):
        out = tmp_path / sub
        assert cli_main(args2 + ["--out", str(out)]) == 0
        outs.append((out / "result.json").read_bytes())
    same = same and outs[0] == outs[1]
    _report(12, "byte-identical result files on repeated runs", same)
