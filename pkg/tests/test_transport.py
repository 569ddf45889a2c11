import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticeflow.lattice import BoundaryPoint, Side, boundary_index
from latticeflow.transport import (
    IsotropicMixture,
    TransportMeasure,
    deserialize_transport,
    directional,
    drift,
    drift1,
    drift_measure,
    in_qm,
    isotropic_grid,
    marginals,
    scatter_measure,
    serialize_transport,
    smooth,
    smooth_drift_bound,
    trim,
    trim_class_cardinality_bound,
    zero_measure,
)


def _unit_pair(m, ent, exi):
    q = np.zeros((4 * m, 4 * m))
    q[boundary_index(ent, m), boundary_index(exi, m)] = 1.0
    return TransportMeasure(m, q)


def test_marginals_single_pair():
    m = 3
    Q = _unit_pair(m, BoundaryPoint(Side.LEFT, 0), BoundaryPoint(Side.RIGHT, 0))
    ent, exi = marginals(Q)
    assert ent[boundary_index(BoundaryPoint(Side.LEFT, 0), m)] == 1.0
    assert ent.sum() == 1.0
    assert exi[boundary_index(BoundaryPoint(Side.RIGHT, 0), m)] == 1.0
    assert exi.sum() == 1.0


def test_marginals_directional():
    m = 3
    Q = directional(m)["right"]
    ent, exi = marginals(Q)
    for o in range(m):
        assert ent[boundary_index(BoundaryPoint(Side.LEFT, o), m)] == 1.0
        assert exi[boundary_index(BoundaryPoint(Side.RIGHT, o), m)] == 1.0
    assert ent.sum() == exi.sum() == Q.total_mass == m


def test_in_qm_straight_pairs():
    assert in_qm(directional(4)["right"])
    assert in_qm(directional(4)["up"])


def test_in_qm_mismatch():
    m = 2
    Q = _unit_pair(m, BoundaryPoint(Side.LEFT, 0), BoundaryPoint(Side.TOP, 0))
    assert not in_qm(Q)


def test_in_qm_symmetrized():
    # pairing each (ent, exi) with (reflect(exi), reflect(ent)) restores
    # the compatibility condition
    m = 3
    rng = np.random.default_rng(0)
    q = rng.random((4 * m, 4 * m))
    from latticeflow.lattice import reflect_permutation

    perm = reflect_permutation(m)
    sym = q + q[np.ix_(perm, perm)].T
    assert in_qm(TransportMeasure(m, sym), tol=1e-9)


def test_drift_directional():
    for m in (2, 4):
        assert drift(directional(m)["right"]) == pytest.approx([1.0, 0.0])
        assert drift(directional(m)["up"]) == pytest.approx([0.0, 1.0])
        assert drift1(directional(m)["right"]) == pytest.approx([0.0, 0.0])


def test_drift_mix_and_linearity():
    m = 4
    d = directional(m)
    half = TransportMeasure(m, 0.5 * d["right"].q + 0.5 * d["left"].q)
    assert drift(half) == pytest.approx([0.0, 0.0])
    assert drift(d["right"].scaled(0.3)) == pytest.approx([0.3, 0.0])


def test_scatter_measure_properties():
    m = 3
    U = scatter_measure(m, 1.0)
    assert U.total_mass == pytest.approx(1.0)
    assert np.all(np.diag(U.q) == 0.0)
    assert in_qm(U)
    assert drift(U) == pytest.approx([0.0, 0.0], abs=1e-12)


def test_drift_measure_examples():
    m = 4
    Q0 = drift_measure(m, (0.0, 0.0))
    assert drift(Q0) == pytest.approx([0.0, 0.0], abs=1e-12)
    assert Q0.total_mass == pytest.approx(1e-3)
    Qh = drift_measure(m, (0.5, 0.5))
    assert drift(Qh) == pytest.approx([0.5, 0.5])
    Qn = drift_measure(m, (-0.25, 0.1))
    assert drift(Qn) == pytest.approx([-0.25, 0.1])


def test_drift_measure_in_qm_grid():
    m, g = 4, 8
    for a in range(g):
        for b in range(g):
            u = ((a + 0.5) / g, (b + 0.5) / g)
            assert in_qm(drift_measure(m, u))


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_in_qm_preserved_under_mixtures(lam, seed):
    m = 3
    rng = np.random.default_rng(seed)
    from latticeflow.lattice import reflect_permutation

    perm = reflect_permutation(m)

    def compatible(q):
        return q + q[np.ix_(perm, perm)].T

    a = TransportMeasure(m, compatible(rng.random((12, 12))))
    b = TransportMeasure(m, compatible(rng.random((12, 12))))
    mix = TransportMeasure(m, lam * a.q + (1 - lam) * b.q)
    assert in_qm(mix, tol=1e-8)


def test_isotropic_grid_g1():
    mix = isotropic_grid(3, 1, representation="nonnegative")
    assert len(mix.components) == 1
    assert drift1(mix.components[0]) == pytest.approx([0.5, 0.5])


def test_isotropic_grid_g2_mean_drift():
    mix = isotropic_grid(3, 2, representation="nonnegative")
    assert len(mix.components) == 4
    mean = np.array([0.0, 0.0])
    for w, c in zip(mix.weights, mix.components):
        mean = mean + w * drift(c)
    assert mean == pytest.approx([0.5, 0.5])


def test_isotropic_grid_centered_reduced_targets():
    mix = isotropic_grid(3, 2, representation="centered")
    targets = sorted(tuple(np.round(drift1(c), 6)) for c in mix.components)
    assert targets == [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    # centered representatives keep the drift short
    for c in mix.components:
        assert np.all(np.abs(drift(c)) <= 0.5 + 1e-12)


def test_isotropic_grid_components_compatible():
    mix = isotropic_grid(4, 2)
    for c in mix.components:
        assert in_qm(c)
    assert in_qm(mix.mean_measure())
    d = mix.diagnostics()
    assert d["wasserstein_inf_per_axis"] == pytest.approx(0.25)


def test_smooth_zero():
    sm = smooth(zero_measure(4), 2, cap=1.0)
    assert sm.measure.total_mass == 0.0
    assert sm.measure.m == 8


def test_smooth_directional_drift_bound():
    m, k, cap = 4, 2, 1.0
    Q = directional(m)["right"]
    sm = smooth(Q, k, cap)
    d_out, d_in = drift(sm.measure), drift(Q)
    assert np.abs(d_out - d_in).sum() <= smooth_drift_bound(sm) + 1e-12
    # mass is preserved onto the parallel points
    assert sm.measure.total_mass == pytest.approx(Q.total_mass)
    # exact displacement for the straight measure: drift scales by M/(M+2K)
    assert d_out == pytest.approx([m / (m + 2 * k), 0.0])


def test_smooth_block_constancy_and_support():
    m, k = 8, 2
    rng = np.random.default_rng(3)
    Q = TransportMeasure(m, rng.random((4 * m, 4 * m)))
    sm = smooth(Q, k, cap=2.0)
    mo = m + 2 * k
    from latticeflow.transport import block_of, parallel_outer_index

    parallel = {parallel_outer_index(i, m, k) for i in range(4 * m)}
    for i in range(4 * mo):
        for j in range(4 * mo):
            if i not in parallel or j not in parallel:
                assert sm.measure.q[i, j] == 0.0
    # entries constant within block pairs
    inner = list(range(4 * m))
    for bi in range(4 * m // k):
        rows = [parallel_outer_index(i, m, k) for i in inner if block_of(i, m, k) == bi]
        for bj in range(4 * m // k):
            cols = [parallel_outer_index(j, m, k) for j in inner if block_of(j, m, k) == bj]
            vals = sm.measure.q[np.ix_(rows, cols)].ravel()
            assert np.allclose(vals, vals[0], atol=0.0)


def test_smooth_preserves_compatibility():
    m, k = 4, 2
    from latticeflow.lattice import reflect_permutation

    rng = np.random.default_rng(1)
    perm = reflect_permutation(m)
    raw = rng.random((4 * m, 4 * m))
    Q = TransportMeasure(m, raw + raw[np.ix_(perm, perm)].T)
    assert in_qm(Q, tol=1e-8)
    sm = smooth(Q, k, cap=10.0)
    assert in_qm(sm.measure, tol=1e-8)


def test_smooth_marginal_block_average():
    # the smoothing map acts on marginals by averaging over blocks
    m, k = 4, 2
    rng = np.random.default_rng(5)
    Q = TransportMeasure(m, rng.random((16, 16)))
    sm = smooth(Q, k, cap=1.0)
    from latticeflow.lattice import reflect_permutation
    from latticeflow.transport import block_of, parallel_outer_index

    ent, _ = marginals(Q)
    ent_s, _ = marginals(sm.measure)
    for i in range(4 * m):
        block = [j for j in range(4 * m) if block_of(j, m, k) == block_of(i, m, k)]
        expected = sum(ent[j] for j in block) / k
        assert ent_s[parallel_outer_index(i, m, k)] == pytest.approx(expected)


def test_smooth_rejects_bad_block():
    with pytest.raises(ValueError):
        smooth(zero_measure(4), 3, cap=1.0)


def test_trim_examples():
    m, k = 4, 2
    sm = smooth(directional(m)["right"].scaled(0.37 * 2), k, cap=1.0)
    # entry value 0.37 with delta/K = 0.1 floors to 0.3
    delta = 0.2  # step = delta / k = 0.1
    entry = sm.measure.q[sm.measure.q > 0][0]
    assert entry == pytest.approx(0.37)
    tr = trim(sm, delta)
    vals = np.unique(tr.measure.q[tr.measure.q > 0])
    assert vals == pytest.approx([0.3])
    # already-multiples unchanged
    tr2 = trim(trim(sm, delta), delta)
    assert np.array_equal(tr2.measure.q, tr.measure.q)


def test_trim_residual_bounds():
    m, k = 4, 2
    rng = np.random.default_rng(2)
    Q = TransportMeasure(m, rng.random((16, 16)))
    sm = smooth(Q, k, cap=1.0)
    delta = 0.05
    tr = trim(sm, delta)
    resid = sm.measure.q - tr.measure.q
    assert np.all(resid >= -1e-12)
    assert np.all(resid < delta / k + 1e-9)
    ent, exi = resid.sum(axis=1), resid.sum(axis=0)
    assert ent.max() <= 4 * m * delta / k + 1e-9
    assert exi.max() <= 4 * m * delta / k + 1e-9


def test_trim_cardinality_bound_formula():
    # M/K = 4 blocks per side scale, B/delta = 9: (1+9)^(16^2) = 10^256
    assert trim_class_cardinality_bound(8, 2, 0.9, 0.1) == pytest.approx(10.0 ** 256)


def test_transport_serialization_round_trip():
    m = 3
    rng = np.random.default_rng(0)
    q = np.where(rng.random((12, 12)) < 0.2, rng.random((12, 12)), 0.0)
    Q = TransportMeasure(m, q)
    back = deserialize_transport(serialize_transport(Q))
    assert np.array_equal(back.q, Q.q)


def test_mixture_weight_validation():
    m = 2
    with pytest.raises(ValueError):
        IsotropicMixture(m, [0.5, 0.4], [zero_measure(m), zero_measure(m)], 1)
