"""Transportation measures on the boundary of the extended M x M square.

A transportation measure is a nonnegative matrix over ordered pairs of
boundary points: row = entrance, column = exit.  The compatibility class
consists of measures whose reflected exit marginal equals the entrance
marginal, which is exactly what lets squares tile the torus.  Drift is the
mean displacement per unit area; isotropic mixtures make the reduced drift
uniform on the unit torus.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .lattice import (
    BoundaryPoint,
    Side,
    boundary_coord_array,
    boundary_index,
    boundary_point,
    reflect_permutation,
)

SERIAL_VERSION = "latticeflow-transport/1"

DEFAULT_SUPPORT_MASS = 1e-3


@dataclass
class TransportMeasure:
    """Nonnegative mass matrix on (entrance, exit) boundary-point pairs."""

    m: int
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.q.shape != (4 * self.m, 4 * self.m):
            raise ValueError(f"matrix must be {4 * self.m} x {4 * self.m}")
        if np.any(self.q < 0) or not np.all(np.isfinite(self.q)):
            raise ValueError("entries must be nonnegative and finite")

    @property
    def total_mass(self) -> float:
        return float(self.q.sum())

    def __add__(self, other: "TransportMeasure") -> "TransportMeasure":
        if other.m != self.m:
            raise ValueError("sizes differ")
        return TransportMeasure(self.m, self.q + other.q)

    def scaled(self, a: float) -> "TransportMeasure":
        return TransportMeasure(self.m, a * self.q)


def zero_measure(m: int) -> TransportMeasure:
    return TransportMeasure(m, np.zeros((4 * m, 4 * m)))


def marginals(Q: TransportMeasure) -> tuple[np.ndarray, np.ndarray]:
    """(entrance, exit) marginals: row sums and column sums."""
    return Q.q.sum(axis=1), Q.q.sum(axis=0)


def in_qm(Q: TransportMeasure, tol: float = 1e-9) -> bool:
    """Whether the reflected exit marginal equals the entrance marginal (L1)."""
    ent, exi = marginals(Q)
    perm = reflect_permutation(Q.m)
    return bool(np.abs(exi[perm] - ent).sum() <= tol)


def drift(Q: TransportMeasure) -> np.ndarray:
    """Mean displacement sum scaled by 1/M^2, as a plane vector."""
    coords = boundary_coord_array(Q.m)
    disp = coords[None, :, :] - coords[:, None, :]
    return (Q.q[:, :, None] * disp).sum(axis=(0, 1)) / Q.m ** 2


def drift1(Q: TransportMeasure) -> np.ndarray:
    """Drift reduced modulo 1 per axis into [0, 1)^2."""
    return np.mod(drift(Q), 1.0)


def directional(m: int) -> dict[str, TransportMeasure]:
    """Unit-mass straight-line measures: right, left, up, down.

    Each assigns weight 1 to every straight crossing path on its axis, so
    e.g. the rightward measure pairs (left, j) with (right, j) and has
    drift (1, 0).
    """
    out = {}
    for name, ent_side, exi_side in (
        ("right", Side.LEFT, Side.RIGHT),
        ("left", Side.RIGHT, Side.LEFT),
        ("up", Side.BOTTOM, Side.TOP),
        ("down", Side.TOP, Side.BOTTOM),
    ):
        q = np.zeros((4 * m, 4 * m))
        for o in range(m):
            q[boundary_index(BoundaryPoint(ent_side, o), m),
              boundary_index(BoundaryPoint(exi_side, o), m)] = 1.0
        out[name] = TransportMeasure(m, q)
    return out


def scatter_measure(m: int, mass: float = 1.0) -> TransportMeasure:
    """Uniform mass on all off-diagonal boundary pairs.

    Compatible (constant marginals reflect to constant marginals), has
    zero drift by symmetry, and makes the projected walk strictly
    positive off the diagonal, hence irreducible.
    """
    k = 4 * m
    q = np.full((k, k), mass / (k * (k - 1)))
    np.fill_diagonal(q, 0.0)
    return TransportMeasure(m, q)


def drift_measure(m: int, u, support_mass: float = DEFAULT_SUPPORT_MASS) -> TransportMeasure:
    """Compatible measure with drift exactly u, built on the axis basis.

    Uses |u_x| copies of the rightward (or leftward) straight measure and
    |u_y| of the upward (or downward) one, plus a small uniform scatter
    term that keeps the projected walk irreducible without moving the
    drift.  Accepts any real u; reduced-drift targets in [0,1)^2 are the
    common case.
    """
    dirs = directional(m)
    ux, uy = float(u[0]), float(u[1])
    q = scatter_measure(m, support_mass).q.copy()
    q += abs(ux) * (dirs["right"].q if ux >= 0 else dirs["left"].q)
    q += abs(uy) * (dirs["up"].q if uy >= 0 else dirs["down"].q)
    return TransportMeasure(m, q)


@dataclass
class IsotropicMixture:
    """Weighted family of compatible measures with uniform reduced drift.

    The push-forward of the weights under the reduced-drift map hits each
    cell of the G x G grid with equal mass; the continuum approximation
    error is at most 1/(2G) per axis in Wasserstein-infinity.
    """

    m: int
    weights: list[float]
    components: list[TransportMeasure]
    grid_resolution: int
    representation: str = "centered"

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")

    def mean_measure(self) -> TransportMeasure:
        q = np.zeros((4 * self.m, 4 * self.m))
        for w, comp in zip(self.weights, self.components):
            q += w * comp.q
        return TransportMeasure(self.m, q)

    def drift_targets(self) -> list[np.ndarray]:
        return [drift(c) for c in self.components]

    def diagnostics(self) -> dict:
        return {
            "grid_resolution": self.grid_resolution,
            "cell_mass_deviation": 0.0,
            "wasserstein_inf_per_axis": 1.0 / (2 * self.grid_resolution),
        }


def isotropic_grid(m: int, g: int, representation: str = "centered",
                   support_mass: float = DEFAULT_SUPPORT_MASS) -> IsotropicMixture:
    """Mixture with reduced-drift targets at the centers of a G x G grid.

    ``centered`` realizes each target by the shortest signed drift in
    [-1/2, 1/2)^2 (cheapest in mass, matching the scale of minimal-path
    flows); ``nonnegative`` uses the representative in [0, 1)^2 directly.
    """
    if g < 1:
        raise ValueError("grid resolution must be at least 1")
    if representation not in ("centered", "nonnegative"):
        raise ValueError(f"unknown representation {representation!r}")
    weights, comps = [], []
    for a in range(g):
        for b in range(g):
            target = np.array([(a + 0.5) / g, (b + 0.5) / g])
            u = target.copy()
            if representation == "centered":
                u = np.where(u >= 0.5, u - 1.0, u)
            comps.append(drift_measure(m, u, support_mass))
            weights.append(1.0 / (g * g))
    return IsotropicMixture(m, weights, comps, g, representation)


# ---------------------------------------------------------------------------
# Smoothing to the (M + 2K) square and trimming
# ---------------------------------------------------------------------------

@dataclass
class SmoothedMeasure:
    """Block-constant measure on the boundary of the (M + 2K) square.

    Supported only on the 4M outer points parallel to the original
    boundary; entries are constant within K-blocks.  ``source_drift`` and
    ``source_mass`` record the measure it was derived from.
    """

    m: int
    k: int
    cap: float
    measure: TransportMeasure  # on the extended (m + 2k) square
    source_drift: np.ndarray
    source_mass: float

    @property
    def outer_size(self) -> int:
        return self.m + 2 * self.k


def parallel_outer_index(b_index: int, m: int, k: int) -> int:
    """Outer boundary point of the (m+2k) square parallel to a given point."""
    b = boundary_point(b_index, m)
    return boundary_index(BoundaryPoint(b.side, b.offset + k), m + 2 * k)


def block_of(b_index: int, m: int, k: int) -> int:
    """Index of the K-block containing a boundary point of the M square."""
    b = boundary_point(b_index, m)
    return int(b.side) * (m // k) + b.offset // k


def smooth(Q: TransportMeasure, k: int, cap: float) -> SmoothedMeasure:
    """Route boundary mass through K x K frame squares to the larger square.

    Within each frame the flow factorizes as (uniform over the outer
    block) x (the inner restriction), so the resulting measure is the
    block average of Q placed on the parallel outer points.  The map is
    linear, preserves compatibility, and moves the drift by at most
    11 K q / M^2 <= 22 K B / M for measures feasible at cap B.
    """
    m = Q.m
    if k < 1 or m % k != 0:
        raise ValueError(f"block size {k} must divide {m}")
    m_out = m + 2 * k
    n_blocks = 4 * m // k
    block_sum = np.zeros((n_blocks, n_blocks))
    for i in range(4 * m):
        bi = block_of(i, m, k)
        for j in range(4 * m):
            block_sum[bi, block_of(j, m, k)] += Q.q[i, j]
    out = np.zeros((4 * m_out, 4 * m_out))
    for i in range(4 * m):
        oi = parallel_outer_index(i, m, k)
        for j in range(4 * m):
            oj = parallel_outer_index(j, m, k)
            out[oi, oj] = block_sum[block_of(i, m, k), block_of(j, m, k)] / (k * k)
    return SmoothedMeasure(m, k, cap, TransportMeasure(m_out, out), drift(Q), Q.total_mass)


def smooth_drift_bound(sm: SmoothedMeasure) -> float:
    """Guaranteed L1 drift displacement: 22 K B / M."""
    return 22.0 * sm.k * sm.cap / sm.m


def trim(sm: SmoothedMeasure, delta: float, k: int | None = None) -> SmoothedMeasure:
    """Floor entries to multiples of delta/K; entries already on the grid stay.

    The residual against the smoothed measure has entries below delta/K
    and marginal suprema at most 4 M delta / K.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    k = sm.k if k is None else k
    step = delta / k
    scaled = sm.measure.q / step
    floored = np.floor(scaled + 1e-9 * np.maximum(1.0, scaled)) * step
    return SmoothedMeasure(sm.m, sm.k, sm.cap, TransportMeasure(sm.measure.m, floored),
                           sm.source_drift, sm.source_mass)


def trim_class_cardinality_bound(m: int, k: int, cap: float, delta: float) -> float:
    """Count bound for block-constant trimmed measures: (1 + B/delta)^((4M/K)^2)."""
    return float(1.0 + cap / delta) ** ((4 * m // k) ** 2)


# ---------------------------------------------------------------------------
# Serialization: sparse triplets
# ---------------------------------------------------------------------------

_SIDE_NAMES = {Side.LEFT: "left", Side.RIGHT: "right", Side.BOTTOM: "bottom", Side.TOP: "top"}
_NAME_SIDES = {v: k for k, v in _SIDE_NAMES.items()}


def serialize_transport(Q: TransportMeasure) -> str:
    buf = io.StringIO()
    buf.write(f"# {SERIAL_VERSION}\n")
    buf.write(f"m={Q.m}\n")
    for i in range(4 * Q.m):
        for j in range(4 * Q.m):
            if Q.q[i, j] != 0.0:
                bi, bj = boundary_point(i, Q.m), boundary_point(j, Q.m)
                buf.write(
                    f"{_SIDE_NAMES[bi.side]}:{bi.offset} "
                    f"{_SIDE_NAMES[bj.side]}:{bj.offset} {float(Q.q[i, j])!r}\n"
                )
    return buf.getvalue()


def deserialize_transport(text: str) -> TransportMeasure:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith(f"# {SERIAL_VERSION}"):
        raise ValueError("not a recognized transport-measure file")
    m = None
    triplets = []
    for line in lines[1:]:
        if line.startswith("m="):
            m = int(line[2:])
        elif line:
            a, b, w = line.split()
            triplets.append((a, b, float(w)))
    if m is None:
        raise ValueError("missing size header")
    q = np.zeros((4 * m, 4 * m))
    for a, b, w in triplets:
        sa, oa = a.split(":")
        sb, ob = b.split(":")
        i = boundary_index(BoundaryPoint(_NAME_SIDES[sa], int(oa)), m)
        j = boundary_index(BoundaryPoint(_NAME_SIDES[sb], int(ob)), m)
        q[i, j] = w
    return TransportMeasure(m, q)
