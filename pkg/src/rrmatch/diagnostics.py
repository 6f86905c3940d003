"""Last-mile diagnostics and statistical-convergence experiments.

The last-mile half quantifies why rank matchings lose resolution when two
clouds nearly coincide: pairs of near neighbors that the recursive partition
separates earlier than their distance warrants ("premature" pairs) force
costly within-cell matches.  The decomposition splits a realized plan cost
into a nearest-neighbor baseline plus a proportion-times-severity excess with
a machine-checkable lower bound.

The convergence half evaluates the population-anchored surrogate for samples
from the uniform law on the unit box, whose partition tree is analytic: every
split is a dyadic midpoint and the tree-curve de-interleaves the binary digits
of the parameter across axes.  Curve integrals are computed in closed form by
walking the binary digits of the integration endpoints, so the only
randomness left in the experiments is the sampling itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from rrmatch.core import Plan, PointCloud, RngSeed, SizeMismatchError, _as_cloud, derive_rng
from rrmatch.partition import MAX_DEPTH, build_tree, common_prefix_depth

_TAG_CONVERGENCE = 4
_TAG_THRESHOLDS = 5

#: Digit-walk truncation; contributions beyond this depth are below float64 noise.
_WALK_STEPS = 56


# ---------------------------------------------------------------------------
# Nearest-neighbor baseline and the proportion/severity decomposition
# ---------------------------------------------------------------------------


def _nn_partners(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbor in y for each row of x: (squared distances, indices)."""
    _, idx = cKDTree(y).query(x, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    diff = x - y[idx]
    return np.einsum("ij,ij->i", diff, diff), idx


def nn_baseline(X: PointCloud, Y: PointCloud) -> np.ndarray:
    """Distance from each point of X to its nearest neighbor in Y."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.d != Y.d:
        raise SizeMismatchError(f"dimension mismatch: {X.d} != {Y.d}")
    sq, _ = _nn_partners(X.coords, Y.coords)
    return np.sqrt(sq)


@dataclass(frozen=True)
class LastMileParams:
    """Depth calibration for the premature-split diagnostic.

    ``rho`` is the per-split side-length contraction factor (1/2 for densities
    bounded above and below by the same constant); ``diameter`` the scale at
    which the calibrated depth reaches zero, defaulting to sqrt(d), the
    diameter of the unit box.
    """

    depth: int
    d: int
    rho: float = 0.5
    diameter: float | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.diameter is not None and self.diameter <= 0.0:
            raise ValueError("diameter must be > 0")

    @property
    def effective_diameter(self) -> float:
        return self.diameter if self.diameter is not None else math.sqrt(self.d)


def calibrated_depth(dist: float, params: LastMileParams) -> int:
    """Depth by which a pair at the given distance should still share a cell.

    min(H, ceil(d * log_{1/rho}(C / dist))), clamped at 0, and H at dist = 0.
    Nonincreasing in dist.
    """
    return int(_calibrated_depth_vec(np.asarray([dist], dtype=np.float64), params)[0])


def _calibrated_depth_vec(dist: np.ndarray, params: LastMileParams) -> np.ndarray:
    out = np.full(dist.shape, params.depth, dtype=np.int64)
    positive = dist > 0.0
    if positive.any():
        ratio = params.effective_diameter / dist[positive]
        raw = np.ceil(params.d * np.log(ratio) / np.log(1.0 / params.rho))
        out[positive] = np.clip(raw, 0, params.depth).astype(np.int64)
    return out


def _centered(X: PointCloud, Y: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    # Translation does not affect quadratic transport geometry; aligning the
    # barycenters isolates the shape mismatch the diagnostic is after.
    x = X.coords - X.coords.mean(axis=0)
    y = Y.coords - Y.coords.mean(axis=0)
    return x, y


def _premature_core(
    x: np.ndarray, y: np.ndarray, params: LastMileParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared machinery: NN squared distances, partners, and bad indices."""
    delta_sq, jnn = _nn_partners(x, y)
    _, codes = build_tree(np.vstack([x, y]), params.depth)
    share = common_prefix_depth(codes[: x.shape[0]], codes[x.shape[0] :][jnn], params.depth)
    ell = _calibrated_depth_vec(np.sqrt(delta_sq), params)
    bad = np.flatnonzero(share < ell).astype(np.int64)
    return delta_sq, jnn, bad


def premature_set(
    X: PointCloud, Y: PointCloud, params: LastMileParams
) -> tuple[np.ndarray, float]:
    """Indices whose NN partners are separated earlier than geometry warrants.

    Both clouds are translated so their barycenters coincide and addressed in
    a single tree built on the union.  Returns the bad index set and its
    fraction of |X|.
    """
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.d != Y.d:
        raise SizeMismatchError(f"dimension mismatch: {X.d} != {Y.d}")
    x, y = _centered(X, Y)
    _, _, bad = _premature_core(x, y, params)
    return bad, bad.size / X.n


@dataclass(frozen=True)
class LastMileReport:
    """Proportion/severity decomposition of one realized plan.

    ``rrm_sq >= lower_bound`` holds up to rounding for every complete plan:
    the per-point excess over the NN baseline is nonnegative by definition of
    the baseline, and the bound keeps only the excess on the bad set.
    """

    delta: np.ndarray
    nn_term: float
    bad_set: np.ndarray
    alpha_H: float
    gamma_bar: float
    lower_bound: float
    rrm_sq: float


def plateau_decomposition(
    X: PointCloud, Y: PointCloud, plan: Plan, params: LastMileParams
) -> LastMileReport:
    """Decompose a complete plan's mean squared cost against the NN baseline.

    All quantities are evaluated after translating each cloud's barycenter to
    the origin, so the report isolates shape mismatch from any net offset
    between the clouds.
    """
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.d != Y.d or X.n != Y.n:
        raise SizeMismatchError("plateau_decomposition requires equal-size, equal-d clouds")
    if not plan.is_complete:
        raise ValueError("plateau_decomposition requires a complete plan")
    if plan.n != X.n:
        raise SizeMismatchError("plan size does not match cloud size")

    x, y = _centered(X, Y)
    delta_sq, _, bad = _premature_core(x, y, params)

    diff = x - y[plan.pi]
    cost = np.einsum("ij,ij->i", diff, diff)
    gamma = np.maximum(cost - delta_sq, 0.0)

    n = X.n
    nn_term = float(delta_sq.mean())
    alpha = bad.size / n
    gamma_bar = float(gamma[bad].mean()) if bad.size else 0.0
    return LastMileReport(
        delta=np.sqrt(delta_sq),
        nn_term=nn_term,
        bad_set=bad,
        alpha_H=alpha,
        gamma_bar=gamma_bar,
        lower_bound=nn_term + alpha * gamma_bar,
        rrm_sq=float(cost.mean()),
    )


# ---------------------------------------------------------------------------
# Analytic uniform population: addresses, curve points, exact curve integrals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformPopulation:
    """The uniform law on [0, 1]^d under the cycling mass-median partition.

    Every split threshold is the midpoint of its cell, so a point's address
    digits are the binary digits of its coordinates interleaved in schedule
    order, and the tree curve at parameter t de-interleaves the digits of t.
    ``depth`` truncates addresses for ordering.
    """

    d: int
    depth: int = 40

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 1 <= self.depth <= 40:
            raise ValueError(f"depth must be in [1, 40], got {self.depth}")

    def addresses(self, coords: np.ndarray) -> np.ndarray:
        """Packed analytic addresses (uint64, MSB-first) of in-box points."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != self.d:
            raise ValueError(f"expected (n, {self.d}) coordinates, got shape {coords.shape}")
        if (coords < 0.0).any() or (coords > 1.0).any():
            raise ValueError("points outside the unit box cannot be addressed")
        rem = coords.copy()
        codes = np.zeros(coords.shape[0], dtype=np.uint64)
        for p in range(self.depth):
            j = p % self.d
            digit = rem[:, j] > 0.5
            codes = (codes << np.uint64(1)) | digit.astype(np.uint64)
            rem[:, j] = np.where(digit, 2.0 * rem[:, j] - 1.0, 2.0 * rem[:, j])
        return codes

    def tree_points(self, ts: np.ndarray, steps: int = _WALK_STEPS) -> np.ndarray:
        """Curve points T(t): de-interleave the binary digits of each t."""
        ts = np.asarray(ts, dtype=np.float64)
        if (ts < 0.0).any() or (ts > 1.0).any():
            raise ValueError("parameters must lie in [0, 1]")
        rem = ts.copy()
        out = np.zeros((ts.shape[0], self.d))
        place = np.full(self.d, 0.5)
        for p in range(steps):
            j = p % self.d
            digit = rem > 0.5
            out[digit, j] += place[j]
            rem = np.where(digit, 2.0 * rem - 1.0, 2.0 * rem)
            place[j] *= 0.5
        return out

    def threshold_vector(self, depth: int) -> list[tuple[int, int, float]]:
        """Population split thresholds (h, k, m): all dyadic cell midpoints."""
        out = []
        for h in range(depth):
            j = h % self.d
            for k in range(1 << h):
                lo = np.zeros(self.d)
                hi = np.ones(self.d)
                for p in range(h):
                    axis = p % self.d
                    bit = (k >> (h - 1 - p)) & 1
                    mid = 0.5 * (lo[axis] + hi[axis])
                    if bit:
                        lo[axis] = mid
                    else:
                        hi[axis] = mid
                out.append((h, k, 0.5 * (lo[j] + hi[j])))
        return out

    def curve_integrals(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative curve integrals at each t: (int_0^t T, int_0^t ||T||^2).

        Walks the binary digits of t; whenever a digit is 1, the fully covered
        left sibling cell contributes in closed form.  Within a cell at depth
        p the curve is the cell's corner plus independent uniform-digit
        remainders per axis (mean 1/2, second moment 1/3 at the remaining
        scale), which gives exact first and second moments per cell.
        """
        ts = np.asarray(ts, dtype=np.float64)
        if (ts < 0.0).any() or (ts > 1.0).any():
            raise ValueError("parameters must lie in [0, 1]")
        m = ts.shape[0]
        rem = ts.copy()
        corner = np.zeros((m, self.d))
        place = np.full(self.d, 0.5)
        acc1 = np.zeros((m, self.d))
        acc2 = np.zeros(m)
        child_len = 0.5
        for p in range(_WALK_STEPS):
            j = p % self.d
            scale = 2.0 * place  # remaining-digit scale per axis after this split
            scale[j] = place[j]
            digit = rem > 0.5
            if digit.any():
                cb = corner[digit]
                acc1[digit] += child_len * (cb + 0.5 * scale)
                acc2[digit] += child_len * (cb * cb + cb * scale + (scale * scale) / 3.0).sum(axis=1)
                corner[digit, j] += place[j]
            rem = np.where(digit, 2.0 * rem - 1.0, 2.0 * rem)
            place[j] *= 0.5
            child_len *= 0.5
        # First-order tail of the last partial cell; O(2^-steps), below rounding.
        scale = 2.0 * place
        tail = rem * (2.0 * child_len)
        acc1 += tail[:, None] * (corner + 0.5 * scale)
        acc2 += tail * (corner * corner + corner * scale + (scale * scale) / 3.0).sum(axis=1)
        return acc1, acc2


def anchored_rrm_uniform(sample: PointCloud, pop: UniformPopulation) -> float:
    """Anchored surrogate distance between the uniform law and one sample.

    Points are ordered by their analytic addresses; the step inverse of the
    empirical prefix-mass function sends the k-th parameter interval
    [(k-1)/n, k/n) to the k-th ordered sample point, and the squared gap to
    the analytic curve is integrated exactly over each interval.
    """
    sample = _as_cloud(sample)
    if sample.d != pop.d:
        raise SizeMismatchError(f"sample dimension {sample.d} != population dimension {pop.d}")
    codes = pop.addresses(sample.coords)
    ordered = sample.coords[np.argsort(codes, kind="stable")]
    n = sample.n
    breakpoints = np.arange(n + 1, dtype=np.float64) / n
    g1, g2 = pop.curve_integrals(breakpoints)
    dg1 = np.diff(g1, axis=0)
    dg2 = np.diff(g2)
    total = float(
        (dg2 - 2.0 * np.einsum("ij,ij->i", dg1, ordered) + np.einsum("ij,ij->i", ordered, ordered) / n).sum()
    )
    return math.sqrt(max(total, 0.0))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceResult:
    """Per-n mean/sd of the anchored distance plus the fitted log-log slope."""

    rows: tuple[tuple[int, float, float], ...]
    slope: float
    theory_exponent: float


def convergence_experiment(
    d: int,
    n_list: list[int],
    reps: int,
    seed: RngSeed,
    depth: int = 40,
) -> ConvergenceResult:
    """Monte-Carlo decay of the anchored distance for uniform samples.

    The uniform density has contraction factor rho = 1/2, hence a Holder
    exponent of 1/d and a theoretical decay exponent of -min(1/(2d), 1/4);
    the fitted slope may be steeper since the rate is an upper bound.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    pop = UniformPopulation(d=d, depth=depth)
    rows = []
    for i, n in enumerate(n_list):
        values = np.empty(reps)
        for rep in range(reps):
            rng = derive_rng(seed, _TAG_CONVERGENCE, i, rep)
            values[rep] = anchored_rrm_uniform(PointCloud(rng.random((n, d))), pop)
        rows.append((int(n), float(values.mean()), float(values.std(ddof=1) if reps > 1 else 0.0)))
    means = np.array([r[1] for r in rows])
    ns = np.array([r[0] for r in rows], dtype=np.float64)
    slope = float(np.polyfit(np.log(ns), np.log(means), 1)[0]) if len(rows) > 1 else float("nan")
    alpha = 1.0 / d
    return ConvergenceResult(
        rows=tuple(rows),
        slope=slope,
        theory_exponent=-min(alpha / 2.0, 0.25),
    )


def threshold_consistency_experiment(
    d: int,
    depth: int,
    n_list: list[int],
    reps: int,
    seed: RngSeed,
) -> tuple[tuple[int, float], ...]:
    """Median over reps of max |empirical - population threshold| per n.

    Uniform samples on the unit box; population thresholds are the dyadic
    midpoints.  The deviation should shrink as n grows.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    pop = UniformPopulation(d=d, depth=max(depth, 1))
    reference = {(h, k): m for h, k, m in pop.threshold_vector(depth)}
    rows = []
    for i, n in enumerate(n_list):
        devs = np.empty(reps)
        for rep in range(reps):
            rng = derive_rng(seed, _TAG_THRESHOLDS, i, rep)
            tree, _ = build_tree(PointCloud(rng.random((n, d))), depth)
            worst = 0.0
            for h, k, m in tree.threshold_vector():
                worst = max(worst, abs(m - reference[(h, k)]))
            devs[rep] = worst
        rows.append((int(n), float(np.median(devs))))
    return tuple(rows)
