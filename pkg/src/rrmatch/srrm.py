"""Selective rank matching: anchor-based screening plus exact finalization.

Each round matches the currently unresolved subsets augmented with synthetic
anchor points appended identically to both sides.  A real point matched to a
real point is committed as reliable and never revisited; a real point captured
by an anchor is carried into the next round.  Whatever survives the rounds is
completed by an exact assignment on the residual, and an optional guard makes
the result never worse than plain multi-run matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from rrmatch.core import (
    UNASSIGNED,
    CapExceededError,
    Plan,
    PointCloud,
    RngSeed,
    _as_cloud,
    derive_rng,
    derive_seed,
)
from rrmatch.matching import _check_pair, hungarian, merged_rrm, squared_distance_matrix

#: Anchor spread when a subset has a single point and no neighbor distance.
_LONE_POINT_SCALE = 0.01

#: Derivation-path tags (kept disjoint from matching's variant tag).
_TAG_ROUND = 2
_TAG_ANCHOR = 3


@dataclass(frozen=True)
class SrrmConfig:
    """Screening parameters.

    rounds=0 or anchors_per_point=0 degrades to plain merged matching followed
    by an empty finalization.  ``guard`` keeps one extra merged run and returns
    whichever complete plan is cheaper, making "never worse than merged" a
    hard invariant.
    """

    rounds: int = 10
    anchors_per_point: int = 5
    merge_runs: int = 8
    hungarian_cap: int = 4096
    seed: RngSeed = 0
    guard: bool = True

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.anchors_per_point < 0:
            raise ValueError("anchors_per_point must be >= 0")
        if self.merge_runs < 1:
            raise ValueError("merge_runs must be >= 1")
        if self.hungarian_cap < 0:
            raise ValueError("hungarian_cap must be >= 0")


@dataclass
class ScreeningState:
    """Mutable per-round state: global partial plan and unresolved index sets."""

    pi: np.ndarray
    unresolved_x: np.ndarray
    unresolved_y: np.ndarray
    round: int = 0
    history: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class SrrmResult:
    plan: Plan
    value: float
    history: tuple[int, ...]
    residual: int
    guard_applied: bool


def sample_near(
    P: PointCloud | np.ndarray, k: int, seed: RngSeed | np.random.Generator = 0
) -> np.ndarray:
    """Draw k anchors in the neighborhood of each point of P.

    Anchor (i, j) = p_i + g * sigma_i with g an isotropic standard normal draw
    and sigma_i the distance from p_i to its nearest neighbor within P (0.01
    for a lone point).  Anchors are clamped to the unit box.  Returns a
    (k * |P|, d) array; empty for k = 0.
    """
    P = _as_cloud(P)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k * P.n > (1 << 31):
        raise ValueError(f"anchor count {k}*{P.n} exceeds the sanity bound")
    if k == 0:
        return np.empty((0, P.d), dtype=np.float64)
    if P.n == 1:
        sigma = np.full(1, _LONE_POINT_SCALE)
    else:
        dist, _ = cKDTree(P.coords).query(P.coords, k=2)
        sigma = dist[:, 1]
        sigma = np.where(sigma > 0.0, sigma, _LONE_POINT_SCALE)
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    noise = rng.standard_normal((k, P.n, P.d))
    anchors = (P.coords[None, :, :] + noise * sigma[None, :, None]).reshape(k * P.n, P.d)
    return np.clip(anchors, 0.0, 1.0)


def select(T: Plan, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an augmented-problem plan into reliable pairs and leftovers.

    ``T`` is a complete plan on [reals; anchors] vs [reals; anchors] with m
    real points per side.  Returns (good, keep_x, keep_y): good is an array of
    (i, j) real-to-real pairs; keep_x the real sources matched to an anchor;
    keep_y the real targets captured by an anchor.  Bijectivity of T forces
    len(keep_x) == len(keep_y).
    """
    if not T.is_complete:
        raise ValueError("select requires a complete plan on the augmented sets")
    if not 0 <= m <= T.n:
        raise ValueError(f"real-count m={m} out of range for plan of size {T.n}")
    pi = T.pi
    real_targets = pi[:m]
    good_src = np.flatnonzero(real_targets < m)
    good = np.column_stack([good_src, real_targets[good_src]]).astype(np.int64)
    keep_x = np.flatnonzero(real_targets >= m).astype(np.int64)
    hit_by_real = np.zeros(m, dtype=bool)
    hit_by_real[real_targets[good_src]] = True
    keep_y = np.flatnonzero(~hit_by_real).astype(np.int64)
    return good, keep_x, keep_y


def finalize_hungarian(
    X: PointCloud,
    Y: PointCloud,
    partial: Plan,
    cap: int = 4096,
) -> Plan:
    """Complete a partial injective plan with an exact residual assignment.

    Unassigned sources are matched to unused targets by minimum total squared
    cost; committed entries are untouched.
    """
    X, Y = _check_pair(X, Y)
    pi = partial.pi.copy()
    rows = np.flatnonzero(pi == UNASSIGNED)
    if rows.size == 0:
        return partial
    used = np.zeros(X.n, dtype=bool)
    used[pi[pi != UNASSIGNED]] = True
    cols = np.flatnonzero(~used)
    if rows.size != cols.size:
        raise ValueError("partial plan is inconsistent: unassigned rows != unused columns")
    if rows.size > cap:
        raise CapExceededError(
            f"residual assignment of size {rows.size} exceeds cap {cap}; "
            "run more screening rounds or raise the cap"
        )
    sub = hungarian(squared_distance_matrix(X.coords[rows], Y.coords[cols]))
    pi[rows] = cols[sub.pi]
    diff = X.coords - Y.coords[pi]
    return Plan(pi=pi, squared_cost_sum=float(np.einsum("ij,ij->", diff, diff)))


def srrm_match(X: PointCloud, Y: PointCloud, cfg: SrrmConfig | None = None) -> SrrmResult:
    """Run the full screening pipeline and return a complete bijection.

    Per round: take the unresolved subsets, append anchors sampled near both
    subsets to both sides, compute a merged multi-run plan on the augmented
    sets, commit real-to-real pairs globally, and carry anchor-captured points
    forward.  Rounds stop early once nothing is unresolved.  The residual is
    finished exactly, and with the guard enabled the result is the cheaper of
    the pipeline plan and a plain merged plan computed with the same seed.
    """
    X, Y = _check_pair(X, Y)
    cfg = cfg or SrrmConfig()
    n = X.n
    k = cfg.anchors_per_point

    state = ScreeningState(
        pi=np.full(n, UNASSIGNED, dtype=np.int64),
        unresolved_x=np.arange(n, dtype=np.int64),
        unresolved_y=np.arange(n, dtype=np.int64),
    )

    if cfg.rounds == 0:
        # Degraded path: no screening happened, so the merged plan is the
        # pipeline output and finalization has nothing to do.
        base = merged_rrm(X, Y, cfg.merge_runs, cfg.seed)
        return SrrmResult(
            plan=base,
            value=base.rms,
            history=(),
            residual=0,
            guard_applied=False,
        )

    for r in range(cfg.rounds):
        m = state.unresolved_x.size
        if m == 0:
            break
        state.round = r
        xs = X.coords[state.unresolved_x]
        ys = Y.coords[state.unresolved_y]
        anchors = np.vstack(
            [
                sample_near(xs, k, derive_rng(cfg.seed, _TAG_ANCHOR, r, 0)),
                sample_near(ys, k, derive_rng(cfg.seed, _TAG_ANCHOR, r, 1)),
            ]
        )
        if anchors.shape[0] == 0:
            xa, ya = xs, ys
        else:
            xa = np.vstack([xs, anchors])
            ya = np.vstack([ys, anchors])
        T = merged_rrm(
            PointCloud(xa), PointCloud(ya), cfg.merge_runs, derive_seed(cfg.seed, _TAG_ROUND, r)
        )
        good, keep_x, keep_y = select(T, m)
        if good.size:
            state.pi[state.unresolved_x[good[:, 0]]] = state.unresolved_y[good[:, 1]]
        state.unresolved_x = state.unresolved_x[keep_x]
        state.unresolved_y = state.unresolved_y[keep_y]
        state.history.append(int(state.unresolved_x.size))

    residual = int(state.unresolved_x.size)
    partial = Plan(
        pi=state.pi,
        squared_cost_sum=_partial_cost(X, Y, state.pi),
    )
    plan = finalize_hungarian(X, Y, partial, cfg.hungarian_cap)

    guard_applied = False
    if cfg.guard:
        base = merged_rrm(X, Y, cfg.merge_runs, cfg.seed)
        if base.squared_cost_sum < plan.squared_cost_sum:
            plan = base
            guard_applied = True

    return SrrmResult(
        plan=plan,
        value=plan.rms,
        history=tuple(state.history),
        residual=residual,
        guard_applied=guard_applied,
    )


def _partial_cost(X: PointCloud, Y: PointCloud, pi: np.ndarray) -> float:
    mask = pi != UNASSIGNED
    if not mask.any():
        return 0.0
    diff = X.coords[mask] - Y.coords[pi[mask]]
    return float(np.einsum("ij,ij->", diff, diff))
