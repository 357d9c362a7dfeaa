"""Brute-force reference answers for tiny linkage instances.

Everything here works pair by pair on an explicit agreement array and avoids
the pattern table, the ratio grouping and the greedy scan of the production
modules, so that tests can compare two independent computations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_RECORDS = 8


@dataclass(frozen=True, eq=False)
class TinyInstance:
    """At most 8 x 8 records with an explicit ``(n_A, n_B, K)`` agreement array."""

    gamma: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    n_M: float
    a_ids: tuple = ()
    b_ids: tuple = ()

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.int64)
        if gamma.ndim != 3:
            raise ValueError("gamma must have shape (n_A, n_B, K)")
        n_A, n_B, K = gamma.shape
        if n_A > MAX_RECORDS or n_B > MAX_RECORDS:
            raise ValueError(f"tiny instances have at most {MAX_RECORDS} records per file")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(K))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).reshape(K))
        object.__setattr__(self, "a_ids", tuple(self.a_ids) or tuple(range(n_A)))
        object.__setattr__(self, "b_ids", tuple(self.b_ids) or tuple(range(n_B)))

    @property
    def n_A(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_B(self) -> int:
        return self.gamma.shape[1]

    @property
    def n(self) -> int:
        return self.n_A * self.n_B


def _prob(g, p) -> float:
    out = 1.0
    for gk, pk in zip(g, p):
        out *= pk if gk == 1 else 1.0 - pk
    return out


def pair_ratio(inst: TinyInstance, a: int, b: int) -> float:
    m = _prob(inst.gamma[a, b], inst.theta)
    u = _prob(inst.gamma[a, b], inst.xi)
    if m == 0.0:
        return 0.0
    if u == 0.0:
        return float("inf")
    return m / u


def pair_posterior(r: float, n_M: float, n: float) -> float:
    if r == float("inf"):
        return 1.0
    if r == 0.0 or n_M <= 0:
        return 0.0
    return min(n_M * r / (n_M * (r - 1.0) + n), 1.0)


def oracle_mec_set(inst: TinyInstance, n_star: int) -> list[tuple]:
    """Links as ``(a_id, b_id)`` in selection order: every pair sorted by
    (ratio desc, a-id asc, b-id asc), kept while both records are unused."""
    pairs = [(pair_ratio(inst, a, b), inst.a_ids[a], inst.b_ids[b])
             for a in range(inst.n_A) for b in range(inst.n_B)]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_a, used_b, out = set(), set(), []
    for _, a, b in pairs:
        if len(out) >= n_star:
            break
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        out.append((a, b))
    return out


def oracle_posterior_sum(inst: TinyInstance, n_M: float | None = None) -> float:
    """Sum of match posteriors over individual pairs."""
    n_M = inst.n_M if n_M is None else n_M
    total = 0.0
    for a in range(inst.n_A):
        for b in range(inst.n_B):
            total += pair_posterior(pair_ratio(inst, a, b), n_M, inst.n)
    return total


@dataclass(frozen=True)
class FixedPointScan:
    points: np.ndarray
    step: float
    degenerate: bool


def oracle_fixed_points(inst: TinyInstance, n_grid: int = 2001) -> FixedPointScan:
    """Grid points x in [0, min(n_A, n_B)] with |x - min(F(x), upper)| below
    one grid step, F(x) the pairwise posterior sum at match count x.

    ``degenerate`` is set when every grid point qualifies (for instance when
    the two agreement models coincide).
    """
    upper = min(inst.n_A, inst.n_B)
    grid = np.linspace(0.0, upper, n_grid)
    step = grid[1] - grid[0] if n_grid > 1 else float(upper)
    ratios = np.array([pair_ratio(inst, a, b) for a in range(inst.n_A) for b in range(inst.n_B)])
    x = grid[:, None]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        g = np.minimum(x * ratios / (x * (ratios - 1.0) + inst.n), 1.0)
    g = np.where(np.isinf(ratios)[None, :], 1.0, g)
    g = np.where((ratios == 0.0)[None, :] | (x <= 0), np.where(np.isinf(ratios)[None, :], 1.0, 0.0), g)
    F = np.minimum(g.sum(axis=1), upper)
    hit = np.abs(grid - F) < step
    return FixedPointScan(grid[hit], float(step), bool(hit.all()))
