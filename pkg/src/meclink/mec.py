"""One-to-one link sets built by greedy deduplication in descending ratio order,
their entropy, and estimated and true error rates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .comparison import PatternTable, bits_string
from .errors import EmptySpaceError, EstimationError
from .model import LinkageParams, pattern_ratios, posterior


class Link(NamedTuple):
    a_id: object
    b_id: object
    gamma: tuple
    ratio: float
    posterior: float


@dataclass(frozen=True, eq=False)
class MecSet:
    """A one-to-one link set in construction order (ratio desc, a-id, b-id).

    Links are stored as flat pair indices into ``space``; ``ratios`` and
    ``posteriors`` are NaN when the set was built without parameters.
    """

    space: PatternTable
    pairs: np.ndarray
    ratios: np.ndarray
    posteriors: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pairs)

    def __len__(self):
        return self.size

    @property
    def patterns(self) -> np.ndarray:
        return self.space.pair_pattern[self.pairs]

    @property
    def a_index(self) -> np.ndarray:
        return self.pairs // self.space.n_B

    @property
    def b_index(self) -> np.ndarray:
        return self.pairs % self.space.n_B

    def id_pairs(self) -> list[tuple]:
        a_ids, b_ids = self.space.a_ids, self.space.b_ids
        return [(a_ids[i], b_ids[j]) for i, j in zip(self.a_index.tolist(), self.b_index.tolist())]

    @property
    def links(self) -> list[Link]:
        gam = self.space.gamma[self.patterns]
        return [Link(a, b, tuple(int(x) for x in g), float(r), float(p))
                for (a, b), g, r, p in zip(self.id_pairs(), gam, self.ratios, self.posteriors)]

    def pattern_bits(self) -> list[str]:
        return [bits_string(int(c), self.space.K) for c in self.space.codes[self.patterns]]

    @property
    def n_infinite(self) -> int:
        return int(np.isposinf(self.ratios).sum())

    @property
    def entropy(self) -> float:
        return entropy(self)

    def is_one_to_one(self) -> bool:
        a, b = self.a_index, self.b_index
        return len(np.unique(a)) == len(a) and len(np.unique(b)) == len(b)


def _make_set(space: PatternTable, pairs, r_pattern, n_M) -> MecSet:
    pairs = np.asarray(pairs, dtype=np.int64)
    if r_pattern is None:
        nan = np.full(len(pairs), np.nan)
        return MecSet(space, pairs, nan, nan.copy())
    r = r_pattern[space.pair_pattern[pairs]]
    return MecSet(space, pairs, r, posterior(r, n_M, space.n))


def _ratio_groups(r: np.ndarray):
    """Pattern indices grouped by equal ratio, in descending ratio order."""
    order = np.lexsort((np.arange(len(r)), -r))
    groups = []
    for p in order.tolist():
        if groups and r[groups[-1][0]] == r[p]:
            groups[-1].append(p)
        else:
            groups.append([p])
    return groups


def greedy_links(space: PatternTable, r: np.ndarray, limit: int | None = None,
                 min_ratio: float | None = None) -> np.ndarray:
    """Scan pairs by (ratio desc, a asc, b asc), keeping pairs whose records are both free."""
    n_B = space.n_B
    cap = min(space.n_A, space.n_B)
    if limit is not None:
        cap = min(cap, limit)
    used_a = np.zeros(space.n_A, dtype=bool)
    used_b = np.zeros(n_B, dtype=bool)
    out: list[int] = []
    if cap <= 0:
        return np.zeros(0, dtype=np.int64)
    for group in _ratio_groups(r):
        if min_ratio is not None and not r[group[0]] >= min_ratio:
            break
        if len(group) == 1:
            flat = space.pattern_pairs(group[0])
        else:
            flat = np.sort(np.concatenate([space.pattern_pairs(p) for p in group]))
        a, b = np.divmod(flat, n_B)
        free = ~used_a[a] & ~used_b[b]
        for f, i, j in zip(flat[free].tolist(), a[free].tolist(), b[free].tolist()):
            if used_a[i] or used_b[j]:
                continue
            used_a[i] = True
            used_b[j] = True
            out.append(f)
            if len(out) == cap:
                return np.array(out, dtype=np.int64)
    return np.array(out, dtype=np.int64)


def maximal_mec(space: PatternTable, params: LinkageParams | None = None) -> MecSet:
    """Pairs agreeing on every key where neither record agrees fully with anyone else."""
    full = np.uint64((1 << space.K) - 1) if space.K < 64 else np.uint64(np.iinfo(np.uint64).max)
    hit = np.flatnonzero(space.codes == full)
    if not hit.size:
        pairs = np.zeros(0, dtype=np.int64)
    else:
        flat = space.pattern_pairs(int(hit[0])).astype(np.int64)
        a, b = np.divmod(flat, space.n_B)
        unique_a = np.bincount(a, minlength=space.n_A)[a] == 1
        unique_b = np.bincount(b, minlength=space.n_B)[b] == 1
        pairs = flat[unique_a & unique_b]
    if params is None:
        return _make_set(space, pairs, None, 0.0)
    return _make_set(space, pairs, pattern_ratios(space, params), params.n_M)


def mec_set_of_size(space: PatternTable, params: LinkageParams, n_star: int) -> MecSet:
    if n_star < 0:
        raise ValueError("n_star must be non-negative")
    r = pattern_ratios(space, params)
    return _make_set(space, greedy_links(space, r, limit=int(n_star)), r, params.n_M)


def mec_set_by_threshold(space: PatternTable, params: LinkageParams, c: float) -> MecSet:
    if c < 0:
        raise ValueError("threshold must be non-negative")
    r = pattern_ratios(space, params)
    return _make_set(space, greedy_links(space, r, min_ratio=c), r, params.n_M)


def entropy(mec: MecSet) -> float:
    """Mean log ratio over the links; links with infinite ratio are left out
    of the mean and counted by ``MecSet.n_infinite``."""
    if mec.size == 0:
        raise EstimationError("entropy of an empty link set is undefined")
    r = mec.ratios
    finite = r[np.isfinite(r)]
    if finite.size == 0:
        return math.inf
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(finite)))


def flr_estimate(mec: MecSet) -> float:
    if mec.size == 0:
        return 0.0
    return float(np.mean(1.0 - mec.posteriors))


def mmr_estimate(mec: MecSet, n_M_hat: float) -> float:
    if n_M_hat <= 0:
        raise ValueError("n_M_hat must be positive")
    return float(1.0 - mec.posteriors.sum() / n_M_hat)


class FlrSearch(NamedTuple):
    threshold: float
    mec: MecSet
    psi_hat: float


def flr_target_search(space: PatternTable, params: LinkageParams, target_psi: float) -> FlrSearch:
    """Threshold on the grid of distinct ratios giving the largest link set
    whose estimated false link rate does not exceed ``target_psi``.

    Every threshold set is a prefix of the full scan, so one scan covers the
    whole grid.  If no threshold meets the target the highest one is returned.
    """
    if not 0 < target_psi < 1:
        raise ValueError("target_psi must lie in (0, 1)")
    if space.n == 0:
        raise EmptySpaceError("empty comparison space")
    r = pattern_ratios(space, params)
    full = _make_set(space, greedy_links(space, r), r, params.n_M)
    grid = np.unique(r)[::-1]
    cum_miss = np.concatenate([[0.0], np.cumsum(1.0 - full.posteriors)])
    # links are in descending ratio order, so a threshold keeps a prefix
    lengths = np.searchsorted(-full.ratios, -grid, side="right")
    with np.errstate(invalid="ignore", divide="ignore"):
        psi = np.where(lengths > 0, cum_miss[lengths] / np.maximum(lengths, 1), 0.0)
    ok = np.flatnonzero(psi <= target_psi)
    j = int(ok[-1]) if ok.size else 0
    size = int(lengths[j])
    mec = MecSet(space, full.pairs[:size], full.ratios[:size], full.posteriors[:size])
    return FlrSearch(float(grid[j]), mec, float(psi[j]))


class ErrorRates(NamedTuple):
    flr: float
    mmr: float


def true_error_rates(mec: MecSet, truth: Iterable[tuple], n_M_true: int | None = None) -> ErrorRates:
    truth = set(truth)
    if n_M_true is None:
        n_M_true = len(truth)
    pairs = mec.id_pairs()
    hits = sum(1 for p in pairs if p in truth)
    flr = (len(pairs) - hits) / len(pairs) if pairs else 0.0
    mmr = 1.0 - hits / n_M_true if n_M_true > 0 else 0.0
    return ErrorRates(flr, mmr)


def missing_match_delta(wide: MecSet, narrow: MecSet) -> float:
    """Expected matches gained by the wider of two nested link sets."""
    narrow_pairs = set(narrow.id_pairs())
    wide_pairs = wide.id_pairs()
    if not narrow_pairs <= set(wide_pairs):
        raise ValueError("narrow link set is not contained in the wide one")
    return math.fsum(g for p, g in zip(wide_pairs, wide.posteriors.tolist())
                     if p not in narrow_pairs)
