"""Agreement-probability models, probability ratios and the match-count fixed point."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .comparison import PatternTable, pack_bits

PROB_EPS = 1e-6


def clamp_probs(p, eps: float = PROB_EPS) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


@dataclass(frozen=True)
class LinkageParams:
    """Agreement probabilities under matches (``theta``) and non-matches (``xi``).

    ``n_M`` is the expected number of matches among the ``n`` pairs; it is kept
    real-valued and only rounded when a link-set size is needed.
    """

    theta: np.ndarray
    xi: np.ndarray
    n_M: float
    n: int

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if self.theta.shape != self.xi.shape or self.theta.ndim != 1:
            raise ValueError("theta and xi must be 1-d arrays of equal length")
        if self.n <= 0:
            raise ValueError("n must be positive")
        if not 0.0 <= self.n_M <= self.n:
            raise ValueError(f"n_M={self.n_M} outside [0, n]")

    @property
    def K(self) -> int:
        return len(self.theta)

    @property
    def pi(self) -> float:
        return self.n_M / self.n

    def with_n_M(self, n_M: float) -> "LinkageParams":
        return LinkageParams(self.theta, self.xi, float(n_M), self.n)

    def to_dict(self) -> dict:
        return {"theta": [float(t) for t in self.theta], "xi": [float(x) for x in self.xi],
                "n_M": float(self.n_M), "n": int(self.n), "pi": self.pi}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinkageParams":
        return cls(np.array(doc["theta"]), np.array(doc["xi"]), float(doc["n_M"]), int(doc["n"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LinkageParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def log_bernoulli(gamma, p) -> np.ndarray:
    """Sum over fields of log p^g (1-p)^(1-g); ``gamma`` has shape (..., K)."""
    gamma = np.asarray(gamma)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        lp = np.log(p)
        lq = np.log1p(-p)
    terms = np.where(gamma == 1, lp, lq)
    return terms.sum(axis=-1)


def m_prob(gamma, theta) -> np.ndarray:
    return np.exp(log_bernoulli(gamma, theta))


def u_prob(gamma, xi) -> np.ndarray:
    return np.exp(log_bernoulli(gamma, xi))


def ratio_from_logs(log_m, log_u) -> np.ndarray:
    log_m = np.asarray(log_m, dtype=float)
    log_u = np.asarray(log_u, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        r = np.exp(log_m - log_u)
    r = np.where(np.isneginf(log_u), np.inf, r)
    return np.where(np.isneginf(log_m), 0.0, r)


def ratio(gamma, params: LinkageParams) -> np.ndarray:
    """m(gamma; theta) / u(gamma; xi), infinite where only u vanishes."""
    return ratio_from_logs(log_bernoulli(gamma, params.theta), log_bernoulli(gamma, params.xi))


def posterior(r, n_M: float, n: float) -> np.ndarray:
    """Match probability of a randomly drawn pair with ratio ``r``, capped at 1."""
    r = np.asarray(r, dtype=float)
    if n_M <= 0:
        return np.where(np.isposinf(r), 1.0, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = n_M * r / (n_M * (r - 1.0) + n)
    g = np.where(np.isposinf(r), 1.0, g)
    g = np.where(r == 0, 0.0, g)
    return np.minimum(g, 1.0)


def match_posterior(gamma, params: LinkageParams) -> np.ndarray:
    return posterior(ratio(gamma, params), params.n_M, params.n)


def pattern_ratios(space: PatternTable, params: LinkageParams) -> np.ndarray:
    return ratio(space.gamma, params)


def _posterior_sum(counts, r, n_M, n) -> float:
    return math.fsum((counts * posterior(r, n_M, n)).tolist())


def expected_matches(space: PatternTable, params: LinkageParams) -> float:
    """Right-hand side of the match-count fixed point: sum of n(gamma) * g(gamma)."""
    return _posterior_sum(space.counts, pattern_ratios(space, params), params.n_M, space.n)


class FixedPoint(NamedTuple):
    n_M: float
    converged: bool
    iterations: int


def solve_fixed_point(space: PatternTable, theta, xi, n_M_init: float,
                      tol: float = 1e-6, max_iter: int = 10_000) -> FixedPoint:
    """Successive substitution n_M <- sum n(gamma) g(gamma; n_M), clamped to [0, min(n_A, n_B)]."""
    upper = min(space.n_A, space.n_B)
    if not 0 <= n_M_init <= upper:
        raise ValueError(f"n_M_init={n_M_init} outside [0, {upper}]")
    params = LinkageParams(theta, xi, 0.0, space.n)
    r = pattern_ratios(space, params)
    x = float(n_M_init)
    for it in range(1, max_iter + 1):
        new = min(max(_posterior_sum(space.counts, r, x, space.n), 0.0), upper)
        if abs(new - x) < tol:
            return FixedPoint(new, True, it)
        x = new
    return FixedPoint(x, False, max_iter)


class SupervisedObjectives(NamedTuple):
    Q_f: float
    Q: float | None


def supervised_objectives(gamma_M: Sequence[Sequence[int]], space: PatternTable,
                          params: LinkageParams) -> SupervisedObjectives:
    """Diagnostic objectives for a labelled match set, as functions of ``params.theta``.

    ``Q_f`` weighs by the pattern frequency over all pairs; ``Q`` by the
    frequency over non-matches and is ``None`` when some matched pattern never
    occurs among non-matches.
    """
    gamma_M = np.asarray(gamma_M, dtype=np.int64)
    if gamma_M.ndim != 2 or gamma_M.shape[0] == 0:
        raise ValueError("gamma_M must be a non-empty (n_M, K) array")
    n_M = gamma_M.shape[0]
    codes_M, counts_M = np.unique([pack_bits(g) for g in gamma_M], return_counts=True)
    freq = dict(zip(space.codes.tolist(), space.counts.tolist()))
    n = space.n
    n_U = n - n_M

    support = np.array([[(int(c) >> k) & 1 for k in range(space.K)] for c in codes_M])
    log_m = log_bernoulli(support, params.theta)
    m = np.exp(log_m)
    f = np.array([freq.get(int(c), 0) for c in codes_M], dtype=float) / n
    with np.errstate(divide="ignore"):
        log_rq = log_m - np.log(f)
    Q_f = float(m.sum() - (counts_M * log_rq).sum() / n_M)

    u = np.array([freq.get(int(c), 0) - k for c, k in zip(codes_M, counts_M)], dtype=float)
    if n_U <= 0 or np.any(u <= 0):
        return SupervisedObjectives(Q_f, None)
    u /= n_U
    Q = float(m.sum() - (counts_M * (log_m - np.log(u))).sum() / n_M)
    return SupervisedObjectives(Q_f, Q)
