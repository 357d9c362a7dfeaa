"""Parameter estimation: the unsupervised iterative MEC algorithm, the supervised
baseline, the profile-EM non-match model and moment-based diagnostics."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .comparison import PatternTable
from .errors import EstimationError
from .mec import MecSet, _make_set, greedy_links, maximal_mec
from .model import (LinkageParams, PROB_EPS, clamp_probs, pattern_ratios, posterior,
                    solve_fixed_point)

log = logging.getLogger(__name__)

THETA_RULES = ("mec", "wj")
XI_RULES = ("empirical", "profile")


class MomentInstabilityWarning(UserWarning):
    """Moment estimators subtract two nearly equal large counts."""


@dataclass(frozen=True)
class EstimatorConfig:
    theta_rule: str = "mec"
    xi_rule: str = "profile"
    theta_init: tuple[float, ...] | None = None
    epsilon: float = 1e-6
    max_outer_iter: int = 200
    inner_em_tol: float = 1e-8
    inner_em_max_iter: int = 100

    def __post_init__(self):
        if self.theta_rule not in THETA_RULES:
            raise ValueError(f"theta_rule must be one of {THETA_RULES}")
        if self.xi_rule not in XI_RULES:
            raise ValueError(f"xi_rule must be one of {XI_RULES}")
        if self.theta_init is not None and not all(0 < t < 1 for t in self.theta_init):
            raise ValueError("theta_init entries must lie in (0, 1)")
        if self.epsilon <= 0 or self.inner_em_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iter < 1 or self.inner_em_max_iter < 1:
            raise ValueError("iteration limits must be positive")

    def initial_theta(self, K: int) -> np.ndarray:
        if self.theta_init is None:
            return np.full(K, 0.9)
        if len(self.theta_init) != K:
            raise ValueError(f"theta_init has {len(self.theta_init)} entries, expected {K}")
        return np.array(self.theta_init, dtype=float)


@dataclass(frozen=True)
class TraceEntry:
    """State of one outer iteration.

    ``entropy_sum`` is the total log ratio, under this iteration's ratios, of
    the link set the iteration started from, and ``entropy`` that total
    divided by the iteration's match count ``n_M``.  ``q_next_sum`` scores the
    link set handed to the next iteration with the same ratios.  Links with
    infinite ratio are left out of both sums.
    """

    iteration: int
    theta: np.ndarray
    xi: np.ndarray
    n_M: float
    set_size: int
    entropy: float
    entropy_sum: float
    q_next_sum: float


@dataclass(frozen=True, eq=False)
class FitResult:
    params: LinkageParams
    trace: tuple[TraceEntry, ...]
    converged: bool
    iterations: int
    m1_size: int
    links: MecSet
    notes: tuple[str, ...] = ()


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def xi_empirical(space: PatternTable, clamp: bool = True) -> np.ndarray:
    xi = space.agree_counts() / space.n
    return clamp_probs(xi) if clamp else xi


def theta_update_mec(mec_set: MecSet, clamp: bool = True) -> np.ndarray:
    """Agreement rate of every key over the links of ``mec_set``."""
    if mec_set.size == 0:
        raise EstimationError("cannot estimate agreement rates from an empty link set")
    theta = mec_set.space.gamma[mec_set.patterns].mean(axis=0)
    return clamp_probs(theta) if clamp else theta


def weighted_agreement(space: PatternTable, pair_weights) -> np.ndarray:
    """Weighted agreement rate over individual pairs: sum w*gamma / sum w."""
    w = np.asarray(pair_weights, dtype=float)
    if w.shape != (space.n,):
        raise ValueError("need one weight per pair")
    per_pattern = np.bincount(space.pair_pattern, weights=w, minlength=space.n_patterns)
    total = per_pattern.sum()
    if total <= 0:
        raise EstimationError("weights sum to zero")
    return per_pattern @ space.gamma / total


def theta_update_wj(space: PatternTable, params: LinkageParams, clamp: bool = True) -> np.ndarray:
    """Agreement rates over all pairs weighted by their match posterior.

    The normaliser is the updated expected match count, i.e. the sum of the
    posteriors the weights come from.
    """
    g = posterior(pattern_ratios(space, params), params.n_M, space.n)
    weights = space.counts * g
    total = math.fsum(weights.tolist())
    if total <= 0:
        raise EstimationError("expected match count is zero")
    theta = weights @ space.gamma / total
    return clamp_probs(theta) if clamp else theta


def mkd_empirical(keys: np.ndarray, cardinalities: Sequence[int]) -> list[np.ndarray]:
    """Per-field category frequencies over non-missing values (0 marks missing)."""
    keys = np.asarray(keys, dtype=np.int64)
    out = []
    for k, D in enumerate(cardinalities):
        col = keys[:, k]
        counts = np.bincount(col[col > 0], minlength=D + 1)[1:D + 1].astype(float)
        total = counts.sum()
        if total == 0:
            log.warning("field %d has no observed values; using a uniform distribution", k)
            out.append(np.full(D, 1.0 / D))
        else:
            out.append(counts / total)
    return out


@dataclass(frozen=True)
class ProfileEM:
    xi: np.ndarray
    u_kd: list
    loglik: tuple[float, ...]
    iterations: int
    fell_back: bool = False


def _log_field_probs(keys: np.ndarray, dists: Sequence[np.ndarray]) -> np.ndarray:
    """Sum over observed fields of log dist_k[z_k] for every record."""
    total = np.zeros(keys.shape[0])
    with np.errstate(divide="ignore"):
        for k, dist in enumerate(dists):
            col = keys[:, k]
            obs = col > 0
            padded = np.concatenate([[1.0], dist])
            total[obs] += np.log(padded[col[obs]])
    return total


def xi_profile_em(larger_keys: np.ndarray, m_kd: Sequence[np.ndarray], p_t: float, n_A: int,
                  config: EstimatorConfig = EstimatorConfig()) -> ProfileEM:
    """Non-match agreement rates from a two-class model of the larger file.

    With the match fraction held at ``p_t``, an EM over the unobserved match
    indicators of the larger file's records estimates their unmatched
    category distributions ``u_kd``; these are then combined with ``m_kd``
    into per-field agreement probabilities for a non-matched pair.
    """
    if not 0.0 <= p_t <= 1.0:
        raise ValueError("p_t must lie in [0, 1]")
    keys = np.asarray(larger_keys, dtype=np.int64)
    K = keys.shape[1]
    card = [len(d) for d in m_kd]
    u = mkd_empirical(keys, card)
    lm = _log_field_probs(keys, m_kd)
    with np.errstate(divide="ignore"):
        log_p, log_q = math.log(p_t) if p_t > 0 else -math.inf, math.log1p(-p_t) if p_t < 1 else -math.inf
    loglik: list[float] = []
    fell_back = False
    it = 0
    for it in range(1, config.inner_em_max_iter + 1):
        lu = _log_field_probs(keys, u)
        a, b = log_p + lm, log_q + lu
        joint = np.logaddexp(a, b)
        with np.errstate(invalid="ignore"):
            delta = np.exp(a - joint)
        delta = np.where(np.isfinite(joint), delta, 0.0)
        finite = joint[np.isfinite(joint)]
        ll = float(finite.sum())
        if loglik and ll < loglik[-1] - 1e-9 * (1 + abs(loglik[-1])):
            warnings.warn(f"profile EM log-likelihood decreased at inner iteration {it}",
                          RuntimeWarning, stacklevel=2)
        loglik.append(ll)
        w = 1.0 - delta
        if w.sum() < 1e-9:
            warnings.warn("all larger-file records look matched; using u_kd = m_kd",
                          RuntimeWarning, stacklevel=2)
            u = [np.array(d, dtype=float) for d in m_kd]
            fell_back = True
            break
        new_u = []
        for k in range(K):
            col = keys[:, k]
            obs = col > 0
            wk = np.bincount(col[obs], weights=w[obs], minlength=card[k] + 1)[1:card[k] + 1]
            s = wk.sum()
            new_u.append(wk / s if s > 0 else u[k])
        change = max(float(np.max(np.abs(nu - ou))) for nu, ou in zip(new_u, u))
        u = new_u
        if change < config.inner_em_tol:
            break

    xi = np.empty(K)
    for k in range(K):
        m = np.asarray(m_kd[k], dtype=float)
        xi[k] = ((1 - p_t) * float(u[k] @ m) + p_t * (1 - 1 / n_A) * float(m @ m)) / (1 - p_t / n_A)
    return ProfileEM(clamp_probs(xi), u, tuple(loglik), it, fell_back)


def _infer_cardinalities(*key_arrays: np.ndarray) -> list[int]:
    top = np.max(np.vstack([np.asarray(k, dtype=np.int64) for k in key_arrays]), axis=0)
    return [max(int(t), 2) for t in top]


def fit_unsupervised(space: PatternTable, config: EstimatorConfig = EstimatorConfig(),
                     a_keys: np.ndarray | None = None, b_keys: np.ndarray | None = None,
                     cardinalities: Sequence[int] | None = None) -> FitResult:
    """Jointly estimate the agreement model, the match count and the link set.

    Starting from the maximal link set, each iteration updates the non-match
    rates, the match rates (from the current link set, or posterior-weighted
    over all pairs for the ``wj`` rule), performs one substitution of the
    match-count fixed point and re-forms the link set at the rounded count.
    Iteration stops when the rounded count repeats or the match rates move by
    less than ``config.epsilon``.
    """
    notes: list[str] = []
    n, n_A, n_B = space.n, space.n_A, space.n_B
    upper = min(n_A, n_B)

    m1 = maximal_mec(space)
    current = m1.pairs
    seed_size = m1.size
    if seed_size == 0:
        msg = "no record pair agrees uniquely on all keys; starting from n_M = 1"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
        seed_size = 1

    if config.xi_rule == "profile":
        a_keys = space.a_keys if a_keys is None else a_keys
        b_keys = space.b_keys if b_keys is None else b_keys
        if a_keys is None or b_keys is None:
            raise EstimationError("the profile non-match rule needs the key values of both files")
        small, large = (a_keys, b_keys) if len(a_keys) <= len(b_keys) else (b_keys, a_keys)
        if cardinalities is None:
            cardinalities = _infer_cardinalities(a_keys, b_keys)
        m_kd = mkd_empirical(small, cardinalities)
        n_small, n_large = len(small), len(large)
    else:
        xi_fixed = xi_empirical(space)

    theta = config.initial_theta(space.K)
    prev_params: LinkageParams | None = None
    prev_n_M = float(seed_size)
    trace: list[TraceEntry] = []
    converged = False
    params = None
    next_pairs = current

    for t in range(config.max_outer_iter):
        if config.xi_rule == "profile":
            p_t = min(prev_n_M / n_large, 1.0)
            xi = xi_profile_em(large, m_kd, p_t, n_small, config).xi
        else:
            xi = xi_fixed

        old_theta = theta
        if t > 0:
            if config.theta_rule == "mec":
                if len(current):
                    theta = theta_update_mec(_make_set(space, current, None, 0.0))
            else:
                theta = theta_update_wj(space, prev_params)

        size_t = len(current) if t > 0 else seed_size
        params = LinkageParams(theta, xi, float(min(size_t, upper)), n)
        r = pattern_ratios(space, params)
        g = posterior(r, params.n_M, n)
        n_M_t = min(max(math.fsum((space.counts * g).tolist()), 0.0), float(upper))

        log_r = _finite_log(r)
        cur_sum = math.fsum(log_r[space.pair_pattern[current]].tolist())
        D_t = cur_sum / n_M_t if n_M_t > 0 else math.nan
        next_pairs = greedy_links(space, r, limit=round_half_up(n_M_t))
        q_sum = math.fsum(log_r[space.pair_pattern[next_pairs]].tolist())
        trace.append(TraceEntry(t, theta.copy(), np.array(xi), n_M_t, len(current), D_t, cur_sum, q_sum))

        if t > 0 and (round_half_up(n_M_t) == round_half_up(prev_n_M)
                      or float(np.max(np.abs(theta - old_theta))) < config.epsilon):
            converged = True
            prev_n_M = n_M_t
            break
        prev_params = params.with_n_M(float(min(size_t, upper)))
        prev_n_M = n_M_t
        current = next_pairs

    final = LinkageParams(params.theta, params.xi, prev_n_M, n)
    links = _make_set(space, next_pairs, pattern_ratios(space, final), final.n_M)
    return FitResult(final, tuple(trace), converged, len(trace), m1.size, links, tuple(notes))


def _finite_log(r: np.ndarray) -> np.ndarray:
    """log r with infinite ratios mapped to 0, so they drop out of sums."""
    with np.errstate(divide="ignore"):
        out = np.log(r)
    return np.where(np.isposinf(r), 0.0, out)


def truth_mask(space: PatternTable, truth) -> np.ndarray:
    """Boolean match indicator per flat pair from a set of ``(a_id, b_id)`` pairs
    or an existing length-``n`` boolean array."""
    if isinstance(truth, np.ndarray) and truth.shape == (space.n,):
        return truth.astype(bool)
    a_pos = {a: i for i, a in enumerate(space.a_ids)}
    b_pos = {b: j for j, b in enumerate(space.b_ids)}
    mask = np.zeros(space.n, dtype=bool)
    for a, b in truth:
        if a in a_pos and b in b_pos:
            mask[a_pos[a] * space.n_B + b_pos[b]] = True
    return mask


def fit_supervised(space: PatternTable, truth_labels, xi_source: str = "omega",
                   clamp: bool = True, solve: bool = True) -> LinkageParams:
    """Parameters from known matches.

    ``theta`` is the agreement rate over the labelled matches.  ``xi`` is the
    agreement rate over all pairs (``xi_source="omega"``) or over the
    labelled non-matches (``"nonmatches"``).  With ``solve`` the match count is
    the fixed point reached from the label count, otherwise the label count.
    """
    mask = truth_mask(space, truth_labels)
    n_M = int(mask.sum())
    if n_M == 0:
        raise EstimationError("no labelled matches in the comparison space")
    theta = space.gamma[space.pair_pattern[mask]].mean(axis=0)
    if xi_source == "omega":
        xi = xi_empirical(space, clamp=False)
    elif xi_source == "nonmatches":
        if n_M == space.n:
            raise EstimationError("no labelled non-matches in the comparison space")
        xi = space.gamma[space.pair_pattern[~mask]].mean(axis=0)
    else:
        raise ValueError("xi_source must be 'omega' or 'nonmatches'")
    if clamp:
        theta, xi = clamp_probs(theta), clamp_probs(xi)
    n_M_hat = float(n_M)
    if solve:
        n_M_hat = solve_fixed_point(space, theta, xi, min(n_M, space.n_A, space.n_B), tol=1e-10).n_M
    return LinkageParams(theta, xi, n_M_hat, space.n)


def moment_alpha(space: PatternTable, xi_hat, n_M_hat: float) -> np.ndarray:
    """Perturbation probabilities from the expected disagreement counts."""
    if n_M_hat <= 0:
        raise ValueError("n_M_hat must be positive")
    warnings.warn("moment-based perturbation estimates are very unstable when matches are rare",
                  MomentInstabilityWarning, stacklevel=2)
    xi = np.asarray(xi_hat, dtype=float)
    n = space.n
    n0 = n - space.agree_counts()
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = (n * (1 - xi) - n0) / (n_M_hat * (1 - xi))
    alpha = np.where(np.isfinite(keep), 1 - keep, 1.0)
    return np.clip(alpha, 0.0, 1.0)


class MomentNM(NamedTuple):
    n_M: int
    flat: bool


def moment_nm(space: PatternTable, xi_hat) -> MomentNM:
    """Minimum-distance match count over the integers 0..min(n_A, n_B)."""
    warnings.warn("moment-based match-count estimates are very unstable when matches are rare",
                  MomentInstabilityWarning, stacklevel=2)
    xi = np.asarray(xi_hat, dtype=float)
    n = space.n
    n0 = (n - space.agree_counts()).astype(float)
    grid = np.arange(min(space.n_A, space.n_B) + 1, dtype=float)
    delta = n0[None, :] - (n - grid[:, None]) * (1 - xi[None, :])
    obj = (delta ** 2).sum(axis=1)
    best = int(np.argmin(obj))
    flat = bool(np.ptp(obj) <= 1e-12 * max(1.0, float(np.abs(obj).max())))
    return MomentNM(best, flat)


@dataclass(frozen=True)
class MonotoneReport:
    """Iteration indices t+1 of the steps t -> t+1 that were checked, skipped,
    or where the entropy dropped (``violations``) or the total log ratio
    dropped (``total_violations``)."""

    checked: tuple[int, ...]
    violations: tuple[int, ...]
    skipped: tuple[int, ...] = field(default=())
    total_violations: tuple[int, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations


def entropy_monotone_check(fit: FitResult, tol: float = 1e-9) -> MonotoneReport:
    """Check that the entropy trace does not decrease where the greedy step
    raised the objective.

    For each step t -> t+1 the precondition is that, under the ratios of
    iteration t, the new link set has at least the total log ratio of the old
    one and that this total is positive.  Steps where it fails are listed in
    ``skipped``; a violation is reported by the index t+1 of the iteration
    whose entropy dropped.
    """
    checked, violations, skipped, totals = [], [], [], []
    tr = fit.trace
    for t in range(len(tr) - 1):
        cur, nxt = tr[t], tr[t + 1]
        if not (math.isfinite(cur.entropy) and math.isfinite(nxt.entropy)):
            skipped.append(t + 1)
            continue
        if not (cur.q_next_sum >= cur.entropy_sum and cur.q_next_sum > 0):
            skipped.append(t + 1)
            continue
        checked.append(t + 1)
        if nxt.entropy < cur.entropy - tol:
            violations.append(t + 1)
        if nxt.entropy_sum < cur.entropy_sum - tol:
            totals.append(t + 1)
    return MonotoneReport(tuple(checked), tuple(violations), tuple(skipped), tuple(totals))
