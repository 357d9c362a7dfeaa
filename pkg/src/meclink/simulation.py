"""Repeated generate-and-fit runs and their summary table."""
from __future__ import annotations

import statistics
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .comparison import space_from_arrays
from .estimation import EstimatorConfig, fit_supervised, fit_unsupervised, round_half_up
from .mec import flr_estimate, flr_target_search, mec_set_of_size, mmr_estimate, true_error_rates
from .simgen import GeneratorSpec, generate_files

SUPERVISED = "supervised"
DEFAULT_RULES = (SUPERVISED, "mec+profile", "mec+empirical", "wj+empirical")

SUMMARY_COLUMNS = ("rule", "reps", "n_M_true_mean", "pi_hat_mean", "n_hat_m_mean", "n_hat_m_median",
                   "flr_true_mean", "mmr_true_mean", "flr_hat_mean", "mmr_hat_mean",
                   "size_mean", "converged_reps")
TARGET_COLUMNS = ("target_flr", "target_size_mean", "target_psi_hat_max",
                  "target_flr_true_mean", "target_mmr_true_mean")


def parse_rule(rule: str) -> EstimatorConfig | None:
    """``"supervised"`` or ``"<theta-rule>+<xi-rule>"``; returns None for supervised."""
    if rule == SUPERVISED:
        return None
    theta_rule, sep, xi_rule = rule.partition("+")
    if not sep:
        raise ValueError(f"rule {rule!r} is not of the form theta+xi")
    return EstimatorConfig(theta_rule=theta_rule, xi_rule=xi_rule)


@dataclass(frozen=True)
class RuleOutcome:
    rule: str
    n_M_true: int
    n: int
    n_hat_m: float
    flr_true: float
    mmr_true: float
    flr_hat: float
    mmr_hat: float
    size: int
    iterations: int
    converged: bool
    target_size: int | None = None
    target_psi_hat: float | None = None
    target_flr_true: float | None = None
    target_mmr_true: float | None = None


def run_replication(spec: GeneratorSpec, seed: np.random.SeedSequence,
                    rules: Sequence[str] = DEFAULT_RULES,
                    target_flr: float | None = None) -> list[RuleOutcome]:
    """Generate one pair of files from ``seed`` and fit it under every rule."""
    rng = np.random.default_rng(seed)
    files = generate_files(spec, rng)
    space = space_from_arrays(files.a_keys, files.b_keys, files.a_ids, files.b_ids)
    out = []
    for rule in rules:
        config = parse_rule(rule)
        if config is None:
            params = fit_supervised(space, files.truth)
            iterations, converged = 0, True
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_unsupervised(space, config)
            params, iterations, converged = fit.params, fit.iterations, fit.converged
        links = mec_set_of_size(space, params, round_half_up(params.n_M))
        rates = true_error_rates(links, files.truth, files.n_M)
        mmr_hat = mmr_estimate(links, params.n_M) if params.n_M > 0 else float("nan")
        extra = {}
        if target_flr is not None:
            search = flr_target_search(space, params, target_flr)
            t_rates = true_error_rates(search.mec, files.truth, files.n_M)
            extra = dict(target_size=search.mec.size, target_psi_hat=search.psi_hat,
                         target_flr_true=t_rates.flr, target_mmr_true=t_rates.mmr)
        out.append(RuleOutcome(rule, files.n_M, space.n, params.n_M, rates.flr, rates.mmr,
                               flr_estimate(links), mmr_hat, links.size, iterations, converged,
                               **extra))
    return out


def _replication_job(args):
    return run_replication(*args)


def run_study(spec: GeneratorSpec, reps: int, seed: int = 0, rules: Sequence[str] = DEFAULT_RULES,
              target_flr: float | None = None, workers: int = 1) -> list[list[RuleOutcome]]:
    """``reps`` replications with child seeds spawned from ``seed``.

    Results are returned in replication order and do not depend on ``workers``.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    for rule in rules:
        parse_rule(rule)
    children = np.random.SeedSequence(seed).spawn(reps)
    jobs = [(spec, child, tuple(rules), target_flr) for child in children]
    if workers <= 1:
        return [_replication_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replication_job, jobs))


def summarize(results: list[list[RuleOutcome]], target_flr: float | None = None) -> list[dict]:
    """One row per rule with replication means (and the median of n_hat_m)."""
    rows = []
    for i, rule in enumerate(o.rule for o in results[0]):
        per = [rep[i] for rep in results]
        mean = lambda attr: statistics.fmean(getattr(o, attr) for o in per)
        row = {
            "rule": rule,
            "reps": len(per),
            "n_M_true_mean": mean("n_M_true"),
            "pi_hat_mean": statistics.fmean(o.n_hat_m / o.n for o in per),
            "n_hat_m_mean": mean("n_hat_m"),
            "n_hat_m_median": statistics.median(o.n_hat_m for o in per),
            "flr_true_mean": mean("flr_true"),
            "mmr_true_mean": mean("mmr_true"),
            "flr_hat_mean": mean("flr_hat"),
            "mmr_hat_mean": mean("mmr_hat"),
            "size_mean": mean("size"),
            "converged_reps": sum(o.converged for o in per),
        }
        if target_flr is not None:
            row.update({
                "target_flr": target_flr,
                "target_size_mean": mean("target_size"),
                "target_psi_hat_max": max(o.target_psi_hat for o in per),
                "target_flr_true_mean": mean("target_flr_true"),
                "target_mmr_true_mean": mean("target_mmr_true"),
            })
        rows.append(row)
    return rows
