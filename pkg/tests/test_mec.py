import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meclink.comparison import PatternTable
from meclink.mec import (MecSet, greedy_links, entropy, flr_estimate, flr_target_search, maximal_mec,
                         mec_set_by_threshold, mec_set_of_size, missing_match_delta, mmr_estimate,
                         true_error_rates)
from meclink.model import LinkageParams, log_bernoulli, pattern_ratios, ratio_from_logs
from meclink.oracle import oracle_mec_set

from instances import N_M, diagonal_truth, perfect_keys, random_tiny


def _set_with_posteriors(g):
    """Diagonal links of a 6 x 6 space carrying the given posteriors."""
    space = PatternTable.from_gamma(np.eye(6, dtype=int)[:, :, None])
    pairs = np.arange(len(g)) * 7
    return MecSet(space, pairs, np.ones(len(g)), np.asarray(g, dtype=float))


def test_maximal_mec_perfect_keys():
    m1 = maximal_mec(perfect_keys())
    assert set(m1.id_pairs()) == diagonal_truth()


def test_maximal_mec_without_full_agreement():
    space = PatternTable.from_gamma(np.zeros((3, 3, 2), dtype=int))
    assert maximal_mec(space).size == 0


def test_maximal_mec_excludes_non_unique_agreement():
    gamma = np.zeros((2, 2, 1), dtype=int)
    gamma[0, 0] = gamma[0, 1] = 1
    assert maximal_mec(PatternTable.from_gamma(gamma)).size == 0
    gamma[0, 1] = 0
    gamma[1, 1] = 1
    assert maximal_mec(PatternTable.from_gamma(gamma)).id_pairs() == [(0, 0), (1, 1)]


def test_mec_set_of_size_examples():
    space = perfect_keys()
    params = LinkageParams([1.0], [0.0], N_M, space.n)
    assert mec_set_of_size(space, params, 0).size == 0
    assert set(mec_set_of_size(space, params, N_M).id_pairs()) == diagonal_truth()


def test_equal_ratios_fall_back_to_id_order():
    space = PatternTable.from_gamma(np.zeros((3, 3, 1), dtype=int), a_ids=(4, 7, 9), b_ids=(1, 2, 3))
    params = LinkageParams([0.5], [0.5], 1.0, 9)
    assert mec_set_of_size(space, params, 3).id_pairs() == [(4, 1), (7, 2), (9, 3)]


def test_higher_ratio_pair_can_be_skipped():
    # (0,0) has the top ratio and uses record a=0; (0,1) has a higher ratio than the
    # included (1,1) but loses its a-record
    gamma = np.zeros((2, 2, 2), dtype=int)
    gamma[0, 0] = (1, 1)
    gamma[0, 1] = (1, 0)
    gamma[1, 1] = (0, 1)
    space = PatternTable.from_gamma(gamma)
    params = LinkageParams([0.9, 0.6], [0.1, 0.4], 1.0, 4)
    r = pattern_ratios(space, params)
    assert r[space.pair_pattern[1]] > r[space.pair_pattern[3]]
    assert mec_set_of_size(space, params, 2).id_pairs() == [(0, 0), (1, 1)]


def test_threshold_sets():
    gamma = np.zeros((3, 3, 1), dtype=int)
    gamma[0, 0] = gamma[1, 1] = 1
    space = PatternTable.from_gamma(gamma)
    params = LinkageParams([0.9], [0.2], 2.0, 9)
    top = 0.9 / 0.2
    assert mec_set_by_threshold(space, params, top * 1.01).size == 0
    assert mec_set_by_threshold(space, params, 0.1 / 0.8 * 1.01).id_pairs() == [(0, 0), (1, 1)]
    assert mec_set_by_threshold(space, params, 0.0).size == 3


def test_threshold_zero_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        inst, space = random_tiny(rng, max_records=5)
        params = LinkageParams(inst.theta, inst.xi, inst.n_M, space.n)
        full = mec_set_by_threshold(space, params, 0.0)
        assert full.id_pairs() == oracle_mec_set(inst, min(inst.n_A, inst.n_B))


def test_entropy_examples():
    space = PatternTable.from_gamma(np.eye(3, dtype=int)[:, :, None])
    params = LinkageParams([0.9], [0.3], 1.0, 9)
    assert entropy(mec_set_of_size(space, params, 2)) == pytest.approx(math.log(3.0))
    unit = mec_set_of_size(space, LinkageParams([0.4], [0.4], 1.0, 9), 3)
    assert unit.entropy == 0.0
    r1, r0 = 0.9 / 0.3, 0.1 / 0.7
    # three links under the agreeing pattern, one under the disagreeing one
    mixed = MecSet(space, np.array([0, 4, 8, 1]), np.array([r1, r1, r1, r0]), np.zeros(4))
    assert entropy(mixed) == pytest.approx((3 * math.log(r1) + math.log(r0)) / 4)


def test_entropy_leaves_out_infinite_ratios():
    space = perfect_keys()
    params = LinkageParams([1.0], [0.0], N_M, space.n)
    mec = mec_set_of_size(space, params, N_M)
    assert mec.n_infinite == N_M
    assert entropy(mec) == math.inf


def test_flr_and_mmr_estimates():
    assert flr_estimate(_set_with_posteriors([1, 1, 1])) == 0.0
    assert flr_estimate(_set_with_posteriors([1, 1, 0.5])) == pytest.approx(1 / 6)
    mec = _set_with_posteriors([1, 0.9, 0.5, 0.6])
    assert mmr_estimate(mec, 3.0) == pytest.approx(0.0)
    assert mmr_estimate(mec, mec.size) == pytest.approx(flr_estimate(mec))
    assert mmr_estimate(_set_with_posteriors([]), 2.0) == 1.0


def test_flr_target_search_endpoints():
    space = PatternTable.from_gamma(np.eye(4, dtype=int)[:, :, None])
    params = LinkageParams([0.9], [0.3], 1.5, 16)
    res = flr_target_search(space, params, 0.99)
    assert res.threshold == pytest.approx(pattern_ratios(space, params).min())
    assert res.psi_hat <= 0.99
    perfect = perfect_keys()
    res = flr_target_search(perfect, LinkageParams([1.0], [0.0], N_M, perfect.n), 0.01)
    assert res.psi_hat == 0.0 and res.mec.size == N_M
    assert res.threshold == 0.0


def test_true_error_rates_examples():
    space = PatternTable.from_gamma(np.ones((4, 4, 1), dtype=int))
    params = LinkageParams([0.9], [0.5], 2.0, 16)
    mec = mec_set_of_size(space, params, 3)
    pairs = mec.id_pairs()
    assert true_error_rates(mec, pairs) == (0.0, 0.0)
    assert true_error_rates(mec, {(9, 9)}) == (1.0, 1.0)
    truth = {pairs[0], pairs[1], (3, 0), (2, 3)}
    assert true_error_rates(mec, truth, 4) == pytest.approx((1 / 3, 1 / 2))


def test_missing_match_delta():
    narrow = _set_with_posteriors([1, 0.9])
    assert missing_match_delta(narrow, narrow) == 0.0
    wide = MecSet(narrow.space, np.array([0, 7, 14]), np.ones(3), np.array([1, 0.9, 0.7]))
    assert missing_match_delta(wide, narrow) == pytest.approx(0.7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_mec_invariants(seed):
    rng = np.random.default_rng(seed)
    inst, space = random_tiny(rng)
    params = LinkageParams(inst.theta, inst.xi, inst.n_M, space.n)
    cap = min(space.n_A, space.n_B)
    sets = [mec_set_of_size(space, params, k) for k in range(cap + 1)]
    for k, mec in enumerate(sets):
        assert mec.is_one_to_one()
        assert np.all(np.diff(mec.ratios) <= 0)
        if k:
            assert mec.id_pairs()[:k - 1] == sets[k - 1].id_pairs()
        if k > 1:
            assert mec.entropy <= sets[k - 1].entropy + 1e-12
    grid = np.unique(pattern_ratios(space, params))
    flrs = [flr_estimate(mec_set_by_threshold(space, params, c)) for c in grid]
    assert np.all(np.diff(flrs) <= 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.floats(-30, 30))
def test_shared_scaling_leaves_sets_unchanged(seed, log_scale):
    rng = np.random.default_rng(seed)
    inst, space = random_tiny(rng)
    log_m = log_bernoulli(space.gamma, inst.theta)
    log_u = log_bernoulli(space.gamma, inst.xi)
    r = ratio_from_logs(log_m, log_u)
    scaled = ratio_from_logs(log_m + log_scale, log_u + log_scale)
    assert np.array_equal(greedy_links(space, r), greedy_links(space, scaled))
