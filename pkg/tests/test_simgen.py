import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from meclink.comparison import KeyRecord, KeySchema
from meclink.errors import GenerationError, SchemaError
from meclink.simgen import (GeneratorSpec, JointBlock, categorical_schema, default_distributions,
                            draw_keys, generate_files, generate_population, ingest_csv,
                            matched_agreement_rate, perturb_hit_miss, read_truth_csv,
                            scenario_one, scenario_two, write_key_csv, write_truth_csv)


def test_default_distributions_follow_schema():
    schema = KeySchema.default()
    dists = default_distributions(schema)
    assert [len(d) for d in dists] == list(schema.cardinalities)
    assert all(abs(d.sum() - 1) < 1e-12 for d in dists)


def test_population_examples():
    assert generate_population(0, GeneratorSpec()) == []
    point = tuple(np.eye(f.cardinality)[0] for f in KeySchema.default().fields)
    recs = generate_population(20, GeneratorSpec(category_dists=point))
    assert {r.values for r in recs} == {(1,) * 12}


def test_population_frequencies_chi_square():
    spec = GeneratorSpec(category_dists=tuple(default_distributions()))
    keys = draw_keys(100_000, spec.category_dists, np.random.default_rng(1))
    for k, d in enumerate(spec.category_dists):
        observed = np.bincount(keys[:, k] - 1, minlength=len(d))
        keep = d > 0
        assert stats.chisquare(observed[keep], 100_000 * d[keep]).pvalue > 0.01


def test_joint_block_draws_whole_rows():
    block = JointBlock((0, 1), np.array([[1, 2], [2, 1]]), np.array([3.0, 1.0]))
    dists = [np.array([0.5, 0.5]), np.array([0.5, 0.5])]
    keys = draw_keys(5000, dists, np.random.default_rng(0), [block], coupling=1.0)
    assert {tuple(r) for r in keys.tolist()} == {(1, 2), (2, 1)}
    assert np.mean(keys[:, 0] == 1) == pytest.approx(0.75, abs=0.03)
    assert block.marginal(0, 2).tolist() == [0.75, 0.25]


def test_perturbation_edge_cases():
    rng = np.random.default_rng(0)
    rec = KeyRecord(3, (1,) * 12)
    assert perturb_hit_miss(rec, GeneratorSpec(alpha=0.0, missing_rate=0.0), rng) == rec
    point = tuple(np.eye(f.cardinality)[0] for f in KeySchema.default().fields)
    spec = GeneratorSpec(category_dists=point, alpha=1.0, missing_rate=0.0)
    assert perturb_hit_miss(rec, spec, rng) == rec


@pytest.mark.parametrize("coupled", [False, True])
def test_hit_miss_agreement_rate(coupled):
    kw = {} if coupled else {"category_dists": tuple(default_distributions())}
    spec = GeneratorSpec(alpha=np.linspace(0.05, 0.5, 12), missing_rate=0.0, seed=9, **kw)
    rate, se = matched_agreement_rate(spec, 100_000)
    assert np.all(np.abs(rate - spec.matched_theta()) < 3 * se)


def test_missingness_lowers_matched_agreement():
    spec = GeneratorSpec(missing_rate=0.05, seed=2)
    rate, se = matched_agreement_rate(spec, 100_000)
    assert np.all(np.abs(rate - spec.matched_theta()) < 3 * se)


def test_scenario_one_full_overlap():
    spec = GeneratorSpec(n_A=30, n_B=30, p_A=1.0, alpha=0.0, missing_rate=0.0)
    files = generate_files(spec, dedup=False)
    assert files.n_M == 30


def test_scenario_one_mean_overlap():
    spec = GeneratorSpec(n_A=50, n_B=100, p_A=0.8)
    counts = [generate_files(spec.with_(seed=s), dedup=False).n_M for s in range(200)]
    # hypergeometric: 50 draws from a pool of 125 with 100 marked
    n0, K, N = 125, 100, 50
    mean = N * K / n0
    sd = np.sqrt(N * K / n0 * (n0 - K) / n0 * (n0 - N) / (n0 - 1))
    assert abs(np.mean(counts) - mean) < 3 * sd / np.sqrt(200)
    assert np.std(counts, ddof=1) == pytest.approx(sd, rel=0.25)


def test_scenario_two_fixed_overlap_and_filter():
    # without perturbation the observed keys are the true keys the filter applies to
    spec = GeneratorSpec(scenario=2, seed=3, alpha=0.0, missing_rate=0.0)
    files = generate_files(spec, dedup=False)
    assert files.n_M == 400
    matched_b = {b for _, b in files.truth}
    idx = {name: spec.schema.index(name) for name in ("sex", "year", "month")}
    for j, row in zip(files.b_ids, files.b_keys):
        if j in matched_b:
            continue
        for name, rel, value in spec.informative_filter:
            v = row[idx[name]]
            if rel == "==":
                assert v == value
            elif rel == "<=":
                assert v <= value
            else:
                assert v % 2 == 1


def test_scenario_two_filter_without_categories():
    spec = GeneratorSpec(scenario=2, informative_filter=(("sex", "==", 3),))
    with pytest.raises(GenerationError):
        generate_files(spec)


def test_scenario_wrappers_return_records():
    a, b, truth = scenario_one(GeneratorSpec(n_A=20, n_B=40))
    assert all(isinstance(r, KeyRecord) for r in a + b)
    assert truth <= {(x.id, y.id) for x in a for y in b}
    a, b, truth = scenario_two(GeneratorSpec(n_A=20, n_B=40, scenario=2))
    assert len(truth) == 16


def test_same_seed_same_files():
    spec = GeneratorSpec(n_A=40, n_B=80, seed=11)
    x, y = generate_files(spec), generate_files(spec)
    assert np.array_equal(x.a_keys, y.a_keys) and np.array_equal(x.b_keys, y.b_keys)
    assert x.truth == y.truth


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 2))
def test_perturbation_keeps_ids_and_truth(seed, scenario):
    spec = GeneratorSpec(n_A=30, n_B=60, seed=seed, scenario=scenario)
    clean = generate_files(spec.with_(alpha=0.0, missing_rate=0.0), dedup=False)
    noisy = generate_files(spec.with_(alpha=0.5), dedup=False)
    assert np.array_equal(clean.a_ids, noisy.a_ids) and np.array_equal(clean.b_ids, noisy.b_ids)
    assert clean.truth == noisy.truth


def test_generator_spec_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        GeneratorSpec(alpha=1.5)
    with pytest.raises(ValueError):
        GeneratorSpec(scenario=3)
    spec = GeneratorSpec(n_A=10, n_B=20, p_A=0.5, alpha=0.2, seed=4)
    spec.save(tmp_path / "g.json")
    back = GeneratorSpec.load(tmp_path / "g.json")
    assert back.to_dict() == spec.to_dict()
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict({"bogus": 1})


def test_csv_round_trip(tmp_path):
    spec = GeneratorSpec(n_A=15, n_B=30, seed=1)
    files = generate_files(spec)
    schema = categorical_schema(spec.schema)
    write_key_csv(tmp_path / "a.csv", files.a_ids, files.a_keys, schema)
    recs = ingest_csv(tmp_path / "a.csv", schema)
    assert [r.values for r in recs] == [tuple(v or None for v in row) for row in files.a_keys.tolist()]
    write_truth_csv(tmp_path / "t.csv", files.truth)
    assert read_truth_csv(tmp_path / "t.csv") == {(str(a), str(b)) for a, b in files.truth}


def test_ingest_examples(tmp_path, caplog):
    schema = KeySchema.default()
    path = tmp_path / "f.csv"
    path.write_text("id,forename,surname,sex,dob\n")
    assert ingest_csv(path, schema) == []
    path.write_text("id,forename,surname,sex,dob\n1,Copas,Hilton,F,1970-03-05\n")
    (rec,) = ingest_csv(path, schema)
    assert rec.id == "1" and rec.complete
    path.write_text("id,forename,surname,sex,dob\n1,Copas,Hilton,F,1970-13-45\n")
    with caplog.at_level(logging.WARNING):
        (rec,) = ingest_csv(path, schema)
    assert rec.values[9:] == (None, None, None)
    assert "f.csv:2" in caplog.text


def test_ingest_errors(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("id,forename\n1,A\n")
    with pytest.raises(SchemaError, match="surname"):
        ingest_csv(path, KeySchema.default())
    with pytest.raises(FileNotFoundError):
        ingest_csv(tmp_path / "missing.csv", KeySchema.default())
