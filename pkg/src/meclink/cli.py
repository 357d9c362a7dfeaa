"""Command-line interface: ``meclink {link,simulate,evaluate,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .comparison import KeySchema, build_comparison_space, dedup_keys
from .errors import EmptySpaceError, MecLinkError
from .estimation import THETA_RULES, XI_RULES, EstimatorConfig, fit_unsupervised, round_half_up
from .io import read_links, write_links, write_metrics, write_pattern_table, write_table, write_trace
from .mec import flr_estimate, flr_target_search, mec_set_of_size, mmr_estimate
from .simgen import (GeneratorSpec, categorical_schema, generate_files, ingest_csv,
                     read_truth_csv, write_key_csv, write_truth_csv)
from .simulation import DEFAULT_RULES, SUMMARY_COLUMNS, TARGET_COLUMNS, run_study, summarize

log = logging.getLogger("meclink")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NOT_CONVERGED = 4


class UsageError(Exception):
    pass


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _target(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("target FLR must lie in (0, 1)")
    return v


# ---------------------------------------------------------------- link

def cmd_link(args) -> int:
    schema = KeySchema.load(args.schema) if args.schema else KeySchema.default()
    A = dedup_keys(ingest_csv(args.file_a, schema))
    B = dedup_keys(ingest_csv(args.file_b, schema))
    space = build_comparison_space(A, B)
    if space.n == 0:
        raise EmptySpaceError("empty comparison space")
    if args.out_patterns:
        write_pattern_table(args.out_patterns, space)

    config = EstimatorConfig(theta_rule=args.theta_rule, xi_rule=args.xi_rule,
                             epsilon=args.epsilon, max_outer_iter=args.max_iter)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_unsupervised(space, config, cardinalities=schema.cardinalities)
    for w in caught:
        log.warning("%s", w.message)
    params = fit.params

    if args.target_flr is not None:
        search = flr_target_search(space, params, args.target_flr)
        links, threshold = search.mec, search.threshold
    else:
        links = mec_set_of_size(space, params, round_half_up(params.n_M))
        threshold = float(links.ratios.min()) if links.size else None

    write_links(args.out_links, links)
    metrics = {
        "n_hat_m": params.n_M,
        "pi_hat": params.pi,
        "size": links.size,
        "flr_hat": flr_estimate(links),
        "mmr_hat": mmr_estimate(links, params.n_M) if params.n_M > 0 else None,
        "entropy": _finite_or_none(links.entropy) if links.size else None,
        "threshold": _finite_or_none(threshold) if threshold is not None else None,
        "target_flr": args.target_flr,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "m1_size": fit.m1_size,
        "n_a": space.n_A,
        "n_b": space.n_B,
        "theta_rule": args.theta_rule,
        "xi_rule": args.xi_rule,
        "theta": [float(t) for t in params.theta],
        "xi": [float(x) for x in params.xi],
        "notes": list(fit.notes),
    }
    if args.out_metrics:
        write_metrics(args.out_metrics, metrics, timestamp=not args.no_timestamp)
    else:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out_trace:
        write_trace(args.out_trace, fit.trace)
    if not fit.converged:
        print(f"meclink: no convergence after {fit.iterations} iterations; "
              "outputs hold the last iterate", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------- simulate / sweep

def _generator_spec(args, p_A: float | None = None) -> GeneratorSpec:
    base = GeneratorSpec.load(args.generator_spec) if args.generator_spec else GeneratorSpec()
    changes = {"seed": args.seed}
    for attr, value in (("scenario", args.scenario), ("n_A", args.na), ("n_B", args.nb),
                        ("p_A", p_A if p_A is not None else getattr(args, "pa", None)),
                        ("name_coupling", args.name_coupling)):
        if value is not None:
            changes[attr] = value
    if args.alpha is not None:
        if len(args.alpha) not in (1, base.K):
            raise UsageError(f"--alpha needs 1 or {base.K} values, got {len(args.alpha)}")
        changes["alpha"] = np.array(args.alpha if len(args.alpha) > 1 else args.alpha[0])
    if args.missing_rate is not None:
        changes["missing_rate"] = args.missing_rate
    try:
        return base.with_(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _rules(args) -> tuple[str, ...]:
    rules = tuple(r.strip() for r in args.rules.split(",") if r.strip())
    if not rules:
        raise UsageError("--rules is empty")
    for r in rules:
        if r == "supervised":
            continue
        th, _, xi = r.partition("+")
        if th not in THETA_RULES or xi not in XI_RULES:
            raise UsageError(f"unknown rule {r!r}; use 'supervised' or theta+xi with theta in "
                             f"{THETA_RULES} and xi in {XI_RULES}")
    return rules


def _write_generated(spec: GeneratorSpec, seed: int, out_dir: Path) -> None:
    """Files of the first replication, as CSVs readable by ``meclink link``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    child = np.random.SeedSequence(seed).spawn(1)[0]
    files = generate_files(spec, np.random.default_rng(child))
    schema = categorical_schema(spec.schema)
    Path(out_dir / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2) + "\n")
    write_key_csv(out_dir / "file_a.csv", files.a_ids.tolist(), files.a_keys, schema)
    write_key_csv(out_dir / "file_b.csv", files.b_ids.tolist(), files.b_keys, schema)
    write_truth_csv(out_dir / "truth.csv", files.truth)
    spec.save(out_dir / "generator.json")


def _columns(target) -> tuple[str, ...]:
    return SUMMARY_COLUMNS + (TARGET_COLUMNS if target is not None else ())


def _emit_table(path, rows, columns) -> None:
    write_table(path or sys.stdout, rows, columns)


def cmd_simulate(args) -> int:
    spec = _generator_spec(args)
    rules = _rules(args)
    results = run_study(spec, args.reps, args.seed, rules, args.target_flr, args.workers)
    rows = summarize(results, args.target_flr)
    _emit_table(args.out_summary, rows, _columns(args.target_flr))
    if args.out_reps:
        rep_rows = [{"rep": i, **vars(o)} for i, rep in enumerate(results) for o in rep]
        write_table(args.out_reps, rep_rows, list(rep_rows[0]))
    if args.write_files:
        _write_generated(spec, args.seed, Path(args.write_files))
    return EXIT_OK


def cmd_sweep(args) -> int:
    rules = _rules(args)
    rows = []
    for p_A in args.pa_values:
        spec = _generator_spec(args, p_A=p_A)
        results = run_study(spec, args.reps, args.seed, rules, args.target_flr, args.workers)
        rows += [{"p_A": p_A, **row} for row in summarize(results, args.target_flr)]
    _emit_table(args.out_summary, rows, ("p_A",) + _columns(args.target_flr))
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    links = read_links(args.links)
    truth = read_truth_csv(args.truth)
    if len(set(links)) != len(links):
        log.warning("%s: duplicate links are counted once", args.links)
    links = set(links)
    hits = len(links & truth)
    result = {
        "size": len(links),
        "n_m_true": len(truth),
        "true_links": hits,
        "flr": (len(links) - hits) / len(links) if links else 0.0,
        "mmr": 1.0 - hits / len(truth) if truth else 0.0,
    }
    if args.out_metrics:
        write_metrics(args.out_metrics, result, timestamp=not args.no_timestamp)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_generator_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--generator-spec", help="JSON generator settings; flags below override it")
    p.add_argument("--scenario", type=int, choices=(1, 2))
    p.add_argument("--na", type=int, help="size of file A")
    p.add_argument("--nb", type=int, help="size of file B")
    p.add_argument("--alpha", type=_floats, help="error probability, scalar or one per key")
    p.add_argument("--name-coupling", type=float)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules", default=",".join(DEFAULT_RULES),
                   help="comma-separated fitting rules (default: %(default)s)")
    p.add_argument("--target-flr", type=_target)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-summary", help="summary CSV (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meclink", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("link", help="link two CSV files")
    p.add_argument("--file-a", required=True)
    p.add_argument("--file-b", required=True)
    p.add_argument("--schema", help="JSON key schema (default: built-in name/sex/birth-date keys)")
    p.add_argument("--theta-rule", choices=THETA_RULES, default="mec")
    p.add_argument("--xi-rule", choices=XI_RULES, default="profile")
    p.add_argument("--target-flr", type=_target)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--out-links", required=True)
    p.add_argument("--out-metrics")
    p.add_argument("--out-trace")
    p.add_argument("--out-patterns")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; linking is deterministic")
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("simulate", help="repeated synthetic generation and fitting")
    _add_generator_options(p)
    p.add_argument("--pa", type=float, help="fraction of A with a match in B")
    p.add_argument("--out-reps", help="per-replication CSV")
    p.add_argument("--write-files", metavar="DIR", help="also write the first replication's files")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="simulate over several match fractions")
    _add_generator_options(p)
    p.add_argument("--pa", dest="pa_values", type=_floats, required=True,
                   help="comma-separated match fractions")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="true error rates of a link set")
    p.add_argument("--links", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-metrics")
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="meclink: %(message)s")
    if getattr(args, "reps", 1) < 1 or getattr(args, "workers", 1) < 1:
        parser.error("--reps and --workers must be positive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"meclink: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MecLinkError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"meclink: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
