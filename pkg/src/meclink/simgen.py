"""Synthetic linkage files under a hit-miss key-error model, and CSV ingestion.

Entities carry true categorical keys, drawn independently per field except
for joint blocks.  With probability ``name_coupling`` an entity takes all
four soundex fields of a name together from a bundled name list, which keeps
letter and digits coupled as in real names; otherwise each field is drawn
from the block's marginal.

Each file copy of a key is perturbed independently.  With a per-record
probability the value is redrawn from the field's distribution (possibly
hitting the true value again), chosen so that a matched pair is perturbed on
field k with probability ``alpha[k]``.  Values are then blanked with
probability ``missing_rate[k]``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .comparison import KeyField, KeyRecord, KeySchema, encode_record
from .errors import DataError, GenerationError, SchemaError

log = logging.getLogger(__name__)

# field, relation, value; relations act on category indices
DEFAULT_FILTER = (("sex", "==", 2), ("year", "<=", 1970 - 1909), ("month", "odd", None))

_RELATIONS = {
    "==": lambda c, v: c == v,
    "!=": lambda c, v: c != v,
    "<": lambda c, v: c < v,
    "<=": lambda c, v: c <= v,
    ">": lambda c, v: c > v,
    ">=": lambda c, v: c >= v,
    "odd": lambda c, v: c % 2 == 1,
    "even": lambda c, v: c % 2 == 0,
    "in": lambda c, v: np.isin(c, list(v)),
}

DEFAULT_ALPHA = 0.1
DEFAULT_COUPLING = 0.35
DEFAULT_MISSING = 0.0075


def _bundled() -> dict:
    return json.loads(resources.files("meclink").joinpath("data/default_frequencies.json").read_text())


@dataclass(frozen=True, eq=False)
class JointBlock:
    """Fields whose true values are drawn together as rows of ``codes``."""

    fields: tuple[int, ...]
    codes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if codes.ndim != 2 or codes.shape != (len(w), len(self.fields)):
            raise ValueError("codes must have one row per weight and one column per field")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("block weights must be non-negative and not all zero")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "weights", w / w.sum())

    def marginal(self, j: int, cardinality: int) -> np.ndarray:
        return np.bincount(self.codes[:, j] - 1, weights=self.weights, minlength=cardinality)[:cardinality]

    def restricted(self, mask: np.ndarray) -> "JointBlock":
        if not np.any(mask & (self.weights > 0)):
            raise GenerationError("informative filter leaves no row in a joint block")
        return JointBlock(self.fields, self.codes[mask], self.weights[mask])


def default_name_blocks(schema: KeySchema) -> tuple[JointBlock, ...]:
    """Joint blocks for the soundex fields of the bundled forename and surname lists."""
    names = _bundled()["names"]
    expo = float(names["zipf_exponent"])
    blocks = []
    for column, key in (("forename", "forename"), ("surname", "surname")):
        idx = [k for k, f in enumerate(schema.fields) if f.encoder == "soundex-split" and f.column == column]
        if not idx:
            continue
        rows = [[schema.fields[k].encode(name) for k in idx] for name in names[key]]
        weights = (np.arange(len(rows)) + 1.0) ** -expo
        blocks.append(JointBlock(tuple(idx), np.array(rows, dtype=np.int64), weights))
    return tuple(blocks)


def default_distributions(schema: KeySchema | None = None) -> list[np.ndarray]:
    """Bundled per-field category distributions for the default twelve-key schema."""
    schema = schema or KeySchema.default()
    doc = _bundled()
    out = []
    for f in schema.fields:
        try:
            w = np.asarray(doc["fields"][f.name], dtype=float)
        except KeyError:
            raise SchemaError(f"no bundled distribution for field {f.name!r}") from None
        if len(w) != f.cardinality:
            raise SchemaError(f"bundled distribution for {f.name!r} has {len(w)} categories")
        out.append(w / w.sum())
    return out


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    schema: KeySchema = field(default_factory=KeySchema.default)
    category_dists: tuple = ()
    alpha: np.ndarray | float = DEFAULT_ALPHA
    n_A: int = 500
    n_B: int = 1000
    p_A: float = 0.8
    scenario: int = 1
    informative_filter: tuple = DEFAULT_FILTER
    seed: int = 0
    joint_blocks: tuple | None = None
    name_coupling: float = DEFAULT_COUPLING
    missing_rate: np.ndarray | float = DEFAULT_MISSING

    def __post_init__(self):
        K = self.schema.K
        blocks = self.joint_blocks
        if blocks is None:
            blocks = () if self.category_dists else default_name_blocks(self.schema)
        object.__setattr__(self, "joint_blocks", tuple(blocks))
        dists = self.category_dists or tuple(default_distributions(self.schema))
        dists = [np.asarray(d, dtype=float) for d in dists]
        # fields in a joint block take the block's marginal
        for blk in blocks:
            for j, k in enumerate(blk.fields):
                dists[k] = blk.marginal(j, self.schema.fields[k].cardinality)
        dists = tuple(dists)
        if len(dists) != K:
            raise ValueError(f"need {K} category distributions, got {len(dists)}")
        for f, d in zip(self.schema.fields, dists):
            if len(d) != f.cardinality or np.any(d < 0) or abs(d.sum() - 1) > 1e-9:
                raise ValueError(f"invalid category distribution for field {f.name!r}")
        object.__setattr__(self, "category_dists", dists)
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (K,)).copy()
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise ValueError("alpha must lie in [0, 1]")
        object.__setattr__(self, "alpha", alpha)
        miss = np.broadcast_to(np.asarray(self.missing_rate, dtype=float), (K,)).copy()
        if np.any(miss < 0) or np.any(miss >= 1):
            raise ValueError("missing_rate must lie in [0, 1)")
        object.__setattr__(self, "missing_rate", miss)
        if not 0 < self.p_A <= 1:
            raise ValueError("p_A must lie in (0, 1]")
        if not 0 <= self.name_coupling <= 1:
            raise ValueError("name_coupling must lie in [0, 1]")
        if self.scenario not in (1, 2):
            raise ValueError("scenario must be 1 or 2")
        if self.n_A < 0 or self.n_B < 0:
            raise ValueError("file sizes must be non-negative")
        if self.n_A > self.n_B:
            a, b = self.n_B, self.n_A
            object.__setattr__(self, "n_A", a)
            object.__setattr__(self, "n_B", b)

    @property
    def K(self) -> int:
        return self.schema.K

    def with_(self, **changes) -> "GeneratorSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        """Scalar settings and the schema; category distributions and joint
        blocks are not serialized and come back as the bundled defaults."""
        return {
            "schema": self.schema.to_dict(),
            "alpha": [float(a) for a in self.alpha],
            "n_A": self.n_A, "n_B": self.n_B, "p_A": self.p_A,
            "scenario": self.scenario, "seed": self.seed,
            "informative_filter": [list(f) for f in self.informative_filter],
            "name_coupling": self.name_coupling,
            "missing_rate": [float(m) for m in self.missing_rate],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorSpec":
        known = {"schema", "alpha", "n_A", "n_B", "p_A", "scenario", "seed",
                 "informative_filter", "name_coupling", "missing_rate"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator setting(s): {', '.join(sorted(unknown))}")
        kw = {k: v for k, v in doc.items() if k != "schema"}
        if "schema" in doc:
            kw["schema"] = KeySchema.from_dict(doc["schema"])
        if "informative_filter" in kw:
            kw["informative_filter"] = tuple(tuple(f) for f in kw["informative_filter"])
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def matched_theta(self) -> np.ndarray:
        """Agreement probability of a matched pair on every field (missing counts as disagreement)."""
        obs = (1 - self.missing_rate) ** 2
        return obs * np.array([1 - a * (1 - float(d @ d)) for a, d in zip(self.alpha, self.category_dists)])

    def nonmatch_xi(self) -> np.ndarray:
        obs = (1 - self.missing_rate) ** 2
        return obs * np.array([float(d @ d) for d in self.category_dists])


def _rng(spec_or_seed) -> np.random.Generator:
    seed = spec_or_seed.seed if isinstance(spec_or_seed, GeneratorSpec) else spec_or_seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def draw_keys(size: int, dists: Sequence[np.ndarray], rng: np.random.Generator,
              blocks: Sequence[JointBlock] = (), coupling: float = 1.0) -> np.ndarray:
    """``(size, K)`` array of category indices (1-based).

    Each row takes the values of every block jointly, from a random row of
    the block table, with probability ``coupling``; all other values are
    drawn independently per field from ``dists``.
    """
    out = np.empty((size, len(dists)), dtype=np.int64)
    for k, d in enumerate(dists):
        out[:, k] = rng.choice(len(d), size=size, p=d) + 1
    for blk in blocks:
        rows = rng.choice(len(blk.weights), size=size, p=blk.weights)
        joint = rng.random(size) < coupling
        out[np.ix_(joint, list(blk.fields))] = blk.codes[rows[joint]]
    return out


def per_record_alpha(alpha) -> np.ndarray:
    """Per-copy perturbation probability giving pair probability ``alpha``."""
    return 1.0 - np.sqrt(1.0 - np.asarray(alpha, dtype=float))


def perturb_keys(keys: np.ndarray, dists: Sequence[np.ndarray], alpha, rng: np.random.Generator,
                 missing_rate=0.0) -> np.ndarray:
    """Hit-miss redraw of each value, then blanking (0) with ``missing_rate``."""
    keys = np.array(keys, dtype=np.int64, copy=True)
    a1 = per_record_alpha(alpha)
    miss = np.broadcast_to(np.asarray(missing_rate, dtype=float), (len(dists),))
    for k, d in enumerate(dists):
        hit = rng.random(keys.shape[0]) < a1[k]
        if hit.any():
            keys[hit, k] = rng.choice(len(d), size=int(hit.sum()), p=d) + 1
        if miss[k] > 0:
            keys[rng.random(keys.shape[0]) < miss[k], k] = 0
    return keys


def generate_population(size: int, spec: GeneratorSpec, rng: np.random.Generator | None = None) -> list[KeyRecord]:
    rng = _rng(spec) if rng is None else rng
    keys = draw_keys(size, spec.category_dists, rng, spec.joint_blocks, spec.name_coupling)
    return [KeyRecord(i, tuple(int(v) for v in row)) for i, row in enumerate(keys)]


def perturb_hit_miss(record: KeyRecord, spec: GeneratorSpec, rng: np.random.Generator) -> KeyRecord:
    keys = np.array([[0 if v is None else v for v in record.values]], dtype=np.int64)
    out = perturb_keys(keys, spec.category_dists, spec.alpha, rng, spec.missing_rate)[0]
    return KeyRecord(record.id, tuple(None if v is None or o == 0 else int(o)
                                      for v, o in zip(record.values, out)))


class LinkageFiles(NamedTuple):
    """Observed keys of both files (rows in ascending id order) and true matches."""

    a_keys: np.ndarray
    b_keys: np.ndarray
    a_ids: np.ndarray
    b_ids: np.ndarray
    truth: frozenset

    @property
    def n_M(self) -> int:
        return len(self.truth)

    def records(self) -> tuple[list[KeyRecord], list[KeyRecord]]:
        to_rec = lambda ids, keys: [KeyRecord(int(i), tuple(int(v) if v else None for v in row))
                                    for i, row in zip(ids, keys)]
        return to_rec(self.a_ids, self.a_keys), to_rec(self.b_ids, self.b_keys)


def dedup_rows(keys: np.ndarray) -> np.ndarray:
    """Indices of rows kept by key deduplication (first occurrence; incomplete rows always kept)."""
    seen = set()
    keep = []
    for i, row in enumerate(map(tuple, keys.tolist())):
        if 0 not in row:
            if row in seen:
                continue
            seen.add(row)
        keep.append(i)
    return np.array(keep, dtype=np.int64)


def _assemble(spec, rng, a_ent, b_ent, true_keys, dedup) -> LinkageFiles:
    a_keys = perturb_keys(true_keys[a_ent], spec.category_dists, spec.alpha, rng, spec.missing_rate)
    b_keys = perturb_keys(true_keys[b_ent], spec.category_dists, spec.alpha, rng, spec.missing_rate)
    a_ids = np.arange(len(a_ent))
    b_ids = np.arange(len(b_ent))
    if dedup:
        ka, kb = dedup_rows(a_keys), dedup_rows(b_keys)
        a_keys, a_ids, a_ent = a_keys[ka], a_ids[ka], a_ent[ka]
        b_keys, b_ids, b_ent = b_keys[kb], b_ids[kb], b_ent[kb]
    b_pos = {int(e): int(j) for e, j in zip(b_ent, b_ids)}
    truth = frozenset((int(i), b_pos[int(e)]) for i, e in zip(a_ids, a_ent) if int(e) in b_pos)
    return LinkageFiles(a_keys, b_keys, a_ids, b_ids, truth)


def scenario_one_arrays(spec: GeneratorSpec, rng=None, dedup: bool = True) -> LinkageFiles:
    """Both files sampled independently from a common pool of n_B / p_A entities."""
    rng = _rng(spec) if rng is None else rng
    n0 = int(round(spec.n_B / spec.p_A))
    true_keys = draw_keys(n0, spec.category_dists, rng, spec.joint_blocks, spec.name_coupling)
    a_ent = rng.choice(n0, size=spec.n_A, replace=False)
    b_ent = rng.choice(n0, size=spec.n_B, replace=False)
    return _assemble(spec, rng, a_ent, b_ent, true_keys, dedup)


def filtered_distributions(spec: GeneratorSpec) -> tuple[list[np.ndarray], list[JointBlock]]:
    """Category distributions and joint blocks conditioned on the informative filter."""
    dists = [d.copy() for d in spec.category_dists]
    blocks = list(spec.joint_blocks)
    for name, rel, value in spec.informative_filter:
        if rel not in _RELATIONS:
            raise GenerationError(f"unknown filter relation {rel!r}")
        k = spec.schema.index(name)
        cats = np.arange(1, len(dists[k]) + 1)
        dists[k] = np.where(_RELATIONS[rel](cats, value), dists[k], 0.0)
        for i, blk in enumerate(blocks):
            if k in blk.fields:
                blocks[i] = blk.restricted(np.asarray(_RELATIONS[rel](blk.codes[:, blk.fields.index(k)], value)))
    for f, d in zip(spec.schema.fields, dists):
        if d.sum() <= 0:
            raise GenerationError(f"informative filter leaves no category for field {f.name!r}")
    return [d / d.sum() for d in dists], blocks


def scenario_two_arrays(spec: GeneratorSpec, rng=None, dedup: bool = True) -> LinkageFiles:
    """A fixed n_A * p_A matched entities; the rest of B passes the informative filter."""
    rng = _rng(spec) if rng is None else rng
    n_M = int(round(spec.n_A * spec.p_A))
    cond, cond_blocks = filtered_distributions(spec)
    a_true = draw_keys(spec.n_A, spec.category_dists, rng, spec.joint_blocks, spec.name_coupling)
    b0_true = draw_keys(spec.n_B - n_M, cond, rng, cond_blocks, spec.name_coupling)
    true_keys = np.vstack([a_true, b0_true])
    a_ent = rng.permutation(spec.n_A)
    matched = rng.choice(spec.n_A, size=n_M, replace=False)
    b_ent = rng.permutation(np.concatenate([matched, spec.n_A + np.arange(spec.n_B - n_M)]))
    return _assemble(spec, rng, a_ent, b_ent, true_keys, dedup)


def generate_files(spec: GeneratorSpec, rng=None, dedup: bool = True) -> LinkageFiles:
    if spec.scenario == 1:
        return scenario_one_arrays(spec, rng, dedup)
    return scenario_two_arrays(spec, rng, dedup)


def scenario_one(spec: GeneratorSpec):
    files = scenario_one_arrays(spec)
    a, b = files.records()
    return a, b, set(files.truth)


def scenario_two(spec: GeneratorSpec):
    files = scenario_two_arrays(spec)
    a, b = files.records()
    return a, b, set(files.truth)


def categorical_schema(schema: KeySchema) -> KeySchema:
    """Schema reading already-encoded category indices from columns named after the keys."""
    return KeySchema(tuple(KeyField(f.name, "identity-categorical", f.name, f.cardinality)
                           for f in schema.fields), id_column=schema.id_column)


def write_key_csv(path, ids, keys, schema: KeySchema) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.id_column, *schema.names])
        for i, row in zip(ids, keys):
            w.writerow([i, *["" if v == 0 else int(v) for v in row]])


def write_truth_csv(path, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a_id", "b_id"])
        for a, b in sorted(truth):
            w.writerow([a, b])


def read_truth_csv(path) -> set[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"a_id", "b_id"} <= set(reader.fieldnames):
            raise DataError(f"{path}: truth file needs a_id and b_id columns")
        return {(row["a_id"], row["b_id"]) for row in reader}


def ingest_csv(path, schema: KeySchema) -> list[KeyRecord]:
    """Read a header-mapped CSV file and encode every row.

    Unparseable source values are kept as missing keys and logged with their
    line number.  Record ids are taken verbatim from ``schema.id_column``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        header = set(reader.fieldnames)
        missing = [c for c in (schema.id_column, *schema.columns) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            for row in reader:
                line = reader.line_num
                if None in row:
                    raise DataError(f"{path}:{line}: too many fields")
                if any(v is None for v in row.values()):
                    raise DataError(f"{path}:{line}: too few fields")
                rec = encode_record(row, schema, record_id=row[schema.id_column])
                for f, v in zip(schema.fields, rec.values):
                    raw = row[f.column]
                    if v is None and raw is not None and raw.strip():
                        log.warning("%s:%d: cannot encode %r for key %s; treated as missing",
                                    path, line, raw, f.name)
                records.append(rec)
        except csv.Error as exc:
            raise DataError(f"{path}: malformed CSV: {exc}") from None
    return records


def matched_agreement_rate(spec: GeneratorSpec, n_pairs: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo agreement rate of matched pairs and its standard error, per field."""
    rng = _rng(spec) if rng is None else rng
    true = draw_keys(n_pairs, spec.category_dists, rng, spec.joint_blocks, spec.name_coupling)
    a = perturb_keys(true, spec.category_dists, spec.alpha, rng, spec.missing_rate)
    b = perturb_keys(true, spec.category_dists, spec.alpha, rng, spec.missing_rate)
    rate = ((a == b) & (a != 0)).mean(axis=0)
    se = np.sqrt(np.maximum(rate * (1 - rate), 1e-300) / n_pairs)
    return rate, se
