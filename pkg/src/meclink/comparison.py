"""Key encoding, key deduplication and the pattern-aggregated comparison space.

Records are reduced to K categorical key values (category indices starting
at 1, ``None`` for missing).  Two records are compared field by field and the
binary agreement vector is bit-packed into an integer pattern code, with bit
``k`` holding the agreement on field ``k``.
"""
from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySpaceError, EncodingError, SchemaError

YEAR_MIN = 1910
YEAR_MAX = 2012
MAX_FIELDS = 64

ENCODERS = ("identity-categorical", "soundex-split", "dob-day", "dob-month", "dob-year")

_SOUNDEX_CODES = {}
for _letters, _digit in (("BFPV", "1"), ("CGJKQSXZ", "2"), ("DT", "3"),
                         ("L", "4"), ("MN", "5"), ("R", "6")):
    for _ch in _letters:
        _SOUNDEX_CODES[_ch] = _digit


def soundex(name: str) -> str:
    """American Soundex code of ``name``: a capital letter followed by three digits.

    Letters are folded to ASCII and anything outside A-Z is dropped before
    coding.  H and W do not separate consonants with equal codes, vowels do.

    >>> soundex("Copas"), soundex("Hilton"), soundex("Ashcraft")
    ('C120', 'H435', 'A261')
    """
    if not isinstance(name, str):
        raise EncodingError(name, "soundex input must be text")
    folded = unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode()
    letters = re.sub(r"[^A-Z]", "", folded.upper())
    if not letters:
        raise EncodingError(name, "no alphabetic characters to encode")

    first = letters[0]
    digits = []
    prev = _SOUNDEX_CODES.get(first, "")
    for ch in letters[1:]:
        code = _SOUNDEX_CODES.get(ch, "")
        if code and code != prev:
            digits.append(code)
            if len(digits) == 3:
                break
        if ch not in "HW":
            prev = code
    return first + "".join(digits).ljust(3, "0")


@dataclass(frozen=True)
class KeyField:
    """One categorical key variable and the raw column it is derived from."""

    name: str
    encoder: str
    column: str
    cardinality: int
    position: int | None = None
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise SchemaError(f"unknown encoder {self.encoder!r} for field {self.name!r}")
        if self.cardinality < 2:
            raise SchemaError(f"field {self.name!r} needs at least 2 categories")
        if self.encoder == "soundex-split":
            if self.position not in (1, 2, 3, 4):
                raise SchemaError(f"soundex position must be 1..4, got {self.position!r}")
            expected = 26 if self.position == 1 else 7
            if self.cardinality != expected:
                raise SchemaError(
                    f"soundex position {self.position} has {expected} categories, "
                    f"got {self.cardinality}")
        if self.categories is not None and len(self.categories) != self.cardinality:
            raise SchemaError(f"field {self.name!r}: categories do not match cardinality")

    def encode(self, raw: str | None) -> int | None:
        """Category index in ``1..cardinality`` or ``None`` when unavailable."""
        if raw is None:
            return None
        raw = raw.strip()
        if not raw:
            return None
        if self.encoder == "soundex-split":
            try:
                code = soundex(raw)
            except EncodingError:
                return None
            ch = code[self.position - 1]
            return ord(ch) - ord("A") + 1 if self.position == 1 else int(ch) + 1
        if self.encoder.startswith("dob-"):
            try:
                dob = date.fromisoformat(raw)
            except ValueError:
                return None
            if self.encoder == "dob-day":
                return dob.day
            if self.encoder == "dob-month":
                return dob.month
            if not YEAR_MIN <= dob.year <= YEAR_MAX:
                return None
            return dob.year - YEAR_MIN + 1
        if self.categories is not None:
            try:
                return self.categories.index(raw) + 1
            except ValueError:
                return None
        try:
            value = int(raw)
        except ValueError:
            return None
        return value if 1 <= value <= self.cardinality else None


def soundex_fields(prefix: str, column: str) -> list[KeyField]:
    """The four key fields a name column contributes (letter plus three digits)."""
    return [KeyField(f"{prefix}{pos}", "soundex-split", column, 26 if pos == 1 else 7, position=pos)
            for pos in (1, 2, 3, 4)]


def dob_fields(column: str) -> list[KeyField]:
    return [KeyField("day", "dob-day", column, 31),
            KeyField("month", "dob-month", column, 12),
            KeyField("year", "dob-year", column, YEAR_MAX - YEAR_MIN + 1)]


@dataclass(frozen=True)
class KeySchema:
    fields: tuple[KeyField, ...]
    id_column: str = "id"

    def __post_init__(self):
        if not self.fields:
            raise SchemaError("a key schema needs at least one field")
        if len(self.fields) > MAX_FIELDS:
            raise SchemaError(f"at most {MAX_FIELDS} key fields are supported")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError("key field names must be unique")

    @property
    def K(self) -> int:
        return len(self.fields)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.fields)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(f.column for f in self.fields))

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"no key field named {name!r}") from None

    @classmethod
    def default(cls) -> "KeySchema":
        """The twelve name/sex/date-of-birth keys used by the simulation harness."""
        return cls(tuple(
            soundex_fields("fn", "forename")
            + soundex_fields("sn", "surname")
            + [KeyField("sex", "identity-categorical", "sex", 2, categories=("M", "F"))]
            + dob_fields("dob")))

    def to_dict(self) -> dict[str, Any]:
        out = []
        for f in self.fields:
            d = {"name": f.name, "encoder": f.encoder, "column": f.column,
                 "cardinality": f.cardinality}
            if f.position is not None:
                d["position"] = f.position
            if f.categories is not None:
                d["categories"] = list(f.categories)
            out.append(d)
        return {"id_column": self.id_column, "fields": out}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "KeySchema":
        try:
            raw_fields = doc["fields"]
        except (KeyError, TypeError):
            raise SchemaError("schema document must contain a 'fields' list") from None
        fields = []
        for spec in raw_fields:
            try:
                encoder = spec["encoder"]
                cats = spec.get("categories")
                if "cardinality" in spec:
                    card = int(spec["cardinality"])
                elif cats is not None:
                    card = len(cats)
                elif encoder == "soundex-split":
                    card = 26 if spec.get("position") == 1 else 7
                elif encoder == "dob-day":
                    card = 31
                elif encoder == "dob-month":
                    card = 12
                elif encoder == "dob-year":
                    card = YEAR_MAX - YEAR_MIN + 1
                else:
                    raise SchemaError(f"field {spec.get('name')!r} needs a cardinality")
                fields.append(KeyField(
                    name=spec["name"], encoder=encoder,
                    column=spec.get("column", spec["name"]), cardinality=card,
                    position=spec.get("position"),
                    categories=tuple(cats) if cats is not None else None))
            except KeyError as exc:
                raise SchemaError(f"schema field is missing key {exc}") from None
        return cls(tuple(fields), id_column=doc.get("id_column", "id"))

    @classmethod
    def load(cls, path: str | Path) -> "KeySchema":
        path = Path(path)
        if not path.is_file():
            raise SchemaError(f"schema file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


@dataclass(frozen=True)
class KeyRecord:
    id: Hashable
    values: tuple[int | None, ...]

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.values)


def encode_record(raw: Mapping[str, str | None], schema: KeySchema, record_id=None) -> KeyRecord:
    """Encode one raw row into a :class:`KeyRecord`.

    Columns referenced by the schema must be present as keys of ``raw``; empty
    or unparseable values become missing.
    """
    missing = [c for c in schema.columns if c not in raw]
    if missing:
        raise SchemaError(f"record lacks schema column(s): {', '.join(missing)}")
    if record_id is None:
        record_id = raw.get(schema.id_column)
    return KeyRecord(record_id, tuple(f.encode(raw[f.column]) for f in schema.fields))


def dedup_keys(records: Iterable[KeyRecord]) -> list[KeyRecord]:
    """Keep the first record of every distinct complete key vector.

    Records with a missing key value are never treated as duplicates.
    """
    seen = set()
    out = []
    for rec in records:
        if rec.complete:
            if rec.values in seen:
                continue
            seen.add(rec.values)
        out.append(rec)
    return out


def agreement(a: KeyRecord, b: KeyRecord) -> tuple[int, ...]:
    if len(a.values) != len(b.values):
        raise SchemaError("records have different numbers of key fields")
    return tuple(int(x is not None and x == y) for x, y in zip(a.values, b.values))


def pack_bits(gamma: Sequence[int]) -> int:
    code = 0
    for k, g in enumerate(gamma):
        if g:
            code |= 1 << k
    return code


def unpack_bits(code: int, K: int) -> tuple[int, ...]:
    return tuple((int(code) >> k) & 1 for k in range(K))


def bits_string(code: int, K: int) -> str:
    """Agreement vector as a string of 0/1 characters in field order."""
    return "".join(str(g) for g in unpack_bits(code, K))


def records_to_array(records: Sequence[KeyRecord], K: int | None = None) -> np.ndarray:
    """Stack key values into an ``(n, K)`` integer array with 0 for missing."""
    if not records:
        return np.zeros((0, K or 0), dtype=np.int64)
    K = len(records[0].values) if K is None else K
    arr = np.zeros((len(records), K), dtype=np.int64)
    for i, rec in enumerate(records):
        if len(rec.values) != K:
            raise SchemaError(f"record {rec.id!r} has {len(rec.values)} keys, expected {K}")
        arr[i] = [0 if v is None else v for v in rec.values]
    return arr


@dataclass(frozen=True, eq=False)
class PatternTable:
    """All cross-file pairs grouped by agreement pattern.

    Records on each side are held in ascending id order; a pair is addressed
    by its flat index ``a * n_B + b`` so ascending flat index is ascending
    ``(a-id, b-id)``.

    Attributes
    ----------
    codes : (P,) uint64, distinct pattern codes in ascending order
    counts : (P,) int64, number of pairs per pattern
    gamma : (P, K) int8, unpacked agreement vectors
    pair_pattern : (n,) int32, pattern index of every pair
    order, offsets : pairs of pattern ``p`` are ``order[offsets[p]:offsets[p+1]]``
    """

    K: int
    a_ids: tuple
    b_ids: tuple
    codes: np.ndarray
    counts: np.ndarray
    gamma: np.ndarray
    pair_pattern: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    a_keys: np.ndarray | None = field(default=None, repr=False)
    b_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_A(self) -> int:
        return len(self.a_ids)

    @property
    def n_B(self) -> int:
        return len(self.b_ids)

    @property
    def n(self) -> int:
        return self.n_A * self.n_B

    @property
    def n_patterns(self) -> int:
        return len(self.codes)

    def pattern_pairs(self, p: int) -> np.ndarray:
        """Flat pair indices of pattern index ``p``, ascending."""
        return self.order[self.offsets[p]:self.offsets[p + 1]]

    def pairs(self, code: int) -> list[tuple]:
        """``(a-id, b-id)`` pairs having pattern ``code``."""
        hit = np.flatnonzero(self.codes == np.uint64(code))
        if not hit.size:
            return []
        flat = self.pattern_pairs(int(hit[0]))
        return [(self.a_ids[i], self.b_ids[j]) for i, j in zip(*self.split(flat))]

    def split(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.divmod(np.asarray(flat, dtype=np.int64), self.n_B)

    def count(self, code: int) -> int:
        hit = np.flatnonzero(self.codes == np.uint64(code))
        return int(self.counts[hit[0]]) if hit.size else 0

    def as_dict(self) -> dict[int, int]:
        return {int(c): int(n) for c, n in zip(self.codes, self.counts)}

    def agree_counts(self) -> np.ndarray:
        """n(1;k): number of pairs agreeing on each field."""
        return self.counts @ self.gamma.astype(np.int64)

    @classmethod
    def from_gamma(cls, gamma: np.ndarray, a_ids=None, b_ids=None) -> "PatternTable":
        """Build directly from an ``(n_A, n_B, K)`` 0/1 agreement array.

        Id sequences must already be in ascending order.
        """
        gamma = np.asarray(gamma)
        if gamma.ndim != 3:
            raise ValueError("gamma must have shape (n_A, n_B, K)")
        n_A, n_B, K = gamma.shape
        if n_A == 0 or n_B == 0:
            raise EmptySpaceError("empty comparison space")
        if K > MAX_FIELDS:
            raise SchemaError(f"at most {MAX_FIELDS} key fields are supported")
        flat_codes = np.zeros(n_A * n_B, dtype=np.uint64)
        g2 = gamma.reshape(n_A * n_B, K)
        for k in range(K):
            flat_codes |= g2[:, k].astype(np.uint64) << np.uint64(k)
        return cls._from_codes(flat_codes, K,
                               tuple(range(n_A)) if a_ids is None else tuple(a_ids),
                               tuple(range(n_B)) if b_ids is None else tuple(b_ids))

    @classmethod
    def _from_codes(cls, flat_codes, K, a_ids, b_ids, a_keys=None, b_keys=None) -> "PatternTable":
        codes, inverse, counts = np.unique(flat_codes, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1).astype(np.int32)
        order = np.argsort(inverse, kind="stable")
        offsets = np.concatenate([[0], np.cumsum(counts)])
        gamma = ((codes[:, None] >> np.arange(K, dtype=np.uint64)[None, :]) & np.uint64(1)).astype(np.int8)
        return cls(K, a_ids, b_ids, codes, counts.astype(np.int64), gamma, inverse,
                   order, offsets, a_keys, b_keys)


def _sorted_by_id(records: Sequence[KeyRecord]) -> list[KeyRecord]:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("record ids must be unique within a file")
    try:
        return sorted(records, key=lambda r: r.id)
    except TypeError:
        raise SchemaError("record ids within a file must be mutually comparable") from None


def build_comparison_space(A: Sequence[KeyRecord], B: Sequence[KeyRecord]) -> PatternTable:
    """Compare every record of ``A`` with every record of ``B``.

    Inputs should already be key-deduplicated.  The result does not depend on
    the order of either input.
    """
    if not A or not B:
        raise EmptySpaceError("empty comparison space")
    A = _sorted_by_id(A)
    B = _sorted_by_id(B)
    K = len(A[0].values)
    ka = records_to_array(A, K)
    kb = records_to_array(B, K)
    return space_from_arrays(ka, kb, [r.id for r in A], [r.id for r in B])


def space_from_arrays(ka: np.ndarray, kb: np.ndarray, a_ids=None, b_ids=None) -> PatternTable:
    """Pattern table from key arrays (0 = missing); ids must be ascending."""
    ka = np.asarray(ka, dtype=np.int64)
    kb = np.asarray(kb, dtype=np.int64)
    if ka.shape[0] == 0 or kb.shape[0] == 0:
        raise EmptySpaceError("empty comparison space")
    if ka.shape[1] != kb.shape[1]:
        raise SchemaError("files have different numbers of key fields")
    K = ka.shape[1]
    if K > MAX_FIELDS:
        raise SchemaError(f"at most {MAX_FIELDS} key fields are supported")
    n_A, n_B = ka.shape[0], kb.shape[0]
    flat_codes = np.zeros((n_A, n_B), dtype=np.uint64)
    for k in range(K):
        agree = (ka[:, k, None] == kb[None, :, k]) & (ka[:, k, None] != 0)
        flat_codes |= agree.astype(np.uint64) << np.uint64(k)
    return PatternTable._from_codes(
        flat_codes.reshape(-1), K,
        tuple(range(n_A)) if a_ids is None else tuple(a_ids),
        tuple(range(n_B)) if b_ids is None else tuple(b_ids),
        ka, kb)
