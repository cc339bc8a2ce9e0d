"""Patient records, CSV ingestion, schema inference and the feature codec.

Encoded layout (``D = 15 + len(vocab)``)::

    [0, 2)     gender one-hot (Female, Male)
    [2, 3)     age, min-max normalized into [0, 1]
    [3, 15)    month one-hot (January .. December)
    [15, D)    symptom multi-hot, vocabulary order
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CodecError, FormatError, SchemaError, SpecError
from .numeric import RandomSource

GENDERS = ("Female", "Male")
MONTHS = (
    "January", "February", "March", "April", "May", "June",
    "July", "August", "September", "October", "November", "December",
)
CSV_HEADER = ("gender", "age", "month", "symptoms", "diagnosis")
SCHEMA_VERSION = 1

# Probability floor used by the decoder and the likelihood.
PROB_EPS = 1e-7

_GENDER_LOOKUP = {g.lower(): g for g in GENDERS}
_MONTH_LOOKUP = {m.lower(): m for m in MONTHS}


def canonical_symptom(text: str) -> str:
    return " ".join(text.strip().lower().split())


@dataclass(frozen=True)
class PatientRecord:
    gender: str
    age_years: float
    month: str
    symptoms: frozenset = frozenset()
    diagnosis: str = ""

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        if self.month not in MONTHS:
            raise ValueError(f"unknown month {self.month!r}")
        age = float(self.age_years)
        if not math.isfinite(age) or age < 0:
            raise ValueError(f"age must be finite and non-negative, got {self.age_years!r}")
        object.__setattr__(self, "age_years", age)
        symptoms = frozenset(self.symptoms)
        if any(not s for s in symptoms):
            raise ValueError("empty symptom name")
        object.__setattr__(self, "symptoms", symptoms)
        if not self.diagnosis or not self.diagnosis.strip():
            raise ValueError("diagnosis must be a nonempty label")

    @property
    def sorted_symptoms(self) -> list[str]:
        return sorted(self.symptoms)


@dataclass(frozen=True)
class ParseIssue:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def _parse_row(row: list[str]) -> PatientRecord:
    if len(row) != len(CSV_HEADER):
        raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
    gender_s, age_s, month_s, symptoms_s, diagnosis_s = (cell.strip() for cell in row)
    gender = _GENDER_LOOKUP.get(gender_s.lower())
    if gender is None:
        raise ValueError(f"unknown gender {gender_s!r}")
    try:
        age = float(age_s)
    except ValueError:
        raise ValueError(f"bad age {age_s!r}") from None
    if not math.isfinite(age) or age < 0:
        raise ValueError(f"age out of range {age_s!r}")
    month = _MONTH_LOOKUP.get(month_s.lower())
    if month is None:
        raise ValueError("unknown month")
    symptoms = frozenset(s for s in (canonical_symptom(p) for p in symptoms_s.split("|")) if s)
    if not diagnosis_s:
        raise ValueError("missing diagnosis")
    return PatientRecord(gender, age, month, symptoms, diagnosis_s)


def parse_records(source) -> tuple[list[PatientRecord], list[ParseIssue]]:
    """Parse CSV text (or a text stream) into records plus per-line issues.

    Bad rows are skipped and reported; only a wrong header is fatal.
    """
    text = source if isinstance(source, str) else source.read()
    if text.startswith("﻿"):
        text = text[1:]
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty input: missing header") from None
    if tuple(h.strip().lower() for h in header) != CSV_HEADER:
        raise FormatError(f"bad header {','.join(header)!r}, expected {','.join(CSV_HEADER)!r}")
    records, issues = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            records.append(_parse_row(row))
        except ValueError as exc:
            issues.append(ParseIssue(line, str(exc)))
    return records, issues


def format_age(age: float) -> str:
    return repr(float(age))


def format_records(records: Iterable[PatientRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([r.gender, format_age(r.age_years), r.month, "|".join(r.sorted_symptoms), r.diagnosis])
    return buf.getvalue()


def partition_by_diagnosis(records: Iterable[PatientRecord]) -> dict[str, list[PatientRecord]]:
    groups: dict[str, list[PatientRecord]] = {}
    for r in records:
        groups.setdefault(r.diagnosis.strip(), []).append(r)
    return groups


# -- schema and layout ---------------------------------------------------------


@dataclass(frozen=True)
class FeatureLayout:
    vocab_size: int

    gender: slice = field(init=False)
    age: int = field(init=False)
    month: slice = field(init=False)
    symptoms: slice = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gender", slice(0, 2))
        object.__setattr__(self, "age", 2)
        object.__setattr__(self, "month", slice(3, 15))
        object.__setattr__(self, "symptoms", slice(15, 15 + self.vocab_size))

    @property
    def total_dim(self) -> int:
        return 15 + self.vocab_size


@dataclass(frozen=True)
class DataSchema:
    symptom_vocab: tuple[str, ...]
    age_min: float
    age_max: float
    months: tuple[str, ...] = MONTHS
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        vocab = tuple(self.symptom_vocab)
        object.__setattr__(self, "symptom_vocab", vocab)
        if list(vocab) != sorted(set(vocab)):
            raise SchemaError("symptom vocabulary must be sorted and duplicate-free")
        if any(not s for s in vocab):
            raise SchemaError("empty symptom in vocabulary")
        if not (math.isfinite(self.age_min) and math.isfinite(self.age_max)) or not self.age_max > self.age_min:
            raise SchemaError(f"need age_min < age_max, got [{self.age_min}, {self.age_max}]")
        if tuple(self.months) != MONTHS:
            raise SchemaError("month list must be the 12 English month names in calendar order")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(len(self.symptom_vocab))

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "symptom_vocab": list(self.symptom_vocab),
            "age_min": self.age_min,
            "age_max": self.age_max,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DataSchema":
        try:
            version = int(obj["version"])
            vocab = tuple(obj["symptom_vocab"])
            age_min, age_max = float(obj["age_min"]), float(obj["age_max"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed schema: {exc}") from None
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema version {version}")
        return cls(vocab, age_min, age_max, MONTHS, version)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


def infer_schema(records: Sequence[PatientRecord]) -> DataSchema:
    """Vocabulary is the sorted symptom union; age bounds are widened.

    The observed age range is widened by 5% of its span on each side, then
    grown symmetrically to at least one year, then clamped at 0 (shifting the
    upper bound if needed to keep the one-year span).
    """
    if not records:
        raise SchemaError("cannot infer a schema from zero records")
    vocab = tuple(sorted(set().union(*(r.symptoms for r in records))))
    ages = [r.age_years for r in records]
    lo, hi = min(ages), max(ages)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    if hi - lo < 1.0:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5, mid + 0.5
    if lo < 0.0:
        lo = 0.0
        hi = max(hi, 1.0)
    return DataSchema(vocab, lo, hi)


def merge_schemas(*schemas: DataSchema) -> DataSchema:
    vocab = tuple(sorted(set().union(*(s.symptom_vocab for s in schemas))))
    return DataSchema(vocab, min(s.age_min for s in schemas), max(s.age_max for s in schemas))


# -- codec ---------------------------------------------------------------------


def normalize_age(age: float, schema: DataSchema) -> float:
    return min(1.0, max(0.0, (age - schema.age_min) / (schema.age_max - schema.age_min)))


def denormalize_age(value: float, schema: DataSchema) -> float:
    return schema.age_min + float(value) * (schema.age_max - schema.age_min)


def encode_record(record: PatientRecord, schema: DataSchema) -> np.ndarray:
    layout = schema.layout
    x = np.zeros(layout.total_dim)
    x[layout.gender.start + GENDERS.index(record.gender)] = 1.0
    x[layout.age] = normalize_age(record.age_years, schema)
    x[layout.month.start + MONTHS.index(record.month)] = 1.0
    index = {s: i for i, s in enumerate(schema.symptom_vocab)}
    for s in record.symptoms:
        if s not in index:
            raise CodecError(f"symptom {s!r} is not in the schema vocabulary")
        x[layout.symptoms.start + index[s]] = 1.0
    return x


def encode_records(records: Sequence[PatientRecord], schema: DataSchema) -> np.ndarray:
    if not records:
        return np.zeros((0, schema.layout.total_dim))
    return np.stack([encode_record(r, schema) for r in records])


@dataclass
class DecodedParams:
    """Distribution parameters of the decoder, one row per example when batched."""

    gender_probs: np.ndarray
    month_probs: np.ndarray
    symptom_probs: np.ndarray
    age_mean: np.ndarray

    def __len__(self) -> int:
        return 1 if self.gender_probs.ndim == 1 else self.gender_probs.shape[0]

    def __getitem__(self, i) -> "DecodedParams":
        if self.gender_probs.ndim == 1:
            raise TypeError("unbatched DecodedParams cannot be indexed")
        return DecodedParams(self.gender_probs[i], self.month_probs[i], self.symptom_probs[i], self.age_mean[i])


def certain_params(x, layout: FeatureLayout, eps: float = PROB_EPS) -> DecodedParams:
    """Params that put (clamped) certainty on the values encoded in ``x``."""
    x = np.asarray(x, dtype=np.float64)

    def push(v):
        return np.where(v > 0.5, 1.0 - eps, eps)

    return DecodedParams(
        push(x[..., layout.gender]),
        push(x[..., layout.month]),
        push(x[..., layout.symptoms]),
        np.asarray(x[..., layout.age]),
    )


def decode_params(
    params: DecodedParams,
    schema: DataSchema,
    mode: str = "argmax",
    rng: RandomSource | None = None,
    diagnosis: str = "unknown",
) -> PatientRecord:
    """Turn one set of decoder parameters into a record.

    In ``sample`` mode the generator is consumed in a fixed order: one uniform
    for gender, one for month, then one per vocabulary symptom.
    """
    layout = schema.layout
    g = np.asarray(params.gender_probs, dtype=np.float64)
    m = np.asarray(params.month_probs, dtype=np.float64)
    s = np.asarray(params.symptom_probs, dtype=np.float64)
    if g.shape != (2,) or m.shape != (12,) or s.shape != (layout.vocab_size,):
        raise CodecError(
            f"decoded params have shapes {g.shape}, {m.shape}, {s.shape}; "
            f"schema expects (2,), (12,), ({layout.vocab_size},)"
        )
    if mode == "argmax":
        gi, mi = int(np.argmax(g)), int(np.argmax(m))
        present = s >= 0.5
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode requires a RandomSource")
        gi = rng.categorical(g)
        mi = rng.categorical(m)
        present = rng.uniform(layout.vocab_size) < s if layout.vocab_size else np.zeros(0, bool)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    age = round(max(0.0, denormalize_age(float(params.age_mean), schema)), 1)
    symptoms = frozenset(v for v, on in zip(schema.symptom_vocab, present) if on)
    return PatientRecord(GENDERS[gi], age, MONTHS[mi], symptoms, diagnosis)


# -- toy data --------------------------------------------------------------------


@dataclass
class ToySpec:
    """Independent per-feature generator standing in for real visit data."""

    symptom_probs: dict[str, float]
    female_prob: float = 0.5
    month_weights: dict[str, float] = field(default_factory=lambda: {m: 1.0 for m in MONTHS})
    age_mean: float = 30.0
    age_sd: float = 8.0
    diagnosis: str = "Malaria"

    def __post_init__(self):
        self.symptom_probs = {canonical_symptom(k): float(v) for k, v in self.symptom_probs.items()}
        for name, p in [*self.symptom_probs.items(), ("female_prob", self.female_prob)]:
            if not (0.0 <= p <= 1.0):
                raise SpecError(f"probability for {name!r} must lie in [0, 1], got {p}")
        if any(not k for k in self.symptom_probs):
            raise SpecError("empty symptom name")
        for month, w in self.month_weights.items():
            if month not in MONTHS:
                raise SpecError(f"unknown month {month!r}")
            if not (w >= 0.0 and math.isfinite(w)):
                raise SpecError(f"month weight for {month} must be non-negative")
        if sum(self.month_weights.values()) <= 0:
            raise SpecError("month weights sum to zero")
        if not (self.age_sd >= 0 and math.isfinite(self.age_sd) and math.isfinite(self.age_mean)):
            raise SpecError("age_sd must be non-negative and finite")
        if self.age_mean < 0 and self.age_sd == 0:
            raise SpecError("age distribution has no mass at non-negative ages")
        if not self.diagnosis.strip():
            raise SpecError("diagnosis must be nonempty")

    def to_json(self) -> dict:
        return {
            "diagnosis": self.diagnosis,
            "symptom_probs": dict(self.symptom_probs),
            "female_prob": self.female_prob,
            "month_weights": dict(self.month_weights),
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToySpec":
        try:
            return cls(
                symptom_probs=dict(obj["symptom_probs"]),
                female_prob=float(obj.get("female_prob", 0.5)),
                month_weights=dict(obj.get("month_weights", {m: 1.0 for m in MONTHS})),
                age_mean=float(obj.get("age_mean", 30.0)),
                age_sd=float(obj.get("age_sd", 8.0)),
                diagnosis=str(obj.get("diagnosis", "Malaria")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed toy spec: {exc}") from None


def default_toy_spec() -> ToySpec:
    """Four symptoms at 0.9/0.7/0.5/0.1, even gender split, months 60/40 on
    April/February, age N(30, 8)."""
    return ToySpec(
        symptom_probs={"fever": 0.9, "headaches": 0.7, "body weakness": 0.5, "vomiting": 0.1},
        female_prob=0.5,
        month_weights={"April": 0.6, "February": 0.4},
        age_mean=30.0,
        age_sd=8.0,
        diagnosis="Malaria",
    )


def generate_toy_dataset(spec: ToySpec, n: int, rng: RandomSource) -> list[PatientRecord]:
    """Draw ``n`` i.i.d. records; ages are resampled until non-negative."""
    if n < 1:
        raise SpecError(f"need n >= 1, got {n}")
    names = sorted(spec.symptom_probs)
    probs = np.array([spec.symptom_probs[k] for k in names])
    weights = np.array([spec.month_weights.get(m, 0.0) for m in MONTHS])
    out = []
    for _ in range(n):
        gender = GENDERS[0] if rng.uniform() < spec.female_prob else GENDERS[1]
        month = MONTHS[rng.categorical(weights)]
        present = rng.uniform(len(names)) < probs if names else []
        while True:
            age = spec.age_mean + spec.age_sd * rng.standard_normal()
            if age >= 0.0:
                break
        symptoms = frozenset(k for k, on in zip(names, present) if on)
        out.append(PatientRecord(gender, age, month, symptoms, spec.diagnosis))
    return out
