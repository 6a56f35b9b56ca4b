"""Feature extraction: z-scored dense stats, one-hot categoricals, location embedding."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .customer_data import CustomerRecord, DataError

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class FeatureSchema:
    dense_fields: tuple[str, ...]
    categorical_fields: tuple[tuple[str, tuple[str, ...]], ...]
    location_dim: int = 0

    def __post_init__(self):
        names = list(self.dense_fields) + [name for name, _ in self.categorical_fields]
        if len(set(names)) != len(names):
            raise ValueError("feature field names must be unique")
        if self.location_dim < 0:
            raise ValueError("location_dim must be non-negative")

    @property
    def total_width(self) -> int:
        return (
            len(self.dense_fields)
            + sum(len(v) for _, v in self.categorical_fields)
            + self.location_dim
        )

    def without_location(self) -> "FeatureSchema":
        return FeatureSchema(self.dense_fields, self.categorical_fields, 0)

    def to_dict(self) -> dict:
        return {
            "dense_fields": list(self.dense_fields),
            "categorical_fields": [
                {"name": name, "vocabulary": list(vocab)} for name, vocab in self.categorical_fields
            ],
            "location_dim": self.location_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        return cls(
            tuple(obj["dense_fields"]),
            tuple((c["name"], tuple(c["vocabulary"])) for c in obj["categorical_fields"]),
            int(obj.get("location_dim", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FeatureStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureStats":
        return cls(tuple(map(float, obj["mean"])), tuple(map(float, obj["std"])))


@dataclass
class WordVectorTable:
    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, WordVectorTable):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.entries.keys() == other.entries.keys()
            and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items())
        )


class TextEncoder(Protocol):
    """Anything that turns location text into a fixed-width vector."""

    dimension: int

    def encode(self, text: str) -> np.ndarray: ...


def load_word_vectors(path: str | Path) -> WordVectorTable:
    """Parse the plain-text ``token v1 v2 ... vD`` word-vector format."""
    dim = None
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise DataError(f"line {lineno}: no vector components")
            elif len(values) != dim:
                raise DataError(f"line {lineno}: expected {dim} components, got {len(values)}")
            try:
                entries[token.lower()] = np.array([float(v) for v in values])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric component") from None
    if dim is None:
        raise DataError(f"{path}: empty word-vector file")
    return WordVectorTable(dim, entries)


def save_word_vectors(table: WordVectorTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.entries.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def embed_location(text: str, table: WordVectorTable) -> np.ndarray:
    """Mean of in-vocabulary token vectors; zeros if none match."""
    hits = [table.entries[t] for t in tokenize(text) if t in table.entries]
    if not hits:
        return np.zeros(table.dimension)
    return np.mean(hits, axis=0)


class WordVectorEncoder:
    def __init__(self, table: WordVectorTable):
        self.table = table
        self.dimension = table.dimension

    def encode(self, text: str) -> np.ndarray:
        return embed_location(text, self.table)


def fit_normalizer(records: Sequence[CustomerRecord], schema: FeatureSchema) -> FeatureStats:
    """Population mean/stddev per dense field; missing values count as 0."""
    if not records:
        raise ValueError("fit_normalizer needs at least one record")
    values = np.array(
        [[r.dense_stats.get(f, 0.0) for f in schema.dense_fields] for r in records],
        dtype=np.float64,
    ).reshape(len(records), len(schema.dense_fields))
    # Sort each column so the result does not depend on record order.
    values = np.sort(values, axis=0)
    mean = values.mean(axis=0)
    std = np.sqrt(((values - mean) ** 2).mean(axis=0))
    return FeatureStats(tuple(mean.tolist()), tuple(std.tolist()))


def collect_vocabularies(
    records: Sequence[CustomerRecord], fields: Sequence[str] | None = None
) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """Observed categorical values per demographic field, sorted."""
    seen: dict[str, set[str]] = {}
    for r in records:
        for k, v in r.demographics.items():
            if fields is None or k in fields:
                seen.setdefault(k, set()).add(v)
    names = fields if fields is not None else sorted(seen)
    return tuple((name, tuple(sorted(seen.get(name, ())))) for name in names)


def infer_schema(
    records: Sequence[CustomerRecord], location_dim: int = 0
) -> FeatureSchema:
    dense = sorted({k for r in records for k in r.dense_stats})
    return FeatureSchema(tuple(dense), collect_vocabularies(records), location_dim)


@dataclass
class FeatureContext:
    """Everything needed to turn a record into a model input."""

    schema: FeatureSchema
    stats: FeatureStats
    encoder: TextEncoder | None = None

    def __post_init__(self):
        want = self.schema.location_dim
        have = self.encoder.dimension if self.encoder is not None else 0
        if want and want != have:
            raise ValueError(f"schema location_dim={want} but encoder dimension={have}")

    @property
    def width(self) -> int:
        return self.schema.total_width

    def vector(self, record: CustomerRecord) -> np.ndarray:
        return self.matrix([record])[0]

    def matrix(self, records: Sequence[CustomerRecord]) -> np.ndarray:
        schema = self.schema
        out = np.zeros((len(records), schema.total_width))
        n_dense = len(schema.dense_fields)
        if n_dense:
            raw = np.array(
                [[r.dense_stats.get(f, 0.0) for f in schema.dense_fields] for r in records],
                dtype=np.float64,
            ).reshape(len(records), n_dense)
            mean = np.asarray(self.stats.mean)
            std = np.asarray(self.stats.std)
            safe = np.where(std > 0, std, 1.0)
            out[:, :n_dense] = np.where(std > 0, (raw - mean) / safe, 0.0)
        col = n_dense
        for name, vocab in schema.categorical_fields:
            slot = {v: i for i, v in enumerate(vocab)}
            for row, r in enumerate(records):
                i = slot.get(r.demographics.get(name))
                if i is not None:
                    out[row, col + i] = 1.0
            col += len(vocab)
        if schema.location_dim:
            for row, r in enumerate(records):
                out[row, col:] = self.encoder.encode(r.location_text)
        return out


def extract_features(
    record: CustomerRecord,
    schema: FeatureSchema,
    stats: FeatureStats,
    table: WordVectorTable | None = None,
) -> np.ndarray:
    encoder = WordVectorEncoder(table) if table is not None and schema.location_dim else None
    return FeatureContext(schema, stats, encoder).vector(record)
