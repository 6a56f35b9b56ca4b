"""Offline (embed + index) and online (seed expansion) stages, plus the quality experiment."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ann_index import (
    EmbeddingMatrix,
    IvfIndex,
    build_ivf,
    default_nlist,
    default_nprobe,
    load_embeddings,
    load_index,
    save_embeddings,
    save_index,
    search_batch,
)
from .customer_data import CustomerRecord, DataError, TimeWindow, activity_matrix
from .features import (
    FeatureContext,
    FeatureSchema,
    WordVectorEncoder,
    WordVectorTable,
    fit_normalizer,
    load_word_vectors,
)
from .model import (
    NORM_EPS,
    ModelBundle,
    TrainConfig,
    TrainReport,
    embed_all,
    forward,
    load_model,
    train,
)
from .similarity import LabeledPair, SimilarityMetric, make_training_pairs, rowwise_similarity


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --- datasets and training ----------------------------------------------------


@dataclass
class PairSplit:
    train: list[LabeledPair]
    val: list[LabeledPair]
    test: list[LabeledPair]


def prepare_pairs(
    records: Sequence[CustomerRecord],
    metric: SimilarityMetric,
    train_window: TimeWindow,
    eval_window: TimeWindow,
    n_train: int,
    n_eval: int,
    rng_seed: int,
    n_categories: int,
) -> PairSplit:
    """Disjoint train/val/test pairs.

    Training targets come from ``train_window``; validation and test targets
    from the later ``eval_window``. ``n_eval`` pairs go to each of val and test.
    """
    if train_window.end_day > eval_window.start_day:
        raise ValueError(f"train window {train_window} overlaps eval window {eval_window}")
    train_act = activity_matrix(records, metric.channel, train_window, n_categories)
    pairs = make_training_pairs(
        records, metric, train_window, n_train + 2 * n_eval, rng_seed, n_categories, train_act
    )
    held = pairs[n_train:]
    if held:
        eval_act = activity_matrix(records, metric.channel, eval_window, n_categories)
        row = {r.customer_id: i for i, r in enumerate(records)}
        ia = np.array([row[p.id_a] for p in held])
        ib = np.array([row[p.id_b] for p in held])
        targets = rowwise_similarity(metric.kind, eval_act[ia], eval_act[ib])
        held = [LabeledPair(p.id_a, p.id_b, float(t)) for p, t in zip(held, targets.tolist())]
    return PairSplit(pairs[:n_train], held[:n_eval], held[n_eval:])


def make_context(
    schema: FeatureSchema, records: Sequence[CustomerRecord], table: WordVectorTable | None
) -> FeatureContext:
    encoder = WordVectorEncoder(table) if schema.location_dim else None
    return FeatureContext(schema, fit_normalizer(records, schema), encoder)


def bundle_context(bundle: ModelBundle, table: WordVectorTable | None) -> FeatureContext:
    if bundle.schema.location_dim and table is None:
        raise DataError("model uses location embeddings but no word-vector table was given")
    encoder = WordVectorEncoder(table) if bundle.schema.location_dim else None
    return FeatureContext(bundle.schema, bundle.stats, encoder)


# --- offline stage --------------------------------------------------------------


@dataclass
class OfflineArtifacts:
    embeddings_path: Path
    index_path: Path
    skipped: list[int] = field(default_factory=list)
    nlist: int = 0


def embed_universe(
    bundle: ModelBundle,
    records: Sequence[CustomerRecord],
    table: WordVectorTable | None,
    threads: int = 1,
) -> tuple[EmbeddingMatrix, list[int]]:
    """Embeddings for every record that has a usable (non-zero) direction."""
    ctx = bundle_context(bundle, table)
    ids, E = embed_all(bundle.params, records, ctx, threads=threads)
    E32 = E.astype(np.float32)
    ok = np.linalg.norm(E32.astype(np.float64), axis=1) >= NORM_EPS
    skipped = [int(c) for c in ids[~ok].tolist()]
    return EmbeddingMatrix(ids[ok].astype(np.int64), E32[ok]), skipped


def offline_stage(
    records: Sequence[CustomerRecord],
    model_path: str | Path,
    out_dir: str | Path,
    table: WordVectorTable | None = None,
    nlist: int | None = None,
    rng_seed: int = 0,
    threads: int = 1,
    kmeans_iters: int = 25,
    embeddings_name: str = "embeddings.lkev",
    index_name: str = "index.lkix",
) -> OfflineArtifacts:
    """Embed the universe, build the IVF index, write both files.

    Everything is computed before anything is written, so a failure leaves
    the output directory untouched.
    """
    bundle = load_model(model_path)
    matrix, skipped = embed_universe(bundle, records, table, threads)
    if len(matrix) == 0:
        raise DataError("no customer produced a usable embedding")
    index = build_ivf(matrix, nlist or default_nlist(len(matrix)), rng_seed, kmeans_iters)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb_path, idx_path = out / embeddings_name, out / index_name
    save_embeddings(matrix, emb_path.with_name(emb_path.name + ".tmp"))
    os.replace(emb_path.with_name(emb_path.name + ".tmp"), emb_path)
    save_index(index, idx_path.with_name(idx_path.name + ".tmp"))
    os.replace(idx_path.with_name(idx_path.name + ".tmp"), idx_path)
    _write_atomic(out / "skipped.txt", "".join(f"{c}\n" for c in skipped).encode())
    return OfflineArtifacts(emb_path, idx_path, skipped, index.nlist)


# --- online stage ---------------------------------------------------------------


@dataclass
class ExpansionRequest:
    seed_ids: list[int]
    output_size: int = 1000
    k_per_seed: int | None = None
    exclude_seeds: bool = True
    attribute_filters: list[tuple[str, tuple[str, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.seed_ids = [int(s) for s in self.seed_ids]
        if not self.seed_ids:
            raise ValueError("at least one seed id is required")
        if len(set(self.seed_ids)) != len(self.seed_ids):
            raise ValueError("seed ids must be unique")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")
        if self.k_per_seed is not None and self.k_per_seed < 1:
            raise ValueError("k_per_seed must be >= 1")

    @property
    def effective_k_per_seed(self) -> int:
        return self.k_per_seed if self.k_per_seed is not None else self.output_size

    def to_dict(self) -> dict:
        return {
            "seed_ids": self.seed_ids,
            "output_size": self.output_size,
            "k_per_seed": self.effective_k_per_seed,
            "exclude_seeds": self.exclude_seeds,
            "attribute_filters": [[f, list(v)] for f, v in self.attribute_filters],
        }


@dataclass(frozen=True)
class ExpansionEntry:
    customer_id: int
    score: float
    best_seed_id: int


@dataclass
class ExpansionResult:
    entries: list[ExpansionEntry]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"customer_id": e.customer_id, "score": e.score, "best_seed_id": e.best_seed_id}
                for e in self.entries
            ],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self) -> str:
        lines = ["customer_id,score,best_seed_id"]
        lines += [f"{e.customer_id},{e.score!r},{e.best_seed_id}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "ExpansionResult":
        entries = [
            ExpansionEntry(int(e["customer_id"]), float(e["score"]), int(e["best_seed_id"]))
            for e in obj["entries"]
        ]
        return cls(entries, dict(obj.get("metadata", {})))


def merge_hits(
    seed_ids: Sequence[int], hits_per_seed: Sequence[Sequence]
) -> dict[int, tuple[float, int]]:
    """customer_id -> (max score over seeds, seed achieving it; lowest seed id on ties)."""
    best: dict[int, tuple[float, int]] = {}
    for seed, hits in zip(seed_ids, hits_per_seed):
        for h in hits:
            cur = best.get(h.customer_id)
            if cur is None or h.score > cur[0] or (h.score == cur[0] and seed < cur[1]):
                best[h.customer_id] = (h.score, seed)
    return best


class ExpansionEngine:
    """Serves expansion requests against loaded artifacts; safe to share across threads."""

    def __init__(
        self,
        index: IvfIndex,
        embeddings: EmbeddingMatrix | None = None,
        bundle: ModelBundle | None = None,
        records: Sequence[CustomerRecord] | None = None,
        table: WordVectorTable | None = None,
        model_path: str = "",
        index_path: str = "",
    ):
        self.index = index
        self.embeddings = embeddings
        self._emb_row = embeddings.row_of() if embeddings is not None else {}
        self.bundle = bundle
        self.records = {r.customer_id: r for r in records} if records is not None else {}
        self.table = table
        self._context: FeatureContext | None = None
        self.model_path = model_path
        self.index_path = index_path

    @classmethod
    def from_files(
        cls,
        index_path: str | Path,
        embeddings_path: str | Path | None = None,
        model_path: str | Path | None = None,
        records: Sequence[CustomerRecord] | None = None,
        table: WordVectorTable | None = None,
    ) -> "ExpansionEngine":
        return cls(
            load_index(index_path),
            load_embeddings(embeddings_path) if embeddings_path else None,
            load_model(model_path) if model_path else None,
            records,
            table,
            model_path=str(model_path or ""),
            index_path=str(index_path),
        )

    def seed_vectors(self, seed_ids: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(seed_ids), self.index.dim))
        for i, sid in enumerate(seed_ids):
            row = self._emb_row.get(sid)
            if row is not None:
                out[i] = self.embeddings.vectors[row]
            elif sid in self.records and self.bundle is not None:
                if self._context is None:
                    self._context = bundle_context(self.bundle, self.table)
                out[i] = forward(self.bundle.params, self._context.vector(self.records[sid]))
            else:
                raise DataError(f"unknown seed customer_id {sid}")
        return out

    def _passes(self, cid: int, filters) -> bool:
        rec = self.records.get(cid)
        if rec is None:
            return False
        return all(rec.demographics.get(f) in allowed for f, allowed in filters)

    def expand(
        self, request: ExpansionRequest, nprobe: int | None = None, threads: int = 1
    ) -> ExpansionResult:
        if request.attribute_filters and not self.records:
            raise DataError("attribute filters need the customer universe")
        nprobe = nprobe or default_nprobe(self.index.nlist)
        Q = self.seed_vectors(request.seed_ids)
        k = request.effective_k_per_seed + len(request.seed_ids)
        hits = search_batch(self.index, Q, k, nprobe, threads)
        merged = merge_hits(request.seed_ids, hits)
        seeds = set(request.seed_ids)
        entries = [
            ExpansionEntry(cid, score, seed)
            for cid, (score, seed) in merged.items()
            if not (request.exclude_seeds and cid in seeds)
            and (not request.attribute_filters or self._passes(cid, request.attribute_filters))
        ]
        entries.sort(key=lambda e: (-e.score, e.customer_id))
        entries = entries[: request.output_size]
        meta = {
            "model": self.model_path,
            "index": self.index_path,
            "nprobe": nprobe,
            "request": request.to_dict(),
            "elapsed_ms": None,
        }
        if not entries:
            meta["note"] = "no candidates survived seed exclusion and attribute filters"
        return ExpansionResult(entries, meta)


def expand(
    request: ExpansionRequest,
    engine: ExpansionEngine,
    nprobe: int | None = None,
    threads: int = 1,
    timing: bool = False,
) -> ExpansionResult:
    t0 = time.perf_counter()
    result = engine.expand(request, nprobe, threads)
    if timing:
        result.metadata["elapsed_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return result


# --- quality experiment -----------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    location: bool
    hidden_dims: tuple[int, ...]


DEFAULT_VARIANTS = (
    Variant("no-location/2-layer", False, (256, 128)),
    Variant("word-embedding/2-layer", True, (256, 128)),
    Variant("no-location/3-layer", False, (256, 256, 128)),
    Variant("word-embedding/3-layer", True, (256, 256, 128)),
)
BASELINE = DEFAULT_VARIANTS[0].name


@dataclass
class VariantRun:
    variant: Variant
    seed: int
    report: TrainReport


def run_variants(
    records: Sequence[CustomerRecord],
    schema: FeatureSchema,
    table: WordVectorTable | None,
    metric: SimilarityMetric,
    train_window: TimeWindow,
    eval_window: TimeWindow,
    n_categories: int,
    seeds: Iterable[int],
    variants: Sequence[Variant] = DEFAULT_VARIANTS,
    n_pairs: int = 50_000,
    n_eval: int = 10_000,
    base_config: TrainConfig | None = None,
) -> list[VariantRun]:
    """Train each variant on identical pairs per seed and record held-out MAE."""
    base = base_config or TrainConfig()
    runs = []
    for seed in seeds:
        split = prepare_pairs(
            records, metric, train_window, eval_window, n_pairs, n_eval, seed, n_categories
        )
        for v in variants:
            sch = schema if v.location else schema.without_location()
            ctx = make_context(sch, records, table if v.location else None)
            cfg = TrainConfig(
                embedding_dim=base.embedding_dim,
                hidden_dims=v.hidden_dims,
                learning_rate=base.learning_rate,
                batch_size=base.batch_size,
                epochs=base.epochs,
                rng_seed=seed,
            )
            _, report = train(records, split.train, ctx, cfg, split.val, split.test)
            runs.append(VariantRun(v, seed, report))
    return runs


def summarize_runs(runs: Sequence[VariantRun], baseline: str = BASELINE) -> list[dict]:
    """Mean test MAE per variant and its percentage of the baseline's."""
    by_name: dict[str, list[float]] = {}
    order: list[Variant] = []
    for r in runs:
        if r.variant.name not in by_name:
            order.append(r.variant)
        by_name.setdefault(r.variant.name, []).append(r.report.test_mae)
    base = float(np.mean(by_name[baseline]))
    rows = []
    for v in order:
        mae = float(np.mean(by_name[v.name]))
        rows.append(
            {
                "variant": v.name,
                "location": "word-embedding" if v.location else "none",
                "hidden_layers": len(v.hidden_dims),
                "test_mae": mae,
                # The baseline's own ratio is 100 by definition, not by rounding luck.
                "relative_pct": 100.0 if v.name == baseline else 100.0 * mae / base,
                "per_seed": by_name[v.name],
            }
        )
    return rows


def format_report(rows: Sequence[dict]) -> str:
    lines = [f"{'variant':<26} {'test MAE':>10} {'vs baseline':>12}"]
    for r in rows:
        lines.append(f"{r['variant']:<26} {r['test_mae']:>10.4f} {r['relative_pct']:>11.1f}%")
    return "\n".join(lines)


def load_table(path: str | Path | None) -> WordVectorTable | None:
    return load_word_vectors(path) if path else None
