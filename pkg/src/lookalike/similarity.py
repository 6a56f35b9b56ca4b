"""Ground-truth customer similarity metrics and labeled pair sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .customer_data import CustomerRecord, TimeWindow, activity_matrix, activity_vector


class MetricKind(enum.Enum):
    COSINE = "cosine"
    JACCARD = "jaccard"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class SimilarityMetric:
    kind: MetricKind = MetricKind.COSINE
    channel: str = "transaction"

    @classmethod
    def parse(cls, kind: str, channel: str = "transaction") -> "SimilarityMetric":
        return cls(MetricKind(kind), channel)

    def __call__(self, o_a, o_b) -> float:
        return _METRICS[self.kind](o_a, o_b)


@dataclass(frozen=True)
class LabeledPair:
    id_a: int
    id_b: int
    target: float

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValueError("a pair needs two distinct customers")
        if not 0.0 <= self.target <= 1.0:
            raise ValueError(f"target {self.target} outside [0, 1]")


def _pair(o_a, o_b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(o_a, dtype=np.float64)
    b = np.asarray(o_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def cosine_similarity(o_a, o_b) -> float:
    """Cosine of two activity vectors; 0 when either is all-zero."""
    a, b = _pair(o_a, o_b)
    ma, mb = np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0)
    if ma == 0.0 or mb == 0.0:
        return 0.0
    # Rescale first so tiny or huge magnitudes neither underflow nor overflow.
    a, b = a / ma, b / mb
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    # Guard the [0, 1] range against rounding for (near-)parallel vectors.
    return float(min(1.0, max(0.0, np.dot(a, b) / (na * nb))))


def jaccard_similarity(o_a, o_b) -> float:
    a, b = _pair(o_a, o_b)
    sa, sb = a > 0, b > 0
    union = np.count_nonzero(sa | sb)
    if union == 0:
        return 1.0
    return np.count_nonzero(sa & sb) / union


def euclidean_mapped_similarity(o_a, o_b) -> float:
    a, b = _pair(o_a, o_b)
    return float(1.0 / (1.0 + np.linalg.norm(a - b)))


_METRICS = {
    MetricKind.COSINE: cosine_similarity,
    MetricKind.JACCARD: jaccard_similarity,
    MetricKind.EUCLIDEAN: euclidean_mapped_similarity,
}


def pair_target(
    a: CustomerRecord,
    b: CustomerRecord,
    metric: SimilarityMetric,
    window: TimeWindow,
    n_categories: int,
) -> float:
    return metric(
        activity_vector(a, metric.channel, window, n_categories),
        activity_vector(b, metric.channel, window, n_categories),
    )


def _row_scaled(M: np.ndarray) -> np.ndarray:
    m = np.max(np.abs(M), axis=1, initial=0.0)
    return M / np.where(m > 0, m, 1.0)[:, None]


def rowwise_similarity(kind: MetricKind, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Vectorized metric over matching rows of two activity matrices."""
    if kind is MetricKind.COSINE:
        A = _row_scaled(A)
        B = _row_scaled(B)
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        dots = np.einsum("ij,ij->i", A, B)
        out = np.zeros(len(A))
        ok = (na > 0) & (nb > 0)
        out[ok] = dots[ok] / (na[ok] * nb[ok])
        return np.clip(out, 0.0, 1.0)
    if kind is MetricKind.JACCARD:
        sa, sb = A > 0, B > 0
        inter = np.count_nonzero(sa & sb, axis=1)
        union = np.count_nonzero(sa | sb, axis=1)
        return np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return 1.0 / (1.0 + np.linalg.norm(A - B, axis=1))


def _n_distinct_pairs(n: int) -> int:
    return n * (n - 1) // 2


def _sample_pair_indices(activity: np.ndarray, n_pairs: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    n = len(activity)
    total = _n_distinct_pairs(n)
    if n_pairs > total:
        raise ValueError(f"n_pairs={n_pairs} exceeds the {total} distinct unordered pairs")

    if 2 * n_pairs > total:
        iu, ju = np.triu_indices(n, k=1)
        pick = rng.choice(total, size=n_pairs, replace=False)
        return [(int(iu[p]), int(ju[p])) for p in pick]

    chosen: set[tuple[int, int]] = set()
    out: list[tuple[int, int]] = []

    def take(i: int, j: int) -> bool:
        if i == j:
            return False
        key = (i, j) if i < j else (j, i)
        if key in chosen:
            return False
        chosen.add(key)
        out.append(key)
        return True

    # Anchored half: pairs sharing their single most active category.
    n_anchored = n_pairs // 2
    active = activity.sum(axis=1) > 0
    top = np.where(active, activity.argmax(axis=1), -1)
    groups = [np.flatnonzero(top == c) for c in range(activity.shape[1])]
    groups = [g for g in groups if len(g) >= 2]
    capacity = sum(_n_distinct_pairs(len(g)) for g in groups)
    n_anchored = min(n_anchored, capacity // 2)
    if n_anchored:
        members = np.concatenate(groups)
        owner = np.concatenate([np.full(len(g), gi) for gi, g in enumerate(groups)])
        while len(out) < n_anchored:
            m = int(rng.integers(len(members)))
            g = groups[owner[m]]
            take(int(members[m]), int(g[rng.integers(len(g))]))

    while len(out) < n_pairs:
        i, j = rng.integers(n, size=2)
        take(int(i), int(j))

    perm = rng.permutation(len(out))
    return [out[p] for p in perm]


def make_training_pairs(
    records: Sequence[CustomerRecord],
    metric: SimilarityMetric,
    window: TimeWindow,
    n_pairs: int,
    rng_seed: int,
    n_categories: int,
    activity: np.ndarray | None = None,
) -> list[LabeledPair]:
    """Stratified pair sample: half uniform, half sharing a top category.

    ``activity`` may carry a precomputed ``activity_matrix`` for the metric's
    channel and window; it is computed otherwise.
    """
    if len(records) < 2:
        raise ValueError("need at least two records to form pairs")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if activity is None:
        activity = activity_matrix(records, metric.channel, window, n_categories)
    rng = np.random.default_rng(rng_seed)
    idx = _sample_pair_indices(activity, n_pairs, rng)
    ia = np.fromiter((p[0] for p in idx), dtype=np.int64, count=len(idx))
    ib = np.fromiter((p[1] for p in idx), dtype=np.int64, count=len(idx))
    targets = rowwise_similarity(metric.kind, activity[ia], activity[ib])
    return [
        LabeledPair(records[i].customer_id, records[j].customer_id, float(t))
        for i, j, t in zip(ia.tolist(), ib.tolist(), targets.tolist())
    ]


def relabel_pairs(
    pairs: Sequence[LabeledPair],
    records: Sequence[CustomerRecord],
    metric: SimilarityMetric,
    window: TimeWindow,
    n_categories: int,
) -> list[LabeledPair]:
    """Same customer pairs, targets recomputed over another window."""
    row = {r.customer_id: i for i, r in enumerate(records)}
    activity = activity_matrix(records, metric.channel, window, n_categories)
    ia = np.array([row[p.id_a] for p in pairs], dtype=np.int64)
    ib = np.array([row[p.id_b] for p in pairs], dtype=np.int64)
    targets = rowwise_similarity(metric.kind, activity[ia], activity[ib])
    return [LabeledPair(p.id_a, p.id_b, float(t)) for p, t in zip(pairs, targets.tolist())]


def save_pairs(pairs: Sequence[LabeledPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"id_a": p.id_a, "id_b": p.id_b, "target": p.target}) + "\n")


def load_pairs(path: str | Path) -> list[LabeledPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(LabeledPair(int(obj["id_a"]), int(obj["id_b"]), float(obj["target"])))
    return out
