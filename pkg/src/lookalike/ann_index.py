"""Inverted-file (IVF-flat) cosine index, exact oracle, k-means, persistence."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from ._binio import Reader
from .customer_data import DataError

INDEX_MAGIC = b"LKIX"
INDEX_VERSION = 1
EMBED_MAGIC = b"LKEV"
EMBED_VERSION = 1


@dataclass(frozen=True)
class SearchHit:
    customer_id: int
    score: float


@dataclass
class EmbeddingMatrix:
    ids: np.ndarray  # int64, unique
    vectors: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.vectors = np.atleast_2d(np.asarray(self.vectors))
        if len(self.ids) != len(self.vectors):
            raise ValueError("ids and vectors disagree in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate customer_id in embedding matrix")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def row_of(self) -> dict[int, int]:
        return {int(c): i for i, c in enumerate(self.ids.tolist())}


@dataclass
class IvfIndex:
    dim: int
    centroids: np.ndarray  # (nlist, dim) float32
    offsets: np.ndarray  # (nlist + 1,) int64; list l is rows offsets[l]:offsets[l+1]
    ids: np.ndarray  # (n,) int64, grouped by list
    vectors: np.ndarray  # (n, dim) float32, unit norm, grouped by list

    @property
    def nlist(self) -> int:
        return len(self.centroids)

    def __len__(self):
        return len(self.ids)

    def list_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def posting_list(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[l], self.offsets[l + 1]
        return self.ids[a:b], self.vectors[a:b]


def default_nlist(n: int) -> int:
    return max(1, min(4096, math.ceil(math.sqrt(n)), n))


def default_nprobe(nlist: int) -> int:
    return max(1, nlist // 8)


def _rank(ids: np.ndarray, scores: np.ndarray, k: int) -> list[SearchHit]:
    order = np.lexsort((ids, -scores))[:k]
    return [SearchHit(int(ids[i]), float(scores[i])) for i in order]


def brute_force_knn(query, matrix: EmbeddingMatrix, k: int) -> list[SearchHit]:
    """Exact top-k by cosine over every row; zero-norm query or rows score 0."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (matrix.dim,):
        raise ValueError(f"query dim {q.shape} != matrix dim {matrix.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    V = matrix.vectors.astype(np.float64)
    norms = np.linalg.norm(V, axis=1)
    qn = np.linalg.norm(q)
    scores = np.zeros(len(V))
    ok = norms > 0
    if qn > 0:
        scores[ok] = (V[ok] @ q) / (norms[ok] * qn)
    return _rank(matrix.ids, np.clip(scores, -1.0, 1.0), k)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _assign(X: np.ndarray, C: np.ndarray, chunk: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(X), dtype=np.int64)
    best = np.empty(len(X))
    for s in range(0, len(X), chunk):
        d = _sq_dists(X[s : s + chunk], C)
        labels[s : s + chunk] = d.argmin(axis=1)
        best[s : s + chunk] = d[np.arange(len(d)), labels[s : s + chunk]]
    return labels, best


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[i] = X[idx]
        d2 = np.minimum(d2, _sq_dists(X, centers[i : i + 1])[:, 0])
    return centers


def kmeans(vectors, nlist: int, max_iters: int = 25, rng_seed: int = 0) -> np.ndarray:
    """k-means++ seeding then Lloyd iterations to a fixpoint or ``max_iters``."""
    X = np.asarray(vectors, dtype=np.float64)
    n = len(X)
    if not 1 <= nlist <= n:
        raise ValueError(f"nlist={nlist} must lie in [1, {n}]")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(rng_seed)
    C = _kmeans_pp(X, nlist, rng)
    prev = None
    for _ in range(max_iters):
        labels, dist = _assign(X, C)
        counts = np.bincount(labels, minlength=nlist)
        for empty in np.flatnonzero(counts == 0):
            # Steal the point farthest from its centroid, from a cluster that can spare it.
            movable = counts[labels] > 1
            far = int(np.argmax(np.where(movable, dist, -1.0)))
            counts[labels[far]] -= 1
            labels[far] = empty
            counts[empty] = 1
            dist[far] = 0.0
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        C = sums / counts[:, None]
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels
    return C


def _normalize_rows(matrix: EmbeddingMatrix) -> np.ndarray:
    V = matrix.vectors.astype(np.float64)
    norms = np.linalg.norm(V, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        raise ValueError(f"customer_id {int(matrix.ids[bad[0]])} has a zero-norm embedding")
    return V / norms[:, None]


def build_ivf(
    matrix: EmbeddingMatrix, nlist: int | None = None, rng_seed: int = 0, max_iters: int = 25
) -> IvfIndex:
    """Train centroids on unit-normalized rows and file each row under its nearest one."""
    n = len(matrix)
    if n == 0:
        raise ValueError("cannot index an empty embedding matrix")
    nlist = default_nlist(n) if nlist is None else nlist
    if not 1 <= nlist <= n:
        raise ValueError(f"nlist={nlist} must lie in [1, {n}]")
    U = _normalize_rows(matrix)
    centroids = kmeans(U, nlist, max_iters, rng_seed).astype(np.float32)
    stored = U.astype(np.float32)
    labels, _ = _assign(stored.astype(np.float64), centroids.astype(np.float64))
    order = np.argsort(labels, kind="stable")
    offsets = np.zeros(nlist + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(labels, minlength=nlist))
    return IvfIndex(
        dim=matrix.dim,
        centroids=np.ascontiguousarray(centroids),
        offsets=offsets,
        ids=np.ascontiguousarray(matrix.ids[order]),
        vectors=np.ascontiguousarray(stored[order]),
    )


def _probe(index: IvfIndex, Q: np.ndarray, nprobe: int) -> np.ndarray:
    C = index.centroids.astype(np.float64)
    out = np.empty((len(Q), nprobe), dtype=np.int64)
    for i, q in enumerate(Q):
        d = ((C - q) ** 2).sum(axis=1)
        out[i] = np.argsort(d, kind="stable")[:nprobe]
    return out


def search_batch(
    index: IvfIndex, queries, k: int, nprobe: int, threads: int = 1
) -> list[list[SearchHit]]:
    """``search`` for each row of ``queries``; kernels run once over the batch."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe={nprobe} must lie in [1, {index.nlist}]")
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != index.dim:
        raise ValueError(f"query dim {Q.shape[1]} != index dim {index.dim}")
    norms = np.linalg.norm(Q, axis=1)
    live = np.flatnonzero(norms > 0)
    results: list[list[SearchHit]] = [[] for _ in range(len(Q))]
    if not len(live):
        return results
    Qn = np.ascontiguousarray(Q[live] / norms[live, None])
    probes = np.ascontiguousarray(_probe(index, Qn, nprobe))
    kk = min(k, len(index))
    ids, scores, counts = _kernels.scan_topk_batch(
        Qn, probes, index.offsets, index.ids, index.vectors, kk, threads
    )
    np.clip(scores, -1.0, 1.0, out=scores)
    for row, qi in enumerate(live.tolist()):
        m = int(counts[row])
        results[qi] = [
            SearchHit(c, s) for c, s in zip(ids[row, :m].tolist(), scores[row, :m].tolist())
        ]
    return results


def search(index: IvfIndex, query, k: int, nprobe: int) -> list[SearchHit]:
    """Top-k by cosine within the ``nprobe`` lists nearest the query.

    A zero-norm query has no direction and returns no hits.
    """
    return search_batch(index, [query], k, nprobe)[0]


def recall_at_k(approx: Sequence[SearchHit], exact: Sequence[SearchHit], k: int) -> float:
    truth = {h.customer_id for h in exact[:k]}
    if not truth:
        return 1.0
    return len(truth & {h.customer_id for h in approx[:k]}) / len(truth)


# --- persistence --------------------------------------------------------------


def index_bytes(index: IvfIndex) -> bytes:
    parts = [
        INDEX_MAGIC,
        struct.pack("<III", INDEX_VERSION, index.dim, index.nlist),
        index.centroids.astype("<f4").tobytes(),
    ]
    entry = np.dtype([("id", "<u8"), ("v", "<f4", (index.dim,))])
    for l in range(index.nlist):
        ids, vecs = index.posting_list(l)
        block = np.empty(len(ids), dtype=entry)
        block["id"] = ids
        block["v"] = vecs
        parts.append(struct.pack("<Q", len(ids)))
        parts.append(block.tobytes())
    return b"".join(parts)


def save_index(index: IvfIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_bytes(index))


def load_index(path: str | Path) -> IvfIndex:
    r = Reader(Path(path).read_bytes(), f"index file {path}")
    r.header(INDEX_MAGIC, INDEX_VERSION)
    dim, nlist = r.unpack("<II")
    if dim == 0 or nlist == 0:
        r.fail("dim and nlist must be positive", at=8)
    centroids = r.array("<f4", nlist * dim).reshape(nlist, dim).astype(np.float32)
    entry = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    sizes, ids, vecs = [], [], []
    for _ in range(nlist):
        (length,) = r.unpack("<Q")
        if length > (len(r.buf) - r.pos) // entry.itemsize:
            r.fail(f"posting list of {length} entries runs past end of file")
        block = np.frombuffer(r.take(length * entry.itemsize), dtype=entry)
        sizes.append(length)
        ids.append(block["id"].astype(np.int64))
        vecs.append(block["v"].astype(np.float32))
    r.finish()
    offsets = np.zeros(nlist + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    return IvfIndex(
        dim=dim,
        centroids=np.ascontiguousarray(centroids),
        offsets=offsets,
        ids=np.ascontiguousarray(np.concatenate(ids)),
        vectors=np.ascontiguousarray(np.concatenate(vecs).reshape(-1, dim)),
    )


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    entry = np.dtype([("id", "<u8"), ("v", "<f4", (matrix.dim,))])
    block = np.empty(len(matrix), dtype=entry)
    block["id"] = matrix.ids
    block["v"] = matrix.vectors
    Path(path).write_bytes(
        EMBED_MAGIC
        + struct.pack("<IQI", EMBED_VERSION, len(matrix), matrix.dim)
        + block.tobytes()
    )


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    r = Reader(Path(path).read_bytes(), f"embedding file {path}")
    r.header(EMBED_MAGIC, EMBED_VERSION)
    count, dim = r.unpack("<QI")
    if dim == 0:
        r.fail("dim must be positive", at=16)
    entry = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    if count > (len(r.buf) - r.pos) // entry.itemsize:
        r.fail(f"{count} entries run past end of file")
    block = np.frombuffer(r.take(count * entry.itemsize), dtype=entry)
    r.finish()
    return EmbeddingMatrix(block["id"].astype(np.int64), block["v"].astype(np.float32).reshape(-1, dim))


def mixture_embeddings(
    n: int, dim: int, n_clusters: int = 500, spread: float = 1.0, rng_seed: int = 0
) -> EmbeddingMatrix:
    """Clustered test embeddings: unit-direction cluster centers plus isotropic noise.

    ``spread`` is the per-vector noise norm relative to a center's unit norm.
    Learned embeddings are clustered like this; isotropic Gaussian noise is not.
    """
    rng = np.random.default_rng(rng_seed)
    centers = rng.normal(size=(n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    which = rng.integers(n_clusters, size=n)
    noise = rng.normal(scale=spread / np.sqrt(dim), size=(n, dim))
    return EmbeddingMatrix(np.arange(n), (centers[which] + noise).astype(np.float32))
