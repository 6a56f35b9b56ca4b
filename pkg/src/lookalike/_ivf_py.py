"""Pure numpy IVF scan; same contract as the compiled ``_ivf_core``."""

from __future__ import annotations

import numpy as np


def _topk(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the best ``k`` by (score desc, id asc), best first."""
    n = len(scores)
    if n > k:
        kth = np.partition(scores, n - k)[n - k]
        keep = np.flatnonzero(scores >= kth)
    else:
        keep = np.arange(n)
    order = np.lexsort((ids[keep], -scores[keep]))
    return keep[order[:k]]


def scan_topk_batch(queries, probes, offsets, ids, vectors, k, threads=1):
    nq = len(queries)
    out_ids = np.full((nq, k), -1, dtype=np.int64)
    out_scores = np.full((nq, k), -np.inf, dtype=np.float64)
    counts = np.zeros(nq, dtype=np.int64)
    if k == 0:
        return out_ids, out_scores, counts
    for qi in range(nq):
        rows = np.concatenate(
            [np.arange(offsets[p], offsets[p + 1]) for p in probes[qi]]
            or [np.empty(0, dtype=np.int64)]
        )
        if not len(rows):
            continue
        scores = vectors[rows].astype(np.float64) @ queries[qi]
        cand = ids[rows]
        pick = _topk(scores, cand, k)
        m = len(pick)
        out_ids[qi, :m] = cand[pick]
        out_scores[qi, :m] = scores[pick]
        counts[qi] = m
    return out_ids, out_scores, counts
