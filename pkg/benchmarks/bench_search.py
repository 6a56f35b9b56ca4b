"""Compare the compiled IVF scan with the numpy fallback.

    python3 benchmarks/bench_search.py [--n 100000] [--dim 128] [--queries 200]

Both backends get the same index, queries and probe lists; the script checks
that they agree before reporting timings.
"""

import argparse
import time

import numpy as np

from lookalike import _ivf_py
from lookalike.ann_index import EmbeddingMatrix, _probe, build_ivf, default_nlist, mixture_embeddings

try:
    from lookalike import _ivf_core
except ImportError:
    _ivf_core = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=1100)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    data = mixture_embeddings(args.n + args.queries, args.dim, rng_seed=0)
    base = EmbeddingMatrix(data.ids[: args.n], data.vectors[: args.n])
    t0 = time.perf_counter()
    index = build_ivf(base, max_iters=10)
    print(f"built index: n={args.n} dim={args.dim} nlist={index.nlist} in {time.perf_counter() - t0:.1f}s")

    Q = data.vectors[args.n :].astype(np.float64)
    Q = np.ascontiguousarray(Q / np.linalg.norm(Q, axis=1, keepdims=True))
    nlist = default_nlist(args.n)
    print(f"{'nprobe':>7} {'backend':>8} {'seconds':>9} {'q/s':>9} {'speedup':>8}")
    for nprobe in sorted({max(1, nlist // 8), max(1, nlist // 2), nlist}):
        P = np.ascontiguousarray(_probe(index, Q, nprobe))
        call = (Q, P, index.offsets, index.ids, index.vectors, args.k, args.threads)
        t_py, ref = best_of(lambda: _ivf_py.scan_topk_batch(*call), args.repeat)
        print(f"{nprobe:>7} {'numpy':>8} {t_py:>9.3f} {len(Q) / t_py:>9.0f} {'1.00x':>8}")
        if _ivf_core is None:
            continue
        t_cy, got = best_of(lambda: _ivf_core.scan_topk_batch(*call), args.repeat)
        if not np.array_equal(got[0], ref[0]):
            raise SystemExit("backends disagree on result ids")
        print(f"{nprobe:>7} {'cython':>8} {t_cy:>9.3f} {len(Q) / t_cy:>9.0f} {t_py / t_cy:>7.2f}x")
    if _ivf_core is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
