"""Compare Hamming scan backends: compiled kernel, numpy fallback, naive per-bit.

    python benchmarks/bench_hamming.py [--n 100000] [--bits 64] [--topk 100] [--reps 5]
"""

import argparse
import time

import numpy as np

from mlhash import kernels
from mlhash.retrieval import pack


def best_of(fn, reps):
    best = float("inf")
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--bits", type=int, default=64)
    ap.add_argument("--topk", type=int, default=100)
    ap.add_argument("--queries", type=int, default=20)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    db = np.where(rng.random((args.n, args.bits)) < 0.5, -1, 1).astype(np.int8)
    queries = db[rng.integers(0, args.n, args.queries)]
    pdb, pq = pack(db), pack(queries)

    naive = best_of(lambda: (db != queries[0]).sum(axis=1), args.reps)
    print(f"n={args.n} q={args.bits}  (best of {args.reps})")
    print(f"{'backend':<10} {'scan ms':>9} {'vs naive':>9} {'search ms/query':>16}")
    print(f"{'naive':<10} {naive * 1e3:9.3f} {1.0:8.1f}x {'':>16}")
    for name, impl in sorted(kernels.available_backends().items()):
        scan = best_of(lambda: impl.hamming_scan(pq.words[0], pdb.words), args.reps)
        search = best_of(lambda: impl.search_packed(pq.words, pdb.words, args.bits, args.topk), args.reps)
        print(f"{name:<10} {scan * 1e3:9.3f} {naive / scan:8.1f}x {search / args.queries * 1e3:16.3f}")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
