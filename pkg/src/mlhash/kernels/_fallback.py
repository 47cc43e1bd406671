"""Pure numpy versions of the compiled Hamming kernels (same signatures)."""

import numpy as np


def hamming_scan(query: np.ndarray, db: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.uint64)
    if query.shape[0] != db.shape[1]:
        raise ValueError("query and database word counts differ")
    return np.bitwise_count(np.bitwise_xor(db, query)).sum(axis=1, dtype=np.int32)


def rank_by_distance(dist: np.ndarray, max_dist: int, topk: int):
    k = min(topk, len(dist))
    order = np.argsort(dist, kind="stable")[:k].astype(np.int64)
    return order, np.asarray(dist, dtype=np.int32)[order]


def search_packed(queries: np.ndarray, db: np.ndarray, q: int, topk: int):
    if queries.shape[1] != db.shape[1]:
        raise ValueError("query and database word counts differ")
    k = min(topk, db.shape[0])
    ids = np.empty((queries.shape[0], k), dtype=np.int64)
    dists = np.empty((queries.shape[0], k), dtype=np.int32)
    for t in range(queries.shape[0]):
        ids[t], dists[t] = rank_by_distance(hamming_scan(queries[t], db), q, k)
    return ids, dists
