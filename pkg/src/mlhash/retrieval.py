"""Bit-packed Hamming search and retrieval metrics (mAP@k, precision-recall)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .dataio import FormatError, TruncatedFile, UnrecognizedFormat, atomic_write_bytes, atomic_write_text

MAGIC = b"MLHB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class PackedCodes:
    """Codes packed LSB-first: +1 is bit 1, bit j lives in word j // 64 at j % 64."""

    n: int
    q: int
    words: np.ndarray  # n x ceil(q/64) uint64

    @property
    def words_per_code(self) -> int:
        return self.words.shape[1]


def pack(codes) -> PackedCodes:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("codes must be a 2-D array")
    if not np.all((codes == 1) | (codes == -1)):
        raise ValueError("codes must contain only -1 and +1")
    n, q = codes.shape
    w = (q + 63) // 64
    bits = np.zeros((n, w * 64), dtype=np.uint8)
    bits[:, :q] = codes > 0
    as_bytes = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(as_bytes).view("<u8").astype(np.uint64).reshape(n, w)
    return PackedCodes(n, q, words)


def unpack(packed: PackedCodes) -> np.ndarray:
    as_bytes = np.ascontiguousarray(packed.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes.reshape(packed.n, -1), axis=1, bitorder="little")
    return np.where(bits[:, :packed.q] == 1, 1, -1).astype(np.int8)


def hamming(a_row: np.ndarray, b_row: np.ndarray) -> int:
    """Distance between two packed rows (XOR then popcount)."""
    return int(np.bitwise_count(np.bitwise_xor(np.asarray(a_row, np.uint64),
                                               np.asarray(b_row, np.uint64))).sum())


@dataclass
class RankedList:
    query_id: int
    ids: np.ndarray
    distances: np.ndarray
    truncated: bool = False  # topk exceeded the database size


def search(queries: PackedCodes, db: PackedCodes, topk: int) -> list[RankedList]:
    """Exact top-k by linear scan, ordered by (distance, database id)."""
    if queries.q != db.q:
        raise ValueError(f"code lengths differ: {queries.q} vs {db.q}")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    truncated = topk > db.n
    ids, dists = kernels.search_packed(np.ascontiguousarray(queries.words),
                                       np.ascontiguousarray(db.words), db.q, topk)
    return [RankedList(t, ids[t], dists[t], truncated) for t in range(queries.n)]


def label_relevance(query_labels: np.ndarray, db_labels: np.ndarray) -> np.ndarray:
    """Relevant iff the two items share a label."""
    return (np.asarray(query_labels, np.float64) @ np.asarray(db_labels, np.float64).T) > 0


@dataclass
class EvalResult:
    map_at_k: float
    k: int
    per_query_ap: np.ndarray  # NaN where the query has no relevant database item
    pr: np.ndarray | None = None  # rows of (rank, recall, precision)

    def to_json(self) -> str:
        ap = [None if np.isnan(a) else float(a) for a in self.per_query_ap]
        return json.dumps({"map": self.map_at_k, "k": self.k, "per_query_ap": ap})


def average_precision(rel: np.ndarray) -> float:
    """AP over a ranked relevance prefix, normalised by the hits inside it."""
    rel = np.asarray(rel, dtype=np.float64)
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    return float((prec * rel).sum() / max(1.0, hits[-1] if len(rel) else 0.0))


def map_at_k(ranked: list[RankedList], relevance: np.ndarray, k: int) -> EvalResult:
    """mAP@k. Queries with no relevant item anywhere in the database are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ranked:
        raise ValueError("no ranked lists")
    relevance = np.asarray(relevance, dtype=bool)
    ap = np.full(len(ranked), np.nan)
    for t, r in enumerate(ranked):
        if len(r.ids) == 0:
            raise ValueError(f"empty ranked list for query {r.query_id}")
        row = relevance[r.query_id]
        if not row.any():
            continue
        ap[t] = average_precision(row[r.ids[:k]])
    valid = ~np.isnan(ap)
    mean = float(ap[valid].mean()) if valid.any() else 0.0
    return EvalResult(mean, k, ap)


def pr_curve(ranked: list[RankedList], relevance: np.ndarray) -> np.ndarray:
    """Precision and recall at every rank, averaged over queries with relevant items.

    Needs full rankings. Returns an (n, 3) array of ``rank, recall, precision``.
    """
    relevance = np.asarray(relevance, dtype=bool)
    curves = []
    for r in ranked:
        row = relevance[r.query_id]
        total = row.sum()
        if total == 0:
            continue
        if len(r.ids) != len(row):
            raise ValueError("pr_curve needs full rankings (topk = database size)")
        hits = np.cumsum(row[r.ids])
        curves.append((hits / total, hits / np.arange(1, len(row) + 1)))
    if not curves:
        return np.empty((0, 3))
    recall = np.mean([c[0] for c in curves], axis=0)
    precision = np.mean([c[1] for c in curves], axis=0)
    return np.column_stack([np.arange(1, len(recall) + 1), recall, precision])


def evaluate(query_codes, db_codes, query_labels, db_labels, k: int,
             with_pr: bool = False) -> EvalResult:
    """Pack, search and score in one call."""
    qp, dp = pack(query_codes), pack(db_codes)
    rel = label_relevance(query_labels, db_labels)
    ranked = search(qp, dp, dp.n if with_pr else k)
    result = map_at_k(ranked, rel, k)
    if with_pr:
        result.pr = pr_curve(ranked, rel)
    return result


def save_codes(packed: PackedCodes, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, packed.n, packed.q)
    atomic_write_bytes(Path(path), header + packed.words.astype("<u8").tobytes())


def load_codes(path) -> PackedCodes:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise UnrecognizedFormat("unrecognized format (expected MLHB)", 0)
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
    _, version, n, q = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported codes version {version}", 4)
    w = (q + 63) // 64
    need = _HEADER.size + 8 * n * w
    if len(raw) < need:
        raise TruncatedFile(f"truncated at offset {len(raw)} (need {need} bytes)", len(raw))
    words = np.frombuffer(raw, dtype="<u8", count=n * w, offset=_HEADER.size)
    return PackedCodes(n, q, words.astype(np.uint64).reshape(n, w))


def write_pr_csv(points: np.ndarray, path) -> None:
    lines = ["rank,recall,precision"]
    lines += [f"{int(r)},{rec:.10g},{prec:.10g}" for r, rec, prec in points]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
