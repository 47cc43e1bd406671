"""Hash-center codebooks: minimum-distance selection and greedy construction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .rng import stream

MAGIC = b"MLHC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")

LITERAL = "literal"
STANDARD_GV = "gv"


class CodebookInfeasible(ValueError):
    """No distance satisfies the literal condition for this (q, c)."""


class ConstructionFailed(RuntimeError):
    """Greedy construction exhausted its restart budget."""


@dataclass(frozen=True)
class HashConfig:
    q: int
    c: int

    def __post_init__(self):
        if not 8 <= self.q <= 512:
            raise ValueError(f"code length q={self.q} outside [8, 512]")
        if self.c < 2:
            raise ValueError(f"need at least 2 classes, got c={self.c}")


@dataclass
class Codebook:
    config: HashConfig
    d: int
    centers: np.ndarray  # c x q int8 in {-1, +1}
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.config.q

    @property
    def c(self) -> int:
        return self.config.c


def _ball(q: int, radius: int) -> int:
    """Number of q-bit words within Hamming distance ``radius`` of a point."""
    if radius < 0:
        return 0
    return sum(comb(q, i) for i in range(min(radius, q) + 1))


def gv_min_distance(cfg: HashConfig, mode: str = LITERAL) -> int:
    """Minimum inter-center distance for ``cfg``.

    ``literal`` mode returns the d with ``ball(d-2) < 2**c <= ball(d-1)``;
    ``gv`` mode returns the largest d with ``c * ball(d-2) < 2**q``.
    All arithmetic is on Python integers.
    """
    q, c = cfg.q, cfg.c
    if mode == LITERAL:
        target = 1 << c
        if target > (1 << q):
            raise CodebookInfeasible(f"2^{c} exceeds 2^{q}: no distance satisfies the condition")
        d = 1
        while _ball(q, d - 1) < target:
            d += 1
        if d > q:
            # only reachable when c == q; no two q-bit codes are q+1 apart
            raise CodebookInfeasible(f"condition selects d={d} > q={q}")
        return d
    if mode == STANDARD_GV:
        limit = 1 << q
        d = 1
        while d + 1 <= q and c * _ball(q, d - 1) < limit:
            d += 1
        return d
    raise ValueError(f"unknown mode {mode!r}")


def select_distance(cfg: HashConfig, mode: str = LITERAL) -> tuple[int, str]:
    """Like :func:`gv_min_distance` but falls back to ``gv`` when ``literal`` is infeasible."""
    if mode == LITERAL:
        try:
            return gv_min_distance(cfg, LITERAL), LITERAL
        except CodebookInfeasible:
            pass
    return gv_min_distance(cfg, STANDARD_GV), STANDARD_GV


def generate_centers(cfg: HashConfig, d: int, seed: int = 0,
                     max_attempts: int = 8) -> Codebook:
    """Greedy randomized construction of ``c`` codes at pairwise distance >= d.

    Candidates are uniform random codes, or (half the time, once something is
    accepted) the complement of an accepted code. A candidate is kept iff it is
    at least ``d`` away from every accepted code. An attempt is abandoned after
    ``10 * c`` consecutive rejections; each restart uses a fresh RNG stream.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    q, c = cfg.q, cfg.c
    if d > q:
        raise ConstructionFailed(f"d={d} exceeds code length {q}")
    stall_limit = 10 * c
    for attempt in range(max_attempts):
        rng = stream(seed, "centers", attempt)
        accepted = np.empty((c, q), dtype=np.int8)
        k = 0
        misses = 0
        while k < c and misses < stall_limit:
            if k and rng.random() < 0.5:
                cand = -accepted[rng.integers(k)]
            else:
                cand = np.where(rng.random(q) < 0.5, -1, 1).astype(np.int8)
            if k == 0 or np.count_nonzero(accepted[:k] != cand, axis=1).min() >= d:
                accepted[k] = cand
                k += 1
                misses = 0
            else:
                misses += 1
        if k == c:
            return Codebook(cfg, d, accepted, seed, {"attempts": attempt + 1})
    raise ConstructionFailed(
        f"could not place {c} codes of length {q} at distance {d} in {max_attempts} attempts")


def make_codebook(cfg: HashConfig, mode: str = LITERAL, seed: int = 0,
                  max_attempts: int = 8) -> Codebook:
    """Select d, then construct; lowers d one step at a time if construction fails."""
    d, used_mode = select_distance(cfg, mode)
    requested = d
    while True:
        try:
            cb = generate_centers(cfg, d, seed, max_attempts)
            break
        except ConstructionFailed:
            if d <= 1:
                raise
            d -= 1
    cb.meta.update(mode=used_mode, requested_d=requested, reduced_by=requested - d)
    return cb


def verify_codebook(cb: Codebook) -> int:
    """Exact minimum pairwise Hamming distance; ``q + 1`` when there are no pairs."""
    h = np.asarray(cb.centers)
    if h.shape[0] == 0:
        raise ValueError("empty codebook")
    best = cb.config.q + 1
    for i in range(h.shape[0] - 1):
        dist = np.count_nonzero(h[i + 1:] != h[i], axis=1)
        best = min(best, int(dist.min()))
    return best


def save_codebook(cb: Codebook, path) -> None:
    centers = np.ascontiguousarray(cb.centers, dtype=np.int8)
    header = _HEADER.pack(MAGIC, VERSION, cb.q, cb.c, cb.d, cb.seed)
    from .dataio import atomic_write_bytes
    atomic_write_bytes(Path(path), header + centers.tobytes())


def load_codebook(path) -> Codebook:
    from .dataio import FormatError, TruncatedFile, UnrecognizedFormat
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise UnrecognizedFormat("unrecognized format (expected MLHC)", 0)
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
    _, version, q, c, d, seed = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported codebook version {version}", 4)
    need = _HEADER.size + q * c
    if len(raw) < need:
        raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
    centers = np.frombuffer(raw, dtype=np.int8, count=q * c, offset=_HEADER.size)
    return Codebook(HashConfig(q, c), d, centers.reshape(c, q).copy(), seed)
