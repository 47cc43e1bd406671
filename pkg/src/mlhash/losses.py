"""Center-based, pairwise and mutual objectives, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node
from .codebook import Codebook

PROB_FLOOR = 1e-7


def _codes(u) -> Node:
    return u.u if hasattr(u, "u") else u


def similarity_matrix(labels: np.ndarray) -> np.ndarray:
    """``S_ij = 1`` iff samples i and j share at least one label."""
    y = np.asarray(labels, dtype=np.float64)
    return (y @ y.T > 0).astype(np.float64)


def center_loss(u_c, cb: Codebook, labels: np.ndarray) -> tuple[Node, np.ndarray]:
    """Cross-entropy of a softmax over sqrt(q)-scaled cosines to the centers.

    Returns the scalar loss and the unclamped class probabilities. Labels may
    be multi-hot; both the positive and the ``(1 - y) log(1 - P)`` terms are
    summed over all classes. Centers enter as constants.
    """
    u = _codes(u_c)
    y = np.asarray(labels, dtype=np.float64)
    n, q = u.shape
    if q != cb.q:
        raise ValueError(f"code width {q} != codebook q {cb.q}")
    if y.shape != (n, cb.c):
        raise ValueError(f"labels shape {y.shape} != ({n}, {cb.c})")
    h = np.asarray(cb.centers, dtype=np.float64)
    h_unit = h / np.linalg.norm(h, axis=1, keepdims=True)
    cos = ag.matmul(ag.row_normalize(u), ag.const(h_unit.T))
    probs = ag.softmax_rows(ag.scale(cos, math.sqrt(q)))
    p = ag.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = ag.mul(ag.const(y), ag.log(p))
    neg = ag.mul(ag.const(1.0 - y), ag.log(ag.add_scalar(ag.scale(p, -1.0), 1.0)))
    loss = ag.scale(ag.sum_all(ag.add(pos, neg)), -1.0 / n)
    return loss, probs.value


def pairwise_loss(u_p, labels: np.ndarray) -> tuple[Node, np.ndarray, np.ndarray]:
    """Pair likelihood over half inner products, summed over all ordered pairs / N.

    Returns ``(loss, I, S)``.
    """
    u = _codes(u_p)
    n = u.shape[0]
    if n < 2:
        raise ValueError("pairwise loss needs at least 2 samples")
    s = similarity_matrix(labels)
    if s.shape != (n, n):
        raise ValueError("labels do not match the code batch")
    inner = ag.scale(ag.matmul(u, ag.transpose(u)), 0.5)
    terms = ag.sub(ag.softplus(inner), ag.mul(ag.const(s), inner))
    return ag.scale(ag.sum_all(terms), 1.0 / n), inner.value, s


def detached_branch(epoch: int, invert: bool = False) -> str:
    """Branch used as the fixed target at ``epoch``: center on even epochs by default."""
    even = epoch % 2 == 0
    return "c" if even != invert else "p"


def mutual_loss(u_c, u_p, epoch: int, invert: bool = False) -> Node:
    """Mean of ``1 - cos`` between branch codes, one side detached by epoch parity."""
    c, p = _codes(u_c), _codes(u_p)
    if c.shape != p.shape:
        raise ValueError(f"branch shapes differ: {c.shape} vs {p.shape}")
    if detached_branch(epoch, invert) == "c":
        cos = ag.row_cosine(p, ag.detach(c))
    else:
        cos = ag.row_cosine(c, ag.detach(p))
    return ag.add_scalar(ag.scale(ag.mean_all(cos), -1.0), 1.0)


@dataclass
class LossBreakdown:
    L_C: float
    L_P: float
    L_M: float
    L: float
    lambda1: float
    lambda2: float
    lambda3: float
    epoch_parity: str  # branch detached in the mutual term

    def as_record(self, epoch: int) -> dict:
        return {"epoch": epoch, "L": self.L, "L_C": self.L_C, "L_P": self.L_P,
                "L_M": self.L_M, "parity": self.epoch_parity}

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(parts: dict, lambda1: float, lambda2: float, lambda3: float,
               parity: str = "c") -> tuple[Node, LossBreakdown]:
    """``lambda1 * L_C + lambda2 * L_P + lambda3 * L_M``.

    ``parts`` maps ``"C"``, ``"P"``, ``"M"`` to scalar nodes; a missing part
    counts as zero.
    """
    if min(lambda1, lambda2, lambda3) < 0:
        raise ValueError("loss weights must be non-negative")
    total = None
    values = {}
    for key, lam in (("C", lambda1), ("P", lambda2), ("M", lambda3)):
        node = parts.get(key)
        values[key] = node.item() if node is not None else 0.0
        if node is None:
            continue
        term = ag.scale(node, lam)
        total = term if total is None else ag.add(total, term)
    if total is None:
        total = ag.const(0.0)
    return total, LossBreakdown(values["C"], values["P"], values["M"], total.item(),
                                float(lambda1), float(lambda2), float(lambda3), parity)
