"""Shared oracles and the toy protocol used by several test modules."""

import numpy as np

from mlhash.codebook import HashConfig, make_codebook
from mlhash.dataio import DATABASE, QUERY, TRAIN, split, synth_clusters
from mlhash.moh import MoHConfig
from mlhash.trainer import TrainConfig


def toy_data(seed: int = 0):
    """Ten 32-dim clusters: 200 train, 50 query, 500 database; 16-bit centers."""
    ds = split(synth_clusters(10, 75, 32, 0.15, seed), 50, 200, seed)
    cb = make_codebook(HashConfig(16, 10), seed=seed)
    return ds.subset(TRAIN), ds.subset(QUERY), ds.subset(DATABASE), cb


def toy_config(seed: int = 0, **overrides) -> TrainConfig:
    moh = MoHConfig(feature_dim=32, q=16, m=8, activation_ratio=0.25, hidden_dim=256)
    base = dict(moh=moh, lambda1=4.0, lambda2=1.0, lambda3=1.0, learning_rate=1e-4,
                batch_size=64, epochs=100, seed=seed, backbone_hidden=256)
    base.update(overrides)
    return TrainConfig(**base)


def epoch_pair_decrease(losses) -> float:
    """Fraction of consecutive epoch pairs whose mean loss went down."""
    losses = np.asarray(losses)
    pairs = losses[: len(losses) // 2 * 2].reshape(-1, 2).mean(axis=1)
    return float(np.mean(np.diff(pairs) < 0))


def naive_rank(query, db):
    """Unpacked O(n*q) scan ordered by (distance, id)."""
    d = (db != query).sum(axis=1)
    return sorted(range(len(db)), key=lambda i: (d[i], i)), d


def dense_oracle(x, pool, gate, cfg, head=None):
    """Evaluate every expert on every row, then zero the non-top-k gate weights."""
    scores = x @ gate.W.value + gate.b.value
    if cfg.use_softmax_gate:
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        scores = e / e.sum(axis=1, keepdims=True)
    k = cfg.top_k
    mask = np.zeros_like(scores)
    for n, row in enumerate(scores):
        # largest k, ties to the lower index
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
        mask[n, order] = 1.0
    w = scores * mask
    out = 0.0
    for i, expert in enumerate(pool.experts):
        h = x
        layers = expert.layers
        for j, layer in enumerate(layers):
            h = h @ layer.W.value + layer.b.value
            if j < len(layers) - 1:
                h = np.maximum(h, 0.0)
        out = out + w[:, [i]] * h
    if head is not None:
        out = out @ head.W.value + head.b.value
    return out


