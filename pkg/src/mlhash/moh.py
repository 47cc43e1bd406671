"""Mixture-of-Hash-Experts: shared experts, per-branch top-k gates, binarization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node
from .rng import stream

BRANCHES = ("c", "p")
EXPERT_KINDS = ("moh", "mlp", "linear")


@dataclass(frozen=True)
class MoHConfig:
    """Layer shape.

    ``expert_kind`` picks the expert body: ``moh`` is a two-layer perceptron
    emitting q values, ``linear`` a single projection to q values, ``mlp`` a
    two-layer perceptron back to ``feature_dim`` followed by a per-branch
    linear hash head.
    """

    feature_dim: int
    q: int
    m: int = 8
    activation_ratio: float = 0.25
    hidden_dim: int = 0  # 0 means feature_dim // 2
    shared_experts: bool = True
    use_softmax_gate: bool = False
    expert_kind: str = "moh"

    def __post_init__(self):
        if self.feature_dim < 1 or self.q < 1 or self.m < 1:
            raise ValueError("feature_dim, q and m must be positive")
        if self.hidden_dim == 0:
            object.__setattr__(self, "hidden_dim", max(1, self.feature_dim // 2))
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if not 1 <= self.top_k <= self.m:
            raise ValueError(f"activation_ratio={self.activation_ratio} gives k={self.top_k} for m={self.m}")
        if self.expert_kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.expert_kind!r}")

    @property
    def top_k(self) -> int:
        # round away float noise before ceil (e.g. 0.1 * 30)
        return math.ceil(round(self.activation_ratio * self.m, 9))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, fan_in: int, fan_out: int):
        self.W = ag.param(_glorot(rng, fan_in, fan_out))
        self.b = ag.param(np.zeros((1, fan_out)))

    def params(self) -> list[Node]:
        return [self.W, self.b]

    def __call__(self, x: Node) -> Node:
        return ag.add_bias(ag.matmul(x, self.W), self.b)


class Expert:
    def __init__(self, rng, cfg: MoHConfig):
        self.kind = cfg.expert_kind
        if self.kind == "linear":
            self.layers = [Linear(rng, cfg.feature_dim, cfg.q)]
        else:
            out = cfg.q if self.kind == "moh" else cfg.feature_dim
            self.layers = [Linear(rng, cfg.feature_dim, cfg.hidden_dim),
                           Linear(rng, cfg.hidden_dim, out)]

    def params(self) -> list[Node]:
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x: Node) -> Node:
        if len(self.layers) == 1:
            return self.layers[0](x)
        return self.layers[1](ag.relu(self.layers[0](x)))


class ExpertPool:
    def __init__(self, rng, cfg: MoHConfig):
        self.experts = [Expert(rng, cfg) for _ in range(cfg.m)]

    def __len__(self) -> int:
        return len(self.experts)

    def params(self) -> list[Node]:
        return [p for e in self.experts for p in e.params()]


class Gate(Linear):
    def __init__(self, rng, cfg: MoHConfig, branch: str):
        super().__init__(rng, cfg.feature_dim, cfg.m)
        self.branch = branch


@dataclass
class CodeBatch:
    branch: str
    u: Node
    gate_weights: np.ndarray  # N x m, zero at inactive experts
    selected: np.ndarray = field(repr=False)  # N x k expert indices


def top_k_mask(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of the k largest scores per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask, np.sort(order, axis=1)


def moh_forward(features: Node, pool: ExpertPool, gate: Gate, cfg: MoHConfig,
                head: Linear | None = None) -> CodeBatch:
    """Mix the top-k experts per sample, weighted by the branch gate's scores.

    Only selected experts are evaluated, and only on the rows that picked them.
    """
    if features.shape[1] != cfg.feature_dim:
        raise ValueError(f"feature width {features.shape[1]} != {cfg.feature_dim}")
    if not np.all(np.isfinite(features.value)):
        raise FloatingPointError("non-finite features")
    n = features.shape[0]
    scores = gate(features)
    if cfg.use_softmax_gate:
        scores = ag.softmax_rows(scores)
    mask, selected = top_k_mask(scores.value, cfg.top_k)
    weights = ag.mul(scores, ag.const(mask.astype(np.float64)))

    u = None
    for i, expert in enumerate(pool.experts):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        out = expert(ag.take_rows(features, rows))
        w = ag.take_rows(ag.take_col(weights, i), rows)
        part = ag.scatter_rows(ag.mul_col(out, w), rows, n)
        u = part if u is None else ag.add(u, part)
    if head is not None:
        u = head(u)
    return CodeBatch(gate.branch, u, weights.value, selected)


def binarize(u) -> np.ndarray:
    """Entrywise sign with sign(0) = +1, as int8."""
    u = u.value if isinstance(u, Node) else np.asarray(u)
    return np.where(u >= 0, 1, -1).astype(np.int8)


class MoHModel:
    """Backbone, expert pool(s), both gates; or two plain hash layers when MoH is off."""

    def __init__(self, cfg: MoHConfig, seed: int = 0, backbone_hidden: int = 0,
                 enable_moh: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.backbone_hidden = backbone_hidden
        self.enable_moh = enable_moh
        rng = stream(seed, "init")
        d = cfg.feature_dim
        self.backbone = ([Linear(rng, d, backbone_hidden), Linear(rng, backbone_hidden, d)]
                         if backbone_hidden else [])
        self.pools: dict[str, ExpertPool] = {}
        self.gates: dict[str, Gate] = {}
        self.heads: dict[str, Linear] = {}
        self.hash_layers: dict[str, Linear] = {}
        if not enable_moh:
            for s in BRANCHES:
                self.hash_layers[s] = Linear(rng, d, cfg.q)
            return
        if cfg.shared_experts:
            shared = ExpertPool(rng, cfg)
            self.pools = {"c": shared, "p": shared}
        else:
            self.pools = {s: ExpertPool(rng, cfg) for s in BRANCHES}
        if cfg.expert_kind == "mlp":
            self.heads = {s: Linear(rng, d, cfg.q) for s in BRANCHES}
        self.gates = {s: Gate(rng, cfg, s) for s in BRANCHES}

    def named_params(self) -> list[tuple[str, Node]]:
        """Every trainable matrix once, in checkpoint order."""
        out: list[tuple[str, Node]] = []

        def put(prefix, layer):
            out.append((f"{prefix}.W", layer.W))
            out.append((f"{prefix}.b", layer.b))

        for i, layer in enumerate(self.backbone):
            put(f"backbone.{i}", layer)
        for s in BRANCHES:
            if s in self.hash_layers:
                put(f"hash.{s}", self.hash_layers[s])
        seen = set()
        for s in BRANCHES:
            pool = self.pools.get(s)
            if pool is None or id(pool) in seen:
                continue
            seen.add(id(pool))
            tag = "shared" if self.cfg.shared_experts else s
            for e, expert in enumerate(pool.experts):
                for j, layer in enumerate(expert.layers):
                    put(f"experts.{tag}.{e}.{j}", layer)
        for s in BRANCHES:
            if s in self.heads:
                put(f"head.{s}", self.heads[s])
        for s in BRANCHES:
            if s in self.gates:
                put(f"gate.{s}", self.gates[s])
        return out

    def params(self) -> list[Node]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def features(self, x) -> Node:
        v = x if isinstance(x, Node) else ag.const(x)
        if self.backbone:
            v = self.backbone[1](ag.relu(self.backbone[0](v)))
        return v

    def branch(self, v: Node, s: str) -> CodeBatch:
        if not self.enable_moh:
            u = self.hash_layers[s](v)
            return CodeBatch(s, u, np.zeros((v.shape[0], 0)), np.zeros((v.shape[0], 0), dtype=np.intp))
        return moh_forward(v, self.pools[s], self.gates[s], self.cfg, self.heads.get(s))

    def forward(self, x) -> tuple[CodeBatch, CodeBatch]:
        v = self.features(x)
        return self.branch(v, "c"), self.branch(v, "p")


def build_model(cfg: MoHConfig, backbone_hidden: int = 0, seed: int = 0,
                enable_moh: bool = True) -> MoHModel:
    """Fresh model. ``backbone_hidden=0`` means identity backbone (precomputed features)."""
    if backbone_hidden < 0:
        raise ValueError("backbone_hidden must be >= 0")
    return MoHModel(cfg, seed, backbone_hidden, enable_moh)
