"""Mini-batch training of the dual-branch model, RMSProp, checkpoints, encoding."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .codebook import Codebook
from .dataio import FeatureDataset, FormatError, TruncatedFile, UnrecognizedFormat, atomic_write_bytes
from .losses import LossBreakdown, center_loss, detached_branch, mutual_loss, pairwise_loss, total_loss
from .moh import EXPERT_KINDS, MoHConfig, MoHModel, binarize, build_model
from .rng import stream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MLHM"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIdBBBBI")


class TrainingError(RuntimeError):
    """Raised on a non-finite loss; ``snapshot`` says where it happened."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    moh: MoHConfig
    lambda1: float = 4.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    seed: int = 0
    backbone_hidden: int = 0
    mutual_parity_invert: bool = False
    enable_ml: bool = True
    enable_moh: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive (batch_size >= 2)")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.rmsprop_decay < 1 or self.rmsprop_eps <= 0:
            raise ValueError("rmsprop_decay must be in [0, 1) and rmsprop_eps positive")


# ---------------------------------------------------------------------------
# Config files: flat ``key = value`` lines, ``moh.`` prefix for layer fields
# ---------------------------------------------------------------------------

def _coerce(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_types(cls) -> dict:
    return {f.name: _TYPES.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            for f in dataclasses.fields(cls)}


def parse_config_text(text: str, feature_dim: int, q: int) -> TrainConfig:
    """Parse a config file body. Unknown keys are an error."""
    top = _field_types(TrainConfig)
    top.pop("moh")
    layer = _field_types(MoHConfig)
    top_vals, moh_vals = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("moh."):
            name = key[4:]
            if name not in layer:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            moh_vals[name] = _coerce(raw, layer[name])
        elif key in top:
            top_vals[key] = _coerce(raw, top[key])
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    for name, actual in (("feature_dim", feature_dim), ("q", q)):
        if name in moh_vals and moh_vals[name] != actual:
            raise ValueError(f"moh.{name}={moh_vals[name]} does not match the data ({actual})")
        moh_vals[name] = actual
    return TrainConfig(moh=MoHConfig(**moh_vals), **top_vals)


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "moh":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for f in dataclasses.fields(cfg.moh):
        lines.append(f"moh.{f.name} = {getattr(cfg.moh, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    mean_square: list[np.ndarray] = field(default_factory=list)


def rmsprop_step(params: list[ag.Node], grads: list[np.ndarray], state: OptimizerState,
                 lr: float, decay: float = 0.9, eps: float = 1e-8) -> None:
    """``acc = decay*acc + (1-decay)*g^2``; ``theta -= lr*g/(sqrt(acc)+eps)``."""
    if not state.mean_square:
        state.mean_square = [np.zeros_like(p.value) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        acc = decay * state.mean_square[i] + (1.0 - decay) * g * g
        state.mean_square[i] = acc
        p.value = p.value - lr * g / (np.sqrt(acc) + eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: list[LossBreakdown]
    wall_time: float
    seeds: dict
    checkpoint: str | None = None

    def epoch_losses(self) -> np.ndarray:
        return np.array([b.L for b in self.epochs])

    def jsonl(self) -> str:
        return "".join(json.dumps(b.as_record(i)) + "\n" for i, b in enumerate(self.epochs))


def batch_losses(model: MoHModel, x: np.ndarray, y: np.ndarray, cb: Codebook,
                 cfg: TrainConfig, epoch: int):
    """Forward one batch through both branches and combine the three objectives."""
    uc, up = model.forward(x)
    parity = detached_branch(epoch, cfg.mutual_parity_invert)
    parts = {"C": center_loss(uc, cb, y)[0], "P": pairwise_loss(up, y)[0]}
    lam3 = cfg.lambda3
    if cfg.enable_ml:
        parts["M"] = mutual_loss(uc, up, epoch, cfg.mutual_parity_invert)
    else:
        lam3 = 0.0
    return total_loss(parts, cfg.lambda1, cfg.lambda2, lam3, parity)


def train(dataset: FeatureDataset, cb: Codebook, cfg: TrainConfig,
          model: MoHModel | None = None) -> tuple[MoHModel, TrainReport]:
    """Run ``cfg.epochs`` epochs over ``dataset``.

    Mutual-loss direction follows the epoch index. A trailing batch with fewer
    than two samples is dropped (the pairwise loss needs pairs).
    """
    if dataset.feature_dim != cfg.moh.feature_dim:
        raise ValueError(f"dataset width {dataset.feature_dim} != moh.feature_dim {cfg.moh.feature_dim}")
    if dataset.c != cb.c:
        raise ValueError(f"label width {dataset.c} != codebook classes {cb.c}")
    if cfg.moh.q != cb.q:
        raise ValueError(f"moh.q {cfg.moh.q} != codebook q {cb.q}")
    if model is None:
        model = build_model(cfg.moh, cfg.backbone_hidden, cfg.seed, cfg.enable_moh)
    params = model.params()
    state = OptimizerState()
    shuffle = stream(cfg.seed, "shuffle")
    x_all, y_all = dataset.features, dataset.labels
    history: list[LossBreakdown] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(dataset.n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            ag.zero_grads(params)
            loss, br = batch_losses(model, x_all[idx], y_all[idx], cb, cfg, epoch)
            if not np.isfinite(br.L):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batches}",
                                    {"epoch": epoch, "batch": batches, "breakdown": br.to_dict()})
            ag.backward(loss)
            rmsprop_step(params, [p.grad for p in params], state, cfg.learning_rate,
                         cfg.rmsprop_decay, cfg.rmsprop_eps)
            sums += (br.L_C, br.L_P, br.L_M, br.L)
            batches += 1
        mean = sums / max(batches, 1)
        history.append(LossBreakdown(*mean, cfg.lambda1, cfg.lambda2,
                                     cfg.lambda3 if cfg.enable_ml else 0.0,
                                     detached_branch(epoch, cfg.mutual_parity_invert)))
        log.debug("epoch %d L=%.6f", epoch, mean[3])
    report = TrainReport(history, time.perf_counter() - t0,
                         {"seed": cfg.seed, "init": "init", "shuffle": "shuffle"})
    return model, report


def encode(model: MoHModel, features: np.ndarray, branch: str = "c") -> np.ndarray:
    """Binary codes in {-1, +1} for ``features`` from one branch, without a graph."""
    if branch not in ("c", "p"):
        raise ValueError("branch must be 'c' or 'p'")
    with ag.no_grad():
        v = model.features(np.asarray(features, dtype=np.float64))
        return binarize(model.branch(v, branch).u)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: MoHModel) -> bytes:
    cfg = model.cfg
    named = model.named_params()
    out = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, cfg.feature_dim, cfg.hidden_dim, cfg.q,
                             cfg.m, cfg.activation_ratio, cfg.shared_experts, cfg.use_softmax_gate,
                             EXPERT_KINDS.index(cfg.expert_kind), model.enable_moh,
                             model.backbone_hidden),
           struct.pack("<QI", model.seed, len(named))]
    for name, p in named:
        key = name.encode()
        rows, cols = p.value.shape
        out.append(struct.pack("<I", len(key)) + key + struct.pack("<II", rows, cols))
        out.append(p.value.astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: MoHModel, path) -> None:
    atomic_write_bytes(Path(path), checkpoint_bytes(model))


def load_checkpoint(path) -> MoHModel:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise UnrecognizedFormat("unrecognized format (expected MLHM)", 0)
    if len(raw) < _CKPT_HEADER.size + 12:
        raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
    (_, version, fdim, hidden, q, m, ratio, shared, softmax, kind, enable_moh,
     backbone_hidden) = _CKPT_HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = _CKPT_HEADER.size
    seed, count = struct.unpack_from("<QI", raw, pos)
    pos += 12
    cfg = MoHConfig(fdim, q, m, ratio, hidden, bool(shared), bool(softmax), EXPERT_KINDS[kind])
    model = build_model(cfg, backbone_hidden, seed, bool(enable_moh))
    named = dict(model.named_params())
    if count != len(named):
        raise FormatError(f"checkpoint holds {count} matrices, model expects {len(named)}", pos - 4)
    for _ in range(count):
        try:
            (klen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + klen].decode()
            pos += 4 + klen
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
        except struct.error:
            raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw)) from None
        if name not in named or named[name].value.shape != (rows, cols):
            raise FormatError(f"unexpected matrix {name!r} ({rows}x{cols})", pos)
        size = 8 * rows * cols
        if pos + size > len(raw):
            raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
        named[name].value = np.frombuffer(raw, "<f8", rows * cols, pos).astype(np.float64).reshape(rows, cols)
        named[name].zero_grad()
        pos += size
    return model
