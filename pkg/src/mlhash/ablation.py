"""Ablation grids: run training cells over shared data and seeds, emit a CSV."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook
from .dataio import FeatureDataset
from .retrieval import evaluate
from .trainer import TrainConfig, encode, train

log = logging.getLogger(__name__)

CSV_HEADER = "cell_id,enable_ml,enable_moh,shared,softmax,lambda1,lambda2,lambda3,m,ratio,branch,map,seed"

GRID_KEYS = {
    "enable_ml": bool, "enable_moh": bool, "shared_experts": bool,
    "use_softmax_gate": bool, "expert_kind": str, "lambda1": float,
    "lambda2": float, "lambda3": float, "m": int, "activation_ratio": float,
}
_MOH_KEYS = {"shared_experts", "use_softmax_gate", "expert_kind", "m", "activation_ratio"}

PRESETS = {
    # baseline / +ML / +MoH / +both
    "ml-moh": [dict(enable_ml=ml, enable_moh=moh)
               for moh in (False, True) for ml in (False, True)],
    # expert design, sharing and softmax variants
    "experts": [
        dict(expert_kind="mlp", shared_experts=False, use_softmax_gate=True),
        dict(expert_kind="moh", shared_experts=False, use_softmax_gate=False),
        dict(expert_kind="moh", shared_experts=True, use_softmax_gate=True),
        dict(expert_kind="moh", shared_experts=True, use_softmax_gate=False),
        dict(expert_kind="linear", shared_experts=True, use_softmax_gate=False),
    ],
    "lambda1": [dict(lambda1=v) for v in (0.5, 1, 2, 4, 8)],
    "lambda2": [dict(lambda2=v) for v in (0.5, 1, 2, 4, 8)],
    "lambda3": [dict(lambda3=v) for v in (0.5, 1, 2, 4)],
    "moh-grid": [dict(m=m, activation_ratio=r)
                 for m in (8, 16, 32) for r in (0.125, 0.25, 0.5)],
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_grid(text: str) -> list[dict]:
    """Cartesian product of ``key = v1, v2, ...`` lines. No lines means no cells."""
    axes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"grid line {lineno}: expected 'key = v1, v2'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in GRID_KEYS:
            raise ValueError(f"grid line {lineno}: unknown key {key!r}")
        kind = GRID_KEYS[key]
        conv = _parse_bool if kind is bool else kind
        values = [conv(v.strip()) for v in raw.split(",") if v.strip()]
        axes.append([(key, v) for v in values])
    if not axes:
        return []
    return [dict(combo) for combo in itertools.product(*axes)]


def apply_cell(base: TrainConfig, cell: dict, seed: int) -> TrainConfig:
    moh = dataclasses.replace(base.moh, **{k: v for k, v in cell.items() if k in _MOH_KEYS})
    top = {k: v for k, v in cell.items() if k not in _MOH_KEYS}
    return dataclasses.replace(base, moh=moh, seed=seed, **top)


@dataclass
class CellResult:
    cell_id: str
    cfg: TrainConfig
    seed: int
    maps: dict | None  # branch -> mAP; None when the cell failed
    error: str = ""


def run_cell(cell_id: str, cfg: TrainConfig, train_set: FeatureDataset, query: FeatureDataset,
             database: FeatureDataset, cb: Codebook, k: int) -> CellResult:
    try:
        model, _ = train(train_set, cb, cfg)
        maps = {}
        for branch in ("c", "p"):
            res = evaluate(encode(model, query.features, branch),
                           encode(model, database.features, branch),
                           query.labels, database.labels, k)
            maps[branch] = res.map_at_k
        return CellResult(cell_id, cfg, cfg.seed, maps)
    except Exception as exc:  # a failed cell must not stop the grid
        log.warning("cell %s seed %d failed: %s", cell_id, cfg.seed, exc)
        return CellResult(cell_id, cfg, cfg.seed, None, str(exc))


def _cell_name(i: int, cell: dict) -> str:
    if not cell:
        return f"c{i}"
    return f"c{i}:" + ";".join(f"{k}={v}" for k, v in cell.items())


def run_grid(cells: list[dict], base: TrainConfig, train_set, query, database, cb, *,
             k: int, seeds: list[int], jobs: int = 1) -> list[CellResult]:
    tasks = [(_cell_name(i, cell), apply_cell(base, cell, s))
             for i, cell in enumerate(cells) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cid, cfg, train_set, query, database, cb, k)
                       for cid, cfg in tasks]
            return [f.result() for f in futures]
    return [run_cell(cid, cfg, train_set, query, database, cb, k) for cid, cfg in tasks]


def _row(r: CellResult, branch: str, value: str, seed: str) -> list:
    cfg = r.cfg
    return [r.cell_id, int(cfg.enable_ml), int(cfg.enable_moh), int(cfg.moh.shared_experts),
            int(cfg.moh.use_softmax_gate), cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.moh.m,
            cfg.moh.activation_ratio, branch, value, seed]


def results_csv(results: list[CellResult]) -> str:
    """Per-seed rows, then one ``seed=mean`` row per cell and branch."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_HEADER.split(","))
    by_cell: dict[str, list[CellResult]] = {}
    for r in results:
        by_cell.setdefault(r.cell_id, []).append(r)
    for runs in by_cell.values():
        for branch in ("c", "p"):
            vals = []
            for r in runs:
                if r.maps is None:
                    out.writerow(_row(r, branch, "failed", str(r.seed)))
                else:
                    vals.append(r.maps[branch])
                    out.writerow(_row(r, branch, f"{r.maps[branch]:.6f}", str(r.seed)))
            if vals:
                out.writerow(_row(runs[0], branch, f"{np.mean(vals):.6f}", "mean"))
    return buf.getvalue()


def mean_map(results: list[CellResult], cell_id: str, branch: str) -> float:
    vals = [r.maps[branch] for r in results if r.cell_id == cell_id and r.maps is not None]
    return float(np.mean(vals)) if vals else float("nan")
