"""``mlhash`` command line: gen-centers, synth, train, encode, eval, ablate.

Failures exit with status 1 and one stderr line ``error: <code>: <message>``.
Every output artifact gets a ``<output>.manifest.json`` written next to it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, ablation, codebook, dataio, retrieval, trainer
from .dataio import FormatError, atomic_write_text

FORMAT_VERSIONS = {"MLHC": codebook.VERSION, "MLHF": dataio.VERSION,
                   "MLHM": trainer.CKPT_VERSION, "MLHB": retrieval.VERSION}


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _need_file(path: str, code: str = "file_not_found", what: str = "file") -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(code, f"{what} not found: {path}")
    return p


def write_manifest(output: Path, command: str, args: argparse.Namespace, config: dict,
                   inputs: list, outputs: list, seed, started: float, **extra) -> Path:
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": command,
        "args": argv,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "format_versions": FORMAT_VERSIONS,
        "package_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 6),
        **extra,
    }
    path = Path(f"{output}.manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_train_config(path: str | None, feature_dim: int, q: int,
                       seed: int | None) -> trainer.TrainConfig:
    text = ""
    if path is not None:
        text = _need_file(path, "config_not_found", "config").read_text()
    try:
        cfg = trainer.parse_config_text(text, feature_dim, q)
    except ValueError as exc:
        raise CLIError("bad_config", str(exc)) from None
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_centers(args) -> None:
    started = time.time()
    try:
        cfg = codebook.HashConfig(args.bits, args.classes)
    except ValueError as exc:
        raise CLIError("invalid_argument", str(exc)) from None
    mode = codebook.LITERAL if args.mode == "literal" else codebook.STANDARD_GV
    try:
        cb = codebook.make_codebook(cfg, mode, args.seed, args.max_attempts)
    except codebook.ConstructionFailed as exc:
        raise CLIError("construction_failed", str(exc)) from None
    out = Path(args.out)
    codebook.save_codebook(cb, out)
    write_manifest(out, "gen-centers", args, {"q": cfg.q, "c": cfg.c, "mode": args.mode},
                   [], [out], args.seed, started, d=cb.d, **{f"codebook_{k}": v for k, v in cb.meta.items()})
    print(f"wrote {cb.c} centers of {cb.q} bits, d={cb.d} ({cb.meta['mode']} mode) to {out}")


def cmd_synth(args) -> None:
    started = time.time()
    try:
        ds = dataio.synth_clusters(args.classes, args.per_class, args.dim, args.spread,
                                   args.seed, args.multi_label)
    except ValueError as exc:
        raise CLIError("invalid_argument", str(exc)) from None
    out = Path(args.out)
    outputs = [out]
    dataio.save_features(ds, out)
    if args.n_query is not None or args.n_train is not None:
        try:
            tagged = dataio.split(ds, args.n_query or 0, args.n_train or 0, args.seed)
        except ValueError as exc:
            raise CLIError("invalid_argument", str(exc)) from None
        stem = out.with_suffix("")
        for tag, name in dataio.TAG_NAMES.items():
            part = Path(f"{stem}.{name}{out.suffix or '.mlhf'}")
            dataio.save_features(tagged.subset(tag), part)
            outputs.append(part)
    write_manifest(out, "synth", args, {}, [], outputs, args.seed, started)
    print(f"wrote {ds.n} samples ({ds.c} classes, dim {ds.feature_dim}) to {', '.join(map(str, outputs))}")


def cmd_train(args) -> None:
    started = time.time()
    data_path = _need_file(args.data)
    centers_path = _need_file(args.centers)
    cfg_path = args.config
    if cfg_path is not None:
        _need_file(cfg_path, "config_not_found", "config")
    ds = dataio.load_features(data_path)
    cb = codebook.load_codebook(centers_path)
    cfg = _load_train_config(cfg_path, ds.feature_dim, cb.q, args.seed)
    try:
        model, report = trainer.train(ds, cb, cfg)
    except trainer.TrainingError as exc:
        raise CLIError("training_failed", f"{exc} {json.dumps(exc.snapshot)}") from None
    out = Path(args.out)
    trainer.save_checkpoint(model, out)
    outputs = [out]
    if args.log:
        atomic_write_text(Path(args.log), report.jsonl())
        outputs.append(Path(args.log))
    write_manifest(out, "train", args, {"text": trainer.config_to_text(cfg)},
                   [data_path, centers_path] + ([Path(cfg_path)] if cfg_path else []),
                   outputs, cfg.seed, started, final_loss=report.epochs[-1].L if report.epochs else None)
    last = report.epochs[-1].L if report.epochs else float("nan")
    print(f"trained {cfg.epochs} epochs in {report.wall_time:.1f}s, final L={last:.6f}; checkpoint {out}")


def cmd_encode(args) -> None:
    started = time.time()
    ckpt = _need_file(args.checkpoint)
    data_path = _need_file(args.data)
    model = trainer.load_checkpoint(ckpt)
    ds = dataio.load_features(data_path)
    codes = trainer.encode(model, ds.features, args.branch)
    out = Path(args.out)
    retrieval.save_codes(retrieval.pack(codes), out)
    write_manifest(out, "encode", args, {"branch": args.branch}, [ckpt, data_path], [out],
                   model.seed, started)
    print(f"encoded {len(codes)} items with branch {args.branch} to {out}")


def cmd_eval(args) -> None:
    started = time.time()
    paths = [_need_file(p) for p in (args.query_codes, args.db_codes, args.query_data, args.db_data)]
    qc, dc = retrieval.load_codes(paths[0]), retrieval.load_codes(paths[1])
    qd, dd = dataio.load_features(paths[2]), dataio.load_features(paths[3])
    if qc.n != qd.n or dc.n != dd.n:
        raise CLIError("invalid_argument", "code and label counts differ")
    if args.k < 1:
        raise CLIError("invalid_argument", "k must be >= 1")
    rel = retrieval.label_relevance(qd.labels, dd.labels)
    ranked = retrieval.search(qc, dc, dc.n if args.pr else args.k)
    result = retrieval.map_at_k(ranked, rel, args.k)
    out = Path(args.out)
    atomic_write_text(out, result.to_json() + "\n")
    outputs = [out]
    if args.pr:
        retrieval.write_pr_csv(retrieval.pr_curve(ranked, rel), args.pr)
        outputs.append(Path(args.pr))
    write_manifest(out, "eval", args, {"k": args.k}, paths, outputs, None, started,
                   map=result.map_at_k)
    print(f"mAP@{args.k} = {result.map_at_k:.6f} over {int(np.sum(~np.isnan(result.per_query_ap)))} queries")


def cmd_ablate(args) -> None:
    started = time.time()
    if args.grid is not None:
        cells = ablation.parse_grid(_need_file(args.grid).read_text())
    else:
        cells = ablation.PRESETS[args.preset]
    paths = [_need_file(p) for p in (args.train, args.query, args.database, args.centers)]
    tr, qu, db = (dataio.load_features(p) for p in paths[:3])
    cb = codebook.load_codebook(paths[3])
    base = _load_train_config(args.config, tr.feature_dim, cb.q, args.seed)
    seeds = [base.seed + i for i in range(args.repeats)]
    results = ablation.run_grid(cells, base, tr, qu, db, cb, k=args.k, seeds=seeds, jobs=args.jobs)
    out = Path(args.out)
    atomic_write_text(out, ablation.results_csv(results))
    failed = sum(r.maps is None for r in results)
    write_manifest(out, "ablate", args, {"cells": cells, "base": trainer.config_to_text(base)},
                   paths, [out], base.seed, started, failed_runs=failed)
    print(f"ran {len(cells)} cells x {len(seeds)} seeds ({failed} failed); results in {out}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlhash", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-centers", help="generate a hash-center codebook")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("literal", "gv"), default="literal")
    p.add_argument("--max-attempts", type=int, default=8)
    p.set_defaults(func=cmd_gen_centers)

    p = sub.add_parser("synth", help="synthesize a Gaussian-cluster feature file")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--spread", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--multi-label", type=float, default=0.0,
                   help="fraction of samples given a second label")
    p.add_argument("--n-query", type=int, help="also write .train/.query/.database splits")
    p.add_argument("--n-train", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--centers", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch loss breakdown as JSON lines")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="binary codes for a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--branch", choices=("c", "p"), default="c")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="mAP@k and precision-recall")
    p.add_argument("--query-codes", required=True)
    p.add_argument("--db-codes", required=True)
    p.add_argument("--query-data", required=True, help="feature file holding query labels")
    p.add_argument("--db-data", required=True, help="feature file holding database labels")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--pr", help="write the precision-recall curve CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    grid = p.add_mutually_exclusive_group(required=True)
    grid.add_argument("--grid", help="file of 'key = v1, v2' lines (cartesian product)")
    grid.add_argument("--preset", choices=sorted(ablation.PRESETS))
    p.add_argument("--train", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--centers", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CLIError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"error: bad_format: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__.lower()}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
