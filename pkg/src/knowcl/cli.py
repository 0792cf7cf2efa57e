"""Command-line entry point: ``knowcl <command> -c run.json``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import pipeline
from .config import ConfigError, DataPaths, RunConfig, load_config
from .datacube import GroundTruth, save_ground_truth
from .evaluator import render_map, save_metrics
from .splitter import load_split

log = logging.getLogger("knowcl")

SWEEP_PARAMS = ("k", "crop_size", "batch_size", "n_components")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("-c", "--config", type=Path, help="run config JSON")
    p.add_argument("--seed", type=int, help="override the stage seed")
    p.add_argument("--out-dir", type=Path, default=None, help="artifact directory (default: ./runs/<name>)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="knowcl", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic cube and ground truth")
    sub.add_parser("prepare", parents=[common], help="split pixels and fit the per-group PCA models")

    p = sub.add_parser("train", parents=[common], help="train an encoder")
    p.add_argument("--mode", choices=("supervised", "unsupervised", "semisupervised"))

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test pixels")
    p.add_argument("--mode", choices=("supervised", "unsupervised", "semisupervised"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--protocol", choices=("knn", "linear", "head", "all"))
    p.add_argument("--k", type=int)
    p.add_argument("--sweep", metavar="k=1,3,5", help="evaluate kNN over several k values")
    p.add_argument("--map", action="store_true", help="also render classification maps")

    p = sub.add_parser("map", parents=[common], help="render classification maps")
    p.add_argument("--mode", choices=("supervised", "unsupervised", "semisupervised"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--protocol", choices=("knn", "head"), default="knn")
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep", parents=[common], help="sweep one hyperparameter end to end")
    p.add_argument("param", metavar="PARAM=V1,V2,...", help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--mode", choices=("supervised", "unsupervised", "semisupervised"))
    return parser


def _parse_sweep(text: str) -> tuple[str, list[int]]:
    if "=" not in text:
        raise ConfigError(f"sweep must look like name=v1,v2,...; got {text!r}")
    name, vals = text.split("=", 1)
    name = name.strip()
    if name not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {name!r}; choose from {SWEEP_PARAMS}")
    try:
        values = [int(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep values must be integers: {vals!r}") from None
    if not values:
        raise ConfigError("empty sweep")
    return name, values


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.command == "synth" and cfg.synth is not None:
            cfg = cfg.with_overrides("synth", seed=args.seed)
        cfg = cfg.with_overrides("train", seed=args.seed).with_overrides("augment", seed=args.seed)
    if args.deterministic is not None:
        cfg = cfg.with_overrides("train", deterministic=args.deterministic)
    if getattr(args, "mode", None):
        cfg = cfg.with_overrides("train", mode=args.mode)
    if getattr(args, "k", None):
        cfg = cfg.with_overrides("eval", k=args.k)
    out = args.out_dir or Path("runs") / cfg.name
    return cfg, out


def _write_maps(cfg: RunConfig, out: Path, checkpoint, protocol: str) -> list[Path]:
    lay = pipeline.Layout(cfg, out)
    model, meta = pipeline.load_model(cfg, checkpoint or lay.checkpoint(cfg.train.mode))
    scene, split = pipeline.load_prepared(cfg, out)
    mode = meta.get("mode", cfg.train.mode)
    pooling = cfg.eval.pooling if cfg.eval.pooling != "auto" else pipeline.default_pooling(mode)
    raster = pipeline.predict_raster(model, scene, split, protocol, pooling, cfg.eval.k, cfg.eval.tau_knn)
    written = []
    for scope, tag in (("labeled_only", "labeled"), ("full_image", "full")):
        path = out / f"map_{mode}_{protocol}_{tag}.png"
        render_map(raster, scene.gt, path, scope)
        written.append(path)
    pred_path = out / f"pred_{mode}_{protocol}"
    save_ground_truth(GroundTruth(raster, scene.gt.num_classes, scene.gt.class_names), pred_path)
    written.append(pred_path.with_suffix(".json"))
    return written


def cmd_synth(cfg, out, args):
    cube, gt = pipeline.stage_synth(cfg, out)
    print(f"wrote {cube}.json/.raw and {gt}.json/.raw")


def cmd_prepare(cfg, out, args):
    split, _, _ = pipeline.stage_prepare(cfg, out)
    load_split(pipeline.Layout(cfg, out).split).check()
    print(f"train {len(split.train)} / test {len(split.test)} pixels -> {out / 'split.txt'}")


def cmd_train(cfg, out, args):
    result = pipeline.stage_train(cfg, out)
    lay = pipeline.Layout(cfg, out)
    print(f"final loss {result.report.final_loss:.6f}; wrote {lay.checkpoint(cfg.train.mode)}")


def cmd_eval(cfg, out, args):
    lay = pipeline.Layout(cfg, out)
    mode = cfg.train.mode
    if args.sweep:
        name, values = _parse_sweep(args.sweep)
        if name != "k":
            raise ConfigError("eval --sweep only supports k; use the sweep command for other parameters")
        rows = []
        for k in values:
            reports, _ = pipeline.stage_eval(cfg, out, args.checkpoint, ("knn",), k=k)
            rows.append({"k": k, "oa": reports["knn"].oa, "aa": reports["knn"].aa, "kappa": reports["knn"].kappa})
        path = out / f"sweep_k_{mode}.tsv"
        _write_table(rows, path)
        print(path.read_text(), end="")
        return
    protocol = args.protocol or None
    protocols = ("knn", "linear", "head") if protocol == "all" else ((protocol,) if protocol else None)
    if protocols and "head" in protocols and mode == "unsupervised" and protocol == "all":
        protocols = ("knn", "linear")
    reports, _ = pipeline.stage_eval(cfg, out, args.checkpoint, protocols)
    save_metrics(reports, lay.metrics(mode))
    print(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True))
    if args.map:
        for path in _write_maps(cfg, out, args.checkpoint, "knn"):
            print(f"wrote {path}")


def cmd_map(cfg, out, args):
    for path in _write_maps(cfg, out, args.checkpoint, args.protocol):
        print(f"wrote {path}")


def _write_table(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_sweep(cfg, out, args):
    name, values = _parse_sweep(args.param)
    mode = cfg.train.mode
    rows = []
    if name == "k":
        for k in values:
            reports, _ = pipeline.stage_eval(cfg, out, None, ("knn",), k=k)
            rows.append({"k": k, "oa": reports["knn"].oa, "aa": reports["knn"].aa, "kappa": reports["knn"].kappa})
    else:
        for v in values:
            sub = out / f"sweep_{name}_{v}"
            if name == "crop_size":
                run = cfg.with_overrides("augment", crop_size=v)
            elif name == "batch_size":
                run = cfg.with_overrides("train", batch_size=v)
            else:
                run = cfg.with_overrides("pca", n_components=v)
            if run.data is None:
                lay = pipeline.Layout(cfg, out)
                if not Path(str(lay.cube) + ".json").exists():
                    pipeline.stage_synth(cfg, out)
                run = replace(run, data=DataPaths(str(lay.cube), str(lay.gt)))
            pipeline.stage_prepare(run, sub)
            pipeline.stage_train(run, sub)
            reports, _ = pipeline.stage_eval(run, sub, None, ("knn",))
            rows.append({name: v, "oa": reports["knn"].oa, "aa": reports["knn"].aa, "kappa": reports["knn"].kappa})
    path = out / f"sweep_{name}_{mode}.tsv"
    _write_table(rows, path)
    print(path.read_text(), end="")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("KNOWCL_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg, out = _resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"knowcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
