"""Command-line entry point: gen-data | train | eval | verify-theorem | sweep."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .core import SampleValidationError
from .metrics import Prediction, evaluate, evaluate_predictions, save_predictions
from .oracle import (
    DiscreteJoint,
    equal_conditional_joint,
    random_uniform_marginal_joint,
    verify_theorem1,
)
from .toydata import (
    DatasetFormatError,
    generate_toy_dataset,
    load_dataset,
    split_dataset,
    toy_spec_from_dict,
)
from .trainer import (
    FRAMEWORK_VERSION,
    TrainConfig,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError,
                      DatasetFormatError, SampleValidationError)


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _write_manifest(out_dir: Path, command: str, config: dict, seed,
                    inputs: dict, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "framework_version": FRAMEWORK_VERSION,
        "device": os.environ.get("DGDET_DEVICE", "default"),
        "inputs": {k: {"given": str(v), "absolute": str(Path(v).resolve())}
                   for k, v in inputs.items()},
        "outputs": outputs,
        "started_at": started,
        "finished_at": _utc_now(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _apply_device() -> None:
    device = os.environ.get("DGDET_DEVICE")
    if device:
        torch.set_default_device(device)


def _resolve_train_config(args) -> TrainConfig:
    """command line > config file > defaults, all through the flat key set."""
    raw = _load_json(args.config) if args.config else {}
    for key in TrainConfig.CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_dict(raw)


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--max-epochs", dest="max_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--optimizer", choices=("adamw", "sgd"))
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--momentum", type=float)
    for i in range(1, 6):
        parser.add_argument(f"--alpha{i}", dest=f"alpha{i}", type=float)
    parser.add_argument("--grl-lambda", dest="grl_lambda", type=float)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--val-fraction", dest="val_fraction", type=float)


def cmd_gen_data(args) -> int:
    started = _utc_now()
    spec = toy_spec_from_dict(_load_json(args.spec))
    out = Path(args.out)
    generate_toy_dataset(spec, out)
    outputs = ["train/annotations.json", "train/images"]
    if spec.n_target_domains:
        outputs += ["target/annotations.json", "target/images"]
    _write_manifest(out, "gen-data", dataclasses.asdict(spec),
                    spec.seed, {"spec": args.spec}, outputs, started)
    print(f"generated {spec.n_source_domains} source domain(s) "
          f"x {spec.images_per_domain} images at {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _utc_now()
    config = _resolve_train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    model, history = train(config, dataset, out_dir=out)
    best = history.records[history.best_epoch - 1]
    _write_manifest(out, "train", config.to_dict(), config.seed,
                    {"data": args.data, **({"config": args.config} if args.config else {})},
                    ["checkpoints/best.ckpt", "history.csv", "train.log"], started)
    print(f"trained {len(history.records)} epoch(s); "
          f"best epoch {history.best_epoch} (val mAP {best.val_metric:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _utc_now()
    model, meta = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if meta["n_classes"] != dataset.n_classes:
        raise ValueError(f"checkpoint has {meta['n_classes']} classes, "
                         f"dataset has {dataset.n_classes}")
    if tuple(meta["image_size"]) != tuple(dataset.schema):
        raise ValueError(f"checkpoint image size {meta['image_size']} does not match "
                         f"dataset {dataset.schema}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    predictions = []
    for sample in dataset.samples():
        det = model.detector.detect(sample.image)
        for box, label, score in zip(det.boxes, det.labels, det.scores):
            predictions.append(Prediction(sample.id, int(label), float(score), box))
    report = evaluate_predictions(predictions, dataset, iou_threshold=args.iou)

    save_predictions(predictions, out / "predictions.json")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    with open(out / "report.txt", "w", encoding="utf-8") as f:
        f.write(report.table() + "\n")
    _write_manifest(out, "eval", {"iou_threshold": args.iou}, None,
                    {"checkpoint": args.checkpoint, "data": args.data},
                    ["report.json", "report.txt", "predictions.json"], started)
    print(report.table())
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    started = _utc_now()
    rng = np.random.default_rng(args.seed)
    identity_names = ("neg-cond-entropy identity", "gain-as-mean-KL", "mean-KL-as-JS")
    max_residuals = {name: 0.0 for name in identity_names}
    all_passed = True

    for _ in range(args.trials):
        joint = random_uniform_marginal_joint(args.classes, args.cells, rng)
        report = verify_theorem1(joint, tolerance=args.tolerance)
        all_passed &= report.passed
        for check in report.checks:
            if check.name in max_residuals:
                max_residuals[check.name] = max(max_residuals[check.name], check.residual)

    lines = []
    for name in identity_names:
        ok = max_residuals[name] <= args.tolerance
        all_passed &= ok
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: "
                     f"max residual {max_residuals[name]:.3e} over {args.trials} joints")

    equal = verify_theorem1(equal_conditional_joint(args.classes, args.cells, rng),
                            tolerance=args.tolerance)
    all_passed &= equal.passed
    lines.extend(f"{line} [equal-conditional case]" for line in equal.lines()[3:])

    perturbed = _perturbed_joint(args.classes, args.cells, rng, epsilon=1e-3)
    perturb = verify_theorem1(perturbed, tolerance=args.tolerance)
    all_passed &= perturb.passed
    lines.extend(f"{line} [perturbed case]" for line in perturb.lines()[3:])

    lines.append(f"OVERALL: {'PASS' if all_passed else 'FAIL'}")
    print("\n".join(lines))

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "theorem_report.json", "w", encoding="utf-8") as f:
            json.dump({"passed": all_passed, "max_residuals": max_residuals,
                       "trials": args.trials, "classes": args.classes,
                       "cells": args.cells, "tolerance": args.tolerance}, f, indent=2)
        _write_manifest(out, "verify-theorem",
                        {"trials": args.trials, "classes": args.classes,
                         "cells": args.cells, "tolerance": args.tolerance},
                        args.seed, {}, ["theorem_report.json"], started)
    return EXIT_OK if all_passed else EXIT_VALIDATION


def _perturbed_joint(n_classes: int, n_cells: int, rng: np.random.Generator,
                     epsilon: float) -> DiscreteJoint:
    """Equal conditionals nudged apart by +-epsilon, keeping a uniform marginal."""
    base = equal_conditional_joint(n_classes, n_cells, rng).conditionals()
    bump = np.zeros_like(base)
    bump[:, 0] = epsilon * (np.arange(n_classes) - (n_classes - 1) / 2)
    bump[:, 1] = -bump[:, 0]
    conds = np.clip(base + bump, 1e-9, None)
    conds /= conds.sum(axis=1, keepdims=True)
    return DiscreteJoint(conds / n_classes)


def cmd_sweep(args) -> int:
    started = _utc_now()
    base_config = _resolve_train_config(args)
    grid = _load_json(args.grid)
    tuples = grid.get("alphas", [])
    if not tuples:
        raise ValueError("sweep grid is empty; provide 'alphas': [[a1..a5], ...]")
    for t in tuples:
        if len(t) != 5:
            raise ValueError(f"grid entry {t} must have 5 weights")
    seeds = [int(s) for s in grid.get("seeds", [base_config.seed])]

    dataset = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for alphas in tuples:
        maps, wmaps = [], []
        for seed in seeds:
            raw = base_config.to_dict()
            raw.update({f"alpha{i+1}": float(alphas[i]) for i in range(5)})
            raw["seed"] = seed
            config = TrainConfig.from_dict(raw)
            model, _ = train(config, dataset)
            target = eval_ds if eval_ds is not None else split_dataset(
                dataset, config.val_fraction, config.seed)[1]
            report = evaluate(model.detector, target)
            maps.append(report.mean_map)
            wmaps.append(report.wmap)
        rows.append({
            "alphas": tuple(float(a) for a in alphas),
            "map_mean": float(np.mean(maps)),
            "map_spread": float(np.std(maps)) if len(maps) > 1 else 0.0,
            "wmap_mean": float(np.mean(wmaps)),
            "wmap_spread": float(np.std(wmaps)) if len(wmaps) > 1 else 0.0,
        })
        print(f"alphas={rows[-1]['alphas']}: mAP={rows[-1]['map_mean']:.4f} "
              f"WmAP={rows[-1]['wmap_mean']:.4f}")

    rows.sort(key=lambda r: (-r["wmap_mean"], r["alphas"]))
    header = ["alpha1", "alpha2", "alpha3", "alpha4", "alpha5",
              "map_mean", "map_spread", "wmap_mean", "wmap_spread"]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in rows:
            writer.writerow([*r["alphas"], r["map_mean"], r["map_spread"],
                             r["wmap_mean"], r["wmap_spread"]])
    _write_manifest(out, "sweep", {"config": base_config.to_dict(), "grid": grid},
                    seeds, {"grid": args.grid, "data": args.data,
                            **({"eval_data": args.eval_data} if args.eval_data else {})},
                    ["sweep.csv"], started)
    print(f"best: alphas={rows[0]['alphas']} WmAP={rows[0]['wmap_mean']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgdet",
        description="Domain-generalised object detection: data, training, "
                    "evaluation, theorem verification, weight sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic multi-domain benchmark")
    p.add_argument("--spec", required=True, help="ToySpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the alternating training schedule")
    _add_train_config_flags(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theorem", help="verify the entropy/JS identity chain")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--cells", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional report/manifest directory")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("sweep", help="train/evaluate a grid of loss-weight tuples")
    _add_train_config_flags(p)
    p.add_argument("--grid", required=True, help="JSON grid: {'alphas': [[a1..a5],...], 'seeds': [..]}")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data",
                   help="dataset for ranking (default: held-out validation split)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_device()
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
