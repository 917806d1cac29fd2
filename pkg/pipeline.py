#!/usr/bin/env python3
"""
Pipeline script: preprocessing, anomaly injection, two-stage training, detection,
evaluation and profiling, one subcommand per stage.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from wsn_anomaly.data_classes import DetectionRecord, GlobalConfig
from wsn_anomaly.errors import CompatibilityError, DataError, WsnAnomalyError
from wsn_anomaly.preprocessing import (
    IBRL_COLUMN_MAP,
    align_timestamps,
    build_adjacency,
    build_samples,
    generate_records,
    inject_anomalies,
    read_records_csv,
    split_dataset,
)
from wsn_anomaly.utils.load_utils import (
    load_dataset,
    load_global_config,
    load_positions,
    save_dataset,
)
from wsn_anomaly.utils.utils import read_jsonl, write_jsonl

logger = logging.getLogger("pipeline")

COMMANDS = ("preprocess", "inject", "pretrain", "train", "detect", "eval", "sweep", "flops", "plotdata")


def read_positions(path: Path) -> np.ndarray:
    """Node coordinates from 'x y' or 'id x y' rows (whitespace or comma separated)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Positions file not found: {path}")
    try:
        table = pd.read_csv(path, sep=r"[\s,]+", engine="python", header=None, comment="#").to_numpy(dtype=np.float64)
    except (pd.errors.ParserError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if table.ndim != 2 or table.shape[1] not in (2, 3):
        raise DataError(f"{path}: expected 2 or 3 columns per node, got shape {table.shape}")
    return table[:, -2:]


def _partition_for_sizing(split):
    return next((part for part in (split.train, split.validation, split.test) if part), None)


# ---------------------------------
# Commands
# ---------------------------------

def cmd_preprocess(args, config: GlobalConfig) -> int:
    pp = config.preprocess
    if args.synthetic:
        frame, positions = generate_records(
            num_nodes=args.nodes, num_steps=args.steps, interval=pp.interval, modalities=pp.modalities, seed=config.train.seed
        )
    else:
        if args.input is None or args.positions is None:
            raise DataError("preprocess needs --input and --positions unless --synthetic is given")
        column_map = IBRL_COLUMN_MAP if args.ibrl else None
        frame = read_records_csv(args.input, pp.modalities, column_map, pp.exclude_nodes)
        positions = read_positions(args.positions)
        if pp.exclude_nodes:
            keep = [i for i in range(positions.shape[0]) if i not in set(pp.exclude_nodes)]
            positions = positions[keep]

    series = align_timestamps(frame, pp.interval, modalities=pp.modalities, num_nodes=positions.shape[0])
    adjacency = build_adjacency(positions, pp.adjacency_rule, pp.adjacency_radius, pp.adjacency_k)
    split = split_dataset(build_samples(series, adjacency, pp), pp.split_ratios)
    manifest = save_dataset(args.out, split, adjacency, positions, pp)
    print(json.dumps({"counts": manifest.counts, "manifest_hash": manifest.manifest_hash}, sort_keys=True))
    return 0


def cmd_inject(args, config: GlobalConfig) -> int:
    split, manifest = load_dataset(args.input)
    if manifest.injected:
        raise DataError(f"{args.input} already carries injected anomalies")
    injected, log = inject_anomalies(split, config.anomaly)
    adjacency = np.load(Path(args.input) / "adjacency.npy")
    out = save_dataset(args.out, injected, adjacency, load_positions(args.input), manifest.preprocess, config.anomaly, log)
    print(json.dumps({"injected": len(log), "manifest_hash": out.manifest_hash}, sort_keys=True))
    return 0


def cmd_pretrain(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.trainer import run_stage1

    split, manifest = load_dataset(args.input)
    result = run_stage1(config, split, args.out, manifest.manifest_hash)
    logger.info("Best backbone: %s", result.best_path)
    return 0


def cmd_train(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.trainer import run_stage2

    split, manifest = load_dataset(args.input)
    result = run_stage2(config, split, args.out, args.backbone, manifest.manifest_hash)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def cmd_detect(args, config: GlobalConfig) -> int:
    from wsn_anomaly.model.checkpoint import restore_detector
    from wsn_anomaly.training.detect import detect_dataset
    from wsn_anomaly.training.trainer import bind_backbone_config

    split, manifest = load_dataset(args.input)
    samples = split.partitions()[args.partition]
    sizing = _partition_for_sizing(split)
    expected = bind_backbone_config(config.backbone, sizing) if sizing else None
    model = restore_detector(args.model, expected, config.discriminator)
    records = detect_dataset(
        model,
        samples,
        window=args.window,
        stride=args.stride,
        stream_mode=args.stream_mode,
        manifest_hash=manifest.manifest_hash,
        partition=args.partition,
        interval=manifest.interval,
    )
    write_jsonl(Path(args.out), [r.model_dump(mode="json") for r in records])
    logger.info("Wrote %d detection records to %s", len(records), args.out)
    return 0


def _load_detections(path: Path):
    return [DetectionRecord.model_validate(r) for r in read_jsonl(Path(path))]


def cmd_eval(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.metrics import evaluate, majority_baseline

    split, manifest = load_dataset(args.input)
    detections = _load_detections(args.detections)
    _check_manifest(detections, manifest.manifest_hash)
    partitions = split.partitions()
    predictions, truth = [], []
    for record in detections:
        partition, index = record.sample_id.rsplit("-", 1)
        sample = partitions[partition][int(index)]
        if sample.truth is None or sample.truth[record.node_id] < 0:
            continue
        predictions.append(record.label)
        truth.append(int(sample.truth[record.node_id]))
    report = {"model": evaluate(predictions, truth).model_dump(), "majority_baseline": majority_baseline(truth).model_dump()}
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return 0


def cmd_sweep(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.trainer import omega_sweep

    split, manifest = load_dataset(args.input)
    rows = omega_sweep(config, split, args.out, args.omegas, args.seeds, args.backbone, manifest.manifest_hash)
    for row in rows:
        print(f"omega={row['omega']:.2f}  F1={row['f1_mean']:.4f} +- {row['f1_std']:.4f}")
    return 0


def cmd_flops(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.flops import count_flops, measure_step_latency

    ledger = count_flops(
        config.backbone,
        args.mode,
        W=args.window,
        position=args.position,
        discriminator=config.discriminator if args.with_discriminator else None,
    )
    report = {"mode": ledger.mode, "total_mflops": ledger.total_mflops, "breakdown": ledger.breakdown}
    if args.latency:
        from wsn_anomaly.model.backbone import Backbone

        latency = measure_step_latency(Backbone(config.backbone), seed=config.train.seed)
        report["step_latency_seconds"] = {str(k): v for k, v in latency.items()}
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _check_manifest(detections, manifest_hash: str) -> None:
    found = sorted({d.manifest_hash for d in detections} - {manifest_hash})
    if found:
        raise CompatibilityError(
            "detections and dataset have different manifest hashes", {"manifest_hash": (manifest_hash, found[0])}
        )


def cmd_plotdata(args, config: GlobalConfig) -> int:
    from wsn_anomaly.training.detect import plot_data_frame

    split, manifest = load_dataset(args.raw)
    detections = _load_detections(args.detections)
    frame = plot_data_frame(
        detections,
        split.partitions()[args.partition],
        args.node,
        manifest.modalities,
        manifest.manifest_hash,
        args.partition,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False)
    logger.info("Wrote %d rows for node %d to %s", len(frame), args.node, args.out)
    return 0


# ---------------------------------
# Argument parsing
# ---------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=Path("global.yaml"), help="Flat YAML configuration file")
    common.add_argument("--seed", type=int, default=None, help="Override the seed of the command (the injection seed for inject)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(description="Anomaly detection pipeline for multi-modal sensor networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="Align, window, normalize and split raw records")
    p.add_argument("--input", type=Path, help="Raw records CSV")
    p.add_argument("--positions", type=Path, help="Node coordinates ('x y' or 'id x y' per line)")
    p.add_argument("--ibrl", action="store_true", help="Input uses the IBRL column layout")
    p.add_argument("--synthetic", action="store_true", help="Generate a synthetic network instead of reading --input")
    p.add_argument("--nodes", type=int, default=8, help="Synthetic node count")
    p.add_argument("--steps", type=int, default=4096, help="Synthetic reports per node")
    p.add_argument("--interval", type=float, help="Alignment interval in seconds")
    p.add_argument("--k", type=int, help="Downsampling step")
    p.add_argument("--window", type=int, help="Window length W")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("inject", parents=[common], help="Inject labeled anomalies into a preprocessed dataset")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pretrain", parents=[common], help="Stage 1: contrastive pretraining of the backbone")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="Stage 2: joint training with the discriminator")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--backbone", type=Path, help="Stage-1 backbone checkpoint")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("detect", parents=[common], help="Score a partition through the recurrent path")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--partition", default="test", choices=["train", "validation", "test"])
    p.add_argument("--window", type=int, default=300, help="Case-study window in grid steps")
    p.add_argument("--stride", type=int, default=1, help="Score every n-th sample")
    p.add_argument("--stream-mode", default="window", choices=["window", "continuous"])

    p = sub.add_parser("eval", parents=[common], help="Precision, recall and F1 of a detection file")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep", parents=[common], help="Stage 2 over a grid of omega values and seeds")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--backbone", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--omegas", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.5, 0.6, 0.8])
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])

    p = sub.add_parser("flops", parents=[common], help="Analytic forward FLOPs of the configured model")
    p.add_argument("--mode", default="parallel", choices=["parallel", "recurrent"])
    p.add_argument("--window", type=int)
    p.add_argument("--position", type=int, default=0)
    p.add_argument("--with-discriminator", action="store_true")
    p.add_argument("--latency", action="store_true", help="Also time recurrent steps")

    p = sub.add_parser("plotdata", parents=[common], help="Per-timestep series of one node with truth and predictions")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--raw", type=Path, required=True, help="Dataset directory the detections were made on")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--partition", default="test", choices=["train", "validation", "test"])
    p.add_argument("--out", type=Path, required=True)
    return parser


def config_overrides(args) -> dict:
    overrides = {"seed": args.seed}
    if args.command == "inject":
        overrides["rng_seed"] = args.seed
    if args.command == "preprocess":
        overrides.update({"interval": args.interval, "downsample_step": args.k, "window": args.window})
    return overrides


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)-8s [%(name)s] %(message)s")

    handlers = {name: globals()[f"cmd_{name}"] for name in COMMANDS}
    try:
        config = load_global_config(args.config, overrides=config_overrides(args))
        return handlers[args.command](args, config)
    except WsnAnomalyError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except (ValidationError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
