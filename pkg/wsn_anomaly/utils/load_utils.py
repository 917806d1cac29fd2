import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import yaml

from wsn_anomaly.data_classes import (
    AnomalySpec,
    AttributedGraphSample,
    DatasetManifest,
    DatasetSplit,
    GlobalConfig,
    InjectionRecord,
    PreprocessConfig,
)
from wsn_anomaly.errors import CompatibilityError, ConfigError
from wsn_anomaly.utils.utils import array_hash, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

ENV_PREFIX = "WSN_"
PARTITIONS = ("train", "validation", "test")


def load_global_config(
    path: Path = Path("global.yaml"),
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> GlobalConfig:
    """
    Load and validate global configuration from a flat YAML file.
    WSN_<KEY> environment variables and explicit overrides win over the file.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Global config file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        config_dict = yaml.safe_load(f) or {}
    if not isinstance(config_dict, dict):
        raise ConfigError(f"Config file {path} must contain a flat mapping")

    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            config_dict[key] = yaml.safe_load(raw)
            logger.debug("Config key '%s' overridden from environment", key)

    config_dict.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return GlobalConfig.from_flat(config_dict)


# ---------------------------------
# Dataset persistence
# ---------------------------------

def _stack_partition(samples: List[AttributedGraphSample]) -> Dict[str, np.ndarray]:
    if not samples:
        return {
            "X": np.zeros((0, 0, 0, 0)),
            "times": np.zeros((0, 0)),
            "origin_time": np.zeros(0),
            "phase": np.zeros(0, dtype=np.int64),
            "labels": np.zeros((0, 0), dtype=np.int64),
            "truth": np.zeros((0, 0), dtype=np.int64),
            "truth_mask": np.zeros((0, 0, 0), dtype=bool),
        }
    n, _, w = samples[0].X.shape

    def or_default(value, shape, fill, dtype):
        return np.asarray(value, dtype=dtype) if value is not None else np.full(shape, fill, dtype=dtype)

    return {
        "X": np.stack([s.X for s in samples]).astype(np.float64),
        "times": np.stack([or_default(s.times, (w,), np.nan, np.float64) for s in samples]),
        "origin_time": np.array([s.origin_time for s in samples], dtype=np.float64),
        "phase": np.array([s.phase for s in samples], dtype=np.int64),
        "labels": np.stack([or_default(s.node_labels, (n,), -1, np.int64) for s in samples]),
        "truth": np.stack([or_default(s.truth, (n,), -1, np.int64) for s in samples]),
        "truth_mask": np.stack([or_default(s.truth_mask, (n, w), False, bool) for s in samples]),
    }


def partition_hash(samples: List[AttributedGraphSample]) -> str:
    arrays = _stack_partition(samples)
    return array_hash(*(arrays[k] for k in sorted(arrays)))


def save_dataset(
    out_dir: Path,
    split: DatasetSplit,
    adjacency: np.ndarray,
    positions: np.ndarray,
    preprocess: PreprocessConfig,
    anomaly_spec: Optional[AnomalySpec] = None,
    injection_log: Optional[List[InjectionRecord]] = None,
) -> DatasetManifest:
    """
    Persist a dataset split as one .npz per partition plus manifest.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    counts, hashes = {}, {}
    for name, samples in split.partitions().items():
        arrays = _stack_partition(samples)
        np.savez(out_dir / f"{name}.npz", **arrays)
        counts[name] = len(samples)
        hashes[name] = array_hash(*(arrays[k] for k in sorted(arrays)))

    adjacency = np.asarray(adjacency, dtype=np.int8)
    np.save(out_dir / "adjacency.npy", adjacency)
    np.save(out_dir / "positions.npy", np.asarray(positions, dtype=np.float64))

    log_path = out_dir / "injection_log.jsonl"
    if injection_log is not None:
        write_jsonl(log_path, [r.model_dump(mode="json") for r in injection_log])

    first = next((s for part in split.partitions().values() for s in part), None)
    manifest = DatasetManifest(
        modalities=list(preprocess.modalities),
        num_nodes=int(adjacency.shape[0]),
        num_modalities=len(preprocess.modalities),
        window=first.window if first is not None else preprocess.window,
        downsample_step=preprocess.downsample_step,
        interval=preprocess.interval,
        counts=counts,
        content_hashes=hashes,
        adjacency_hash=array_hash(adjacency),
        injected=anomaly_spec is not None,
        anomaly_spec=anomaly_spec,
        preprocess=preprocess,
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True),
        encoding="utf-8",
    )
    logger.info("Saved dataset to %s (counts=%s, manifest_hash=%s)", out_dir, counts, manifest.manifest_hash[:12])
    return manifest


def load_manifest(data_dir: Path) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    raw.pop("manifest_hash", None)
    return DatasetManifest.model_validate(raw)


def load_dataset(data_dir: Path, verify: bool = True) -> Tuple[DatasetSplit, DatasetManifest]:
    """
    Load a persisted dataset and, optionally, check its arrays against the manifest hashes.
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    adjacency = np.load(data_dir / "adjacency.npy")

    if verify and array_hash(adjacency) != manifest.adjacency_hash:
        raise CompatibilityError(f"Adjacency in {data_dir} does not match its manifest")

    partitions: Dict[str, List[AttributedGraphSample]] = {}
    for name in PARTITIONS:
        path = data_dir / f"{name}.npz"
        if not path.is_file():
            raise FileNotFoundError(f"Partition file not found: {path}")
        with np.load(path) as npz:
            arrays = {key: npz[key] for key in npz.files}
        if verify and array_hash(*(arrays[k] for k in sorted(arrays))) != manifest.content_hashes.get(name):
            raise CompatibilityError(f"Partition '{name}' in {data_dir} does not match its manifest")
        partitions[name] = [
            AttributedGraphSample(
                A=adjacency,
                X=arrays["X"][i],
                node_labels=arrays["labels"][i],
                truth=arrays["truth"][i],
                truth_mask=arrays["truth_mask"][i],
                times=arrays["times"][i],
                origin_time=float(arrays["origin_time"][i]),
                phase=int(arrays["phase"][i]),
            )
            for i in range(arrays["X"].shape[0])
        ]

    split = DatasetSplit(**partitions, ratios=manifest.preprocess.split_ratios)
    return split, manifest


def load_positions(data_dir: Path) -> np.ndarray:
    return np.load(Path(data_dir) / "positions.npy")


def load_injection_log(data_dir: Path) -> List[InjectionRecord]:
    path = Path(data_dir) / "injection_log.jsonl"
    return [InjectionRecord.model_validate(r) for r in read_jsonl(path)]
