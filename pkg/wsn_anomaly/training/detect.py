"""
Detection over a dataset partition through the recurrent backbone path, and per-node
plot data joining detections with the stored series and ground truth.
"""
import logging
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from wsn_anomaly.data_classes import AttributedGraphSample, DetectionRecord
from wsn_anomaly.errors import CompatibilityError, ConfigError, DataError
from wsn_anomaly.model.backbone import BackboneStream, backbone_forward
from wsn_anomaly.model.detector import AnomalyDetector

logger = logging.getLogger(__name__)

StreamMode = Literal["window", "continuous"]


def sample_id(partition: str, index: int) -> str:
    return f"{partition}-{index:05d}"


def _records(
    scores: torch.Tensor, labels: torch.Tensor, sid: str, threshold: float, manifest_hash: str
) -> List[DetectionRecord]:
    return [
        DetectionRecord(
            sample_id=sid,
            node_id=node,
            score=float(scores[node]),
            label=int(labels[node]),
            threshold=threshold,
            manifest_hash=manifest_hash,
        )
        for node in range(scores.shape[0])
    ]


class _PhaseStream:
    """Recurrent state carried across consecutive windows of one phase."""

    def __init__(self, stream: BackboneStream) -> None:
        self.stream = stream
        self.first_time: Optional[float] = None
        self.last_time: Optional[float] = None

    def reset(self) -> None:
        self.stream.reset()
        self.first_time = self.last_time = None


def _new_steps(sample: AttributedGraphSample, state: _PhaseStream, interval: float, window: int) -> np.ndarray:
    """
    Indices of the sample's steps that still have to be pushed. Resets the stream when
    the sample does not continue the series or the case-study window would be exceeded.
    """
    times = sample.times
    everything = np.arange(sample.window)
    if times is None or state.last_time is None:
        state.reset()
        return everything
    fresh = np.flatnonzero(times > state.last_time)
    step = float(times[1] - times[0]) if sample.window > 1 else interval
    contiguous = fresh.size > 0 and np.isclose(times[fresh[0]] - state.last_time, step)
    elapsed = (times[-1] - state.first_time) / interval + 1
    if not contiguous or elapsed > window:
        state.reset()
        return everything
    return fresh


@torch.no_grad()
def detect_dataset(
    model: AnomalyDetector,
    samples: Sequence[AttributedGraphSample],
    window: int = 300,
    stride: int = 1,
    stream_mode: StreamMode = "window",
    manifest_hash: str = "",
    partition: str = "test",
    interval: float = 30.0,
    batch_size: int = 64,
) -> List[DetectionRecord]:
    """
    One record per (sample, node) for every stride-th sample. In window mode each
    sample starts a fresh stream. In continuous mode consecutive samples of a phase
    share the recurrent state until `window` raw grid steps have been covered.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if not bool(model.discriminator.support_ready):
        raise ConfigError("model carries no support set; load a stage-2 checkpoint")
    model.eval()
    threshold = model.discriminator.config.threshold
    picked = list(range(0, len(samples), stride))
    records: List[DetectionRecord] = []

    if stream_mode == "window":
        for offset in range(0, len(picked), batch_size):
            chunk = picked[offset : offset + batch_size]
            embeddings = backbone_forward(model.backbone, [samples[i] for i in chunk], mode="stream_recurrent")
            scores, labels = model.score_embeddings(embeddings)
            for row, i in enumerate(chunk):
                records.extend(_records(scores[row], labels[row], sample_id(partition, i), threshold, manifest_hash))
    elif stream_mode == "continuous":
        streams: Dict[int, _PhaseStream] = {}
        resets = 0
        for i in picked:
            sample = samples[i]
            if sample.window < model.backbone.config.window_length:
                raise DataError(f"sample {i} is shorter than the model window {model.backbone.config.window_length}")
            if sample.phase not in streams:
                A = torch.as_tensor(sample.A, dtype=model.dtype)[None]
                streams[sample.phase] = _PhaseStream(model.backbone.stream(A))
            state = streams[sample.phase]
            steps = _new_steps(sample, state, interval, window)
            if steps.size == sample.window:
                resets += 1
            X = torch.as_tensor(sample.X, dtype=model.dtype)[None]
            for t in steps:
                state.stream.push(X[..., t])
            if sample.times is not None:
                if state.first_time is None:
                    state.first_time = float(sample.times[0])
                state.last_time = float(sample.times[-1])
            scores, labels = model.score_embeddings(state.stream.embedding())
            records.extend(_records(scores[0], labels[0], sample_id(partition, i), threshold, manifest_hash))
        logger.debug("Continuous detection reset its streams %d times over %d samples", resets, len(picked))
    else:
        raise ConfigError(f"unknown stream mode '{stream_mode}'")

    logger.info("Scored %d samples (%d node records) from %s", len(picked), len(records), partition)
    return records


def plot_data_frame(
    detections: Sequence[DetectionRecord],
    samples: Sequence[AttributedGraphSample],
    node: int,
    modalities: Sequence[str],
    manifest_hash: str,
    partition: str = "test",
) -> pd.DataFrame:
    """
    Per-timestep series of one node: time, one column per modality, truth_label from
    the injected-cell mask and predicted_label from the windows flagged for the node.
    Overlapping windows are merged by timestamp.
    """
    foreign = {d.manifest_hash for d in detections if d.manifest_hash != manifest_hash}
    if foreign:
        found = sorted(foreign)[0]
        raise CompatibilityError(
            "detections were produced from a different dataset",
            {"manifest_hash": (manifest_hash, found)},
        )
    columns = ["time", *modalities, "truth_label", "predicted_label"]
    if not samples:
        return pd.DataFrame(columns=columns)
    if not 0 <= node < samples[0].num_nodes:
        raise DataError(f"node {node} outside [0, {samples[0].num_nodes})")

    flagged = {d.sample_id: d.label for d in detections if d.node_id == node}
    frames = []
    for i, sample in enumerate(samples):
        sid = sample_id(partition, i)
        if sid not in flagged:
            continue
        times = sample.times if sample.times is not None else sample.origin_time + np.arange(sample.window)
        truth = sample.truth_mask[node] if sample.truth_mask is not None else np.zeros(sample.window, dtype=bool)
        frame = pd.DataFrame({"time": times})
        for m, name in enumerate(modalities):
            frame[name] = sample.X[node, m]
        frame["truth_label"] = truth.astype(int)
        frame["predicted_label"] = int(flagged[sid])
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=columns)
    merged = pd.concat(frames, ignore_index=True)
    merged = merged.groupby("time", sort=True).agg(
        {**{name: "first" for name in modalities}, "truth_label": "max", "predicted_label": "max"}
    )
    return merged.reset_index()[columns]
