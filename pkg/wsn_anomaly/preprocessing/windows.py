"""
Windowing, normalization and chronological splitting of aligned series.
"""
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from wsn_anomaly.data_classes import AlignedSeries, AttributedGraphSample, DatasetSplit, PreprocessConfig, SampleWindow
from wsn_anomaly.errors import ConfigError, DataError, LengthError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


def downsample_windows(series: AlignedSeries, k: int, W: int, start: int = 0) -> List[SampleWindow]:
    """
    Split the raw segment [start, start + kW) into k phase-interleaved windows.
    Phase p takes grid indices start + p, start + p + k, ..., start + p + (W - 1)k.
    """
    if k < 1 or W < 1:
        raise ConfigError(f"k and W must be >= 1, got k={k}, W={W}")
    required = start + k * W
    if series.num_steps < required:
        raise LengthError(f"Series has {series.num_steps} grid points from start {start}; kW={k * W} required")

    windows = []
    for phase in range(k):
        idx = start + phase + k * np.arange(W)
        windows.append(
            SampleWindow(
                X=series.data[:, :, idx].copy(),
                origin_time=float(series.grid[start + phase]),
                phase=phase,
                times=series.grid[idx].copy(),
            )
        )
    return windows


def zscore_normalize(window: SampleWindow, eps: float = SIGMA_FLOOR) -> SampleWindow:
    """
    Standardize every (node, modality) sequence to mean 0 and population std 1.
    Constant sequences map to zeros.
    """
    X = window.X
    if X.shape[-1] < 2:
        raise LengthError(f"z-score needs W >= 2, got {X.shape[-1]}")
    bad = ~np.isfinite(X)
    if bad.any():
        node, modality, t = (int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"Non-finite value at node {node}, modality {modality}, step {t}")
    mean = X.mean(axis=-1, keepdims=True)
    std = np.maximum(X.std(axis=-1, keepdims=True), eps)
    return window.model_copy(update={"X": (X - mean) / std})


def segment_starts(num_steps: int, k: int, W: int, stride: int) -> List[int]:
    if stride < 1:
        raise ConfigError(f"segment stride must be >= 1, got {stride}")
    return list(range(0, num_steps - k * W + 1, stride))


def build_samples(series: AlignedSeries, adjacency: np.ndarray, config: PreprocessConfig) -> List[AttributedGraphSample]:
    """
    Cut the series into normalized attributed-graph samples ordered by (segment, phase).
    """
    samples = []
    for start in segment_starts(series.num_steps, config.downsample_step, config.window, config.stride):
        for window in downsample_windows(series, config.downsample_step, config.window, start):
            window = zscore_normalize(window)
            samples.append(
                AttributedGraphSample(
                    A=adjacency,
                    X=window.X,
                    times=window.times,
                    origin_time=window.origin_time,
                    phase=window.phase,
                )
            )
    logger.info("Built %d samples from %d grid steps", len(samples), series.num_steps)
    return samples


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, ...]:
    """
    Floor every share, then hand the remainder out by largest fractional part.
    """
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"Split ratios must be positive and sum to 1, got {tuple(ratios)}")
    exact = [r * n for r in ratios]
    counts = [math.floor(x + 1e-9) for x in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return tuple(counts)


def split_dataset(samples: Sequence[AttributedGraphSample], ratios: Sequence[float] = (0.7, 0.2, 0.1)) -> DatasetSplit:
    """
    Chronological train / validation / test partition.
    """
    if len(ratios) != 3:
        raise ConfigError("Exactly three split ratios are required")
    n_train, n_val, _ = split_counts(len(samples), ratios)
    samples = list(samples)
    return DatasetSplit(
        train=samples[:n_train],
        validation=samples[n_train : n_train + n_val],
        test=samples[n_train + n_val :],
        ratios=tuple(ratios),
    )
