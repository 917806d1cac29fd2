"""
Synthetic WSN recordings in the raw CSV shape.

Nodes share a smooth environmental trend (diurnal cycle plus a slow random walk),
humidity moves against temperature, voltage drifts slowly downward. Each node adds a
spatially smooth offset and its own noise; report times are jittered and some
reports are dropped, so the output exercises alignment the same way field data does.
"""
from typing import Sequence, Tuple

import numpy as np
import pandas as pd

DEFAULT_MODALITIES = ("temperature", "humidity", "voltage")


def _smooth_walk(rng: np.random.Generator, steps: int, scale: float, span: int) -> np.ndarray:
    walk = np.cumsum(rng.normal(0.0, scale, steps))
    kernel = np.ones(span) / span
    padded = np.pad(walk, (span // 2, span - 1 - span // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def generate_records(
    num_nodes: int = 8,
    num_steps: int = 4096,
    interval: float = 30.0,
    modalities: Sequence[str] = DEFAULT_MODALITIES,
    seed: int = 0,
    noise: float = 0.05,
    jitter: float = 0.3,
    drop_rate: float = 0.02,
    area: float = 30.0,
    t0: float = 1_078_000_000.0,
) -> Tuple[pd.DataFrame, np.ndarray]:
    """
    Returns (records, positions). records has columns timestamp, node_id, <modalities>;
    positions is num_nodes x 2.
    """
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, area, size=(num_nodes, 2))

    base_t = t0 + interval * np.arange(num_steps)
    diurnal = np.sin(2 * np.pi * (base_t - t0) / 86_400.0)
    weather = _smooth_walk(rng, num_steps, scale=0.15, span=9)
    trend = 3.0 * diurnal + weather

    # spatially smooth offsets: a linear field over the deployment area
    gradient = rng.normal(0.0, 0.05, size=2)
    offsets = positions @ gradient

    frames = []
    for node in range(num_nodes):
        local = trend + offsets[node] + _smooth_walk(rng, num_steps, scale=0.02, span=5)
        signals = {
            "temperature": 20.0 + local,
            "humidity": 45.0 - 2.0 * local,
            "voltage": 2.7 - 2e-6 * (base_t - t0) + 0.05 * local,
            "light": np.clip(200.0 + 150.0 * diurnal + 10.0 * local, 0.0, None),
        }
        values = {}
        for m in modalities:
            signal = signals.get(m)
            if signal is None:
                signal = rng.normal(0.0, 1.0) + local
            values[m] = signal + rng.normal(0.0, noise * max(np.std(signal), 1e-3), num_steps)

        stamps = base_t + rng.uniform(-jitter, jitter, num_steps) * interval
        keep = rng.random(num_steps) >= drop_rate
        # never drop the first or last report, so every node spans the whole recording
        keep[[0, -1]] = True
        frame = pd.DataFrame({"timestamp": stamps[keep], "node_id": node, **{m: v[keep] for m, v in values.items()}})
        frames.append(frame)

    records = pd.concat(frames, ignore_index=True).sort_values(["timestamp", "node_id"], kind="stable")
    return records.reset_index(drop=True), positions
