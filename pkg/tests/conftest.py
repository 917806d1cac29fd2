import numpy as np
import pytest
import torch

from wsn_anomaly.data_classes import AnomalySpec, BackboneConfig, GlobalConfig, PreprocessConfig
from wsn_anomaly.preprocessing import (
    align_timestamps,
    build_adjacency,
    build_samples,
    generate_records,
    inject_anomalies,
    split_dataset,
)

SMALL_PREPROCESS = PreprocessConfig(interval=30.0, downsample_step=2, window=16, adjacency_rule="knn", adjacency_k=2)
SMALL_ANOMALY = AnomalySpec(injection_rate=0.15, labeled_fraction=0.3, magnitude=4.0, rng_seed=7)


def tiny_backbone_config(**overrides) -> BackboneConfig:
    settings = dict(
        num_layers=2, num_heads=2, d_model=12, num_nodes=4, num_modalities=3, window_length=8, dtype="float64"
    )
    settings.update(overrides)
    return BackboneConfig(**settings)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def backbone_config() -> BackboneConfig:
    return tiny_backbone_config()


@pytest.fixture(scope="session")
def synthetic_frame():
    return generate_records(num_nodes=6, num_steps=640, seed=3)


@pytest.fixture(scope="session")
def clean_split(synthetic_frame):
    frame, positions = synthetic_frame
    pp = SMALL_PREPROCESS
    series = align_timestamps(frame, pp.interval, modalities=pp.modalities, num_nodes=positions.shape[0])
    adjacency = build_adjacency(positions, pp.adjacency_rule, pp.adjacency_radius, pp.adjacency_k)
    return split_dataset(build_samples(series, adjacency, pp), pp.split_ratios), adjacency, positions


@pytest.fixture(scope="session")
def injected_split(clean_split):
    split, _, _ = clean_split
    return inject_anomalies(split, SMALL_ANOMALY)


@pytest.fixture
def small_config() -> GlobalConfig:
    """Training settings sized for the synthetic fixture (6 nodes, W = 16)."""
    return GlobalConfig.from_flat(
        {
            "num_layers": 2,
            "num_heads": 2,
            "d_model": 12,
            "num_negatives": 3,
            "walk_length": 2,
            "shots": 2,
            "graph_layers": 2,
            "query_size": 8,
            "buffer_capacity": 16,
            "stage1_epochs": 2,
            "stage2_epochs": 3,
            "freeze_backbone_after": 1,
            "batch_size": 8,
            "learning_rate": 1e-3,
            "save_interval": 1,
            "seed": 5,
        }
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
