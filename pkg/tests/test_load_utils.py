import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from wsn_anomaly.data_classes import GlobalConfig, compute_config_hash
from wsn_anomaly.errors import CompatibilityError, ConfigError
from wsn_anomaly.utils.load_utils import (
    load_dataset,
    load_global_config,
    load_injection_log,
    load_manifest,
    save_dataset,
)
from wsn_anomaly.utils.utils import derive_seed

from tests.conftest import SMALL_ANOMALY, SMALL_PREPROCESS

REPO_CONFIG = Path(__file__).resolve().parents[1] / "global.yaml"


# ---------------------------------
# Global configuration
# ---------------------------------

def test_repository_config_loads():
    config = load_global_config(REPO_CONFIG, environ={})
    assert config.preprocess.window == 32
    assert config.train.omega == 0.4
    assert config.discriminator.episode_size == 2 * 5 + 32
    assert set(config.anomaly.type_mix) == {"point", "collective", "contextual", "intra_corr", "inter_corr"}


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "global.yaml"
    path.write_text("windw: 16\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="windw"):
        load_global_config(path, environ={})


def test_environment_and_overrides_win(tmp_path):
    path = tmp_path / "global.yaml"
    path.write_text("omega: 0.4\nseed: 1\n", encoding="utf-8")
    config = load_global_config(path, environ={"WSN_OMEGA": "0.8", "HOME": "/root"}, overrides={"seed": 9})
    assert config.train.omega == 0.8
    assert config.train.seed == 9


def test_invalid_widths_fail_validation():
    with pytest.raises(ValidationError):
        GlobalConfig.from_flat({"d_model": 10, "num_heads": 3})


def test_freeze_epoch_must_fall_inside_stage_two():
    with pytest.raises(ValidationError):
        GlobalConfig.from_flat({"stage2_epochs": 5, "freeze_backbone_after": 5})


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_global_config(tmp_path / "absent.yaml")


def test_config_hash_is_stable():
    a = GlobalConfig.from_flat({"seed": 3, "omega": 0.2})
    b = GlobalConfig.from_flat({"omega": 0.2, "seed": 3})
    assert compute_config_hash(a) == compute_config_hash(b)
    assert compute_config_hash(a) != compute_config_hash(GlobalConfig.from_flat({"seed": 4, "omega": 0.2}))


def test_flat_round_trip():
    config = GlobalConfig.from_flat({"window": 16, "shots": 3})
    assert GlobalConfig.from_flat(config.flat()) == config


def test_derive_seed_accepts_negative_parts():
    assert derive_seed(1, 2, -1) == derive_seed(1, 2, -1)
    assert derive_seed(1, 2, -1) != derive_seed(1, 2, 0)


# ---------------------------------
# Dataset persistence
# ---------------------------------

def test_dataset_round_trip(tmp_path, clean_split, injected_split):
    _, adjacency, positions = clean_split
    split, log = injected_split
    manifest = save_dataset(tmp_path, split, adjacency, positions, SMALL_PREPROCESS, SMALL_ANOMALY, log)

    loaded, loaded_manifest = load_dataset(tmp_path)

    assert loaded_manifest.manifest_hash == manifest.manifest_hash
    assert loaded_manifest.injected
    for name, samples in split.partitions().items():
        other = loaded.partitions()[name]
        assert len(other) == len(samples)
        np.testing.assert_array_equal(other[0].X, samples[0].X)
        np.testing.assert_array_equal(other[0].node_labels, samples[0].node_labels)
        np.testing.assert_array_equal(other[0].truth_mask, samples[0].truth_mask)
    assert [r.model_dump() for r in load_injection_log(tmp_path)] == [r.model_dump() for r in log]


def test_saving_twice_gives_the_same_manifest_hash(tmp_path, clean_split):
    split, adjacency, positions = clean_split
    a = save_dataset(tmp_path / "a", split, adjacency, positions, SMALL_PREPROCESS)
    b = save_dataset(tmp_path / "b", split, adjacency, positions, SMALL_PREPROCESS)
    assert a.manifest_hash == b.manifest_hash
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["manifest_hash"] == a.manifest_hash


def test_tampered_partition_is_detected(tmp_path, clean_split):
    split, adjacency, positions = clean_split
    save_dataset(tmp_path, split, adjacency, positions, SMALL_PREPROCESS)
    with np.load(tmp_path / "test.npz") as npz:
        arrays = {k: npz[k] for k in npz.files}
    arrays["X"][0, 0, 0, 0] += 1.0
    np.savez(tmp_path / "test.npz", **arrays)

    with pytest.raises(CompatibilityError, match="test"):
        load_dataset(tmp_path)
    loaded, _ = load_dataset(tmp_path, verify=False)
    assert len(loaded.test) == len(split.test)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)
