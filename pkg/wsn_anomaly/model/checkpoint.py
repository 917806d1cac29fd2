"""
Versioned model checkpoints: config echo, named parameters, dtype and a content hash.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import torch
from torch import nn

from wsn_anomaly.data_classes import BackboneConfig, DiscriminatorConfig, canonical_hash
from wsn_anomaly.errors import CompatibilityError
from wsn_anomaly.utils.utils import tensor_hash

from .backbone import Backbone
from .detector import AnomalyDetector

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
Kind = Literal["backbone", "detector"]


def state_hash(state_dict: Dict[str, torch.Tensor]) -> str:
    keys = sorted(state_dict)
    return canonical_hash({"keys": keys, "tensors": tensor_hash(state_dict[k] for k in keys)})


def content_hash(config: Dict[str, Any], state_dict: Dict[str, torch.Tensor]) -> str:
    return canonical_hash({"config": config, "state": state_hash(state_dict)})


def config_echo(backbone: BackboneConfig, discriminator: Optional[DiscriminatorConfig] = None) -> Dict[str, Any]:
    echo = {"backbone": backbone.model_dump(mode="json")}
    if discriminator is not None:
        echo["discriminator"] = discriminator.model_dump(mode="json")
    return echo


def save_checkpoint(
    path: Path, model: nn.Module, kind: Kind, config: Dict[str, Any], metadata: Optional[Dict[str, Any]] = None
) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    digest = content_hash(config, state)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": config,
            "state_dict": state,
            "dtype": str(next(iter(state.values())).dtype).replace("torch.", ""),
            "content_hash": digest,
            "metadata": metadata or {},
        },
        path,
    )
    logger.debug("Saved %s checkpoint %s (%s)", kind, path, digest[:12])
    return digest


def _diff(expected: Dict[str, Any], found: Dict[str, Any], prefix: str = "") -> Dict[str, tuple]:
    out = {}
    for key in sorted(set(expected) | set(found)):
        exp, got = expected.get(key), found.get(key)
        name = f"{prefix}{key}"
        if isinstance(exp, dict) and isinstance(got, dict):
            out.update(_diff(exp, got, name + "."))
        elif exp != got:
            out[name] = (exp, got)
    return out


def load_checkpoint(path: Path, kind: Optional[Kind] = None, expected_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Load and verify a checkpoint. Sections of expected_config must match the echo exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)

    if payload.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    if kind is not None and payload.get("kind") != kind:
        raise CompatibilityError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')!r}")
    if content_hash(payload["config"], payload["state_dict"]) != payload["content_hash"]:
        raise CompatibilityError(f"{path}: content hash mismatch, file is corrupt or was edited")
    if expected_config is not None:
        diff = {}
        for section, expected in expected_config.items():
            diff.update(_diff(expected, payload["config"].get(section, {}), section + "."))
        if diff:
            raise CompatibilityError(f"{path}: configuration does not match the checkpoint", diff)
    return payload


def restore_backbone(path: Path, config: Optional[BackboneConfig] = None) -> Backbone:
    """
    Rebuild a backbone from a backbone or detector checkpoint. With config given, the
    checkpoint must have been produced by the same backbone configuration.
    """
    expected = {"backbone": config.model_dump(mode="json")} if config is not None else None
    payload = load_checkpoint(path, expected_config=expected)
    backbone = Backbone(BackboneConfig.model_validate(payload["config"]["backbone"]))
    state = payload["state_dict"]
    if payload["kind"] == "detector":
        state = {k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")}
    backbone.load_state_dict(state)
    return backbone


def restore_detector(
    path: Path, backbone: Optional[BackboneConfig] = None, discriminator: Optional[DiscriminatorConfig] = None
) -> AnomalyDetector:
    expected = {}
    if backbone is not None:
        expected["backbone"] = backbone.model_dump(mode="json")
    if discriminator is not None:
        expected["discriminator"] = discriminator.model_dump(mode="json")
    payload = load_checkpoint(path, kind="detector", expected_config=expected or None)
    model = AnomalyDetector(
        BackboneConfig.model_validate(payload["config"]["backbone"]),
        DiscriminatorConfig.model_validate(payload["config"]["discriminator"]),
    )
    model.load_state_dict(payload["state_dict"])
    return model
