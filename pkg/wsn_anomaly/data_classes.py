"""
Typed models used across the pipeline.

These wrap the YAML configuration, the dataset tensors and the JSON artifacts so
callers can rely on validation and attribute access rather than raw dict lookups.
"""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from .errors import ConfigError

ANOMALY_KINDS = ("point", "collective", "contextual", "intra_corr", "inter_corr")


# ---------------------------------
# Configuration sections
# ---------------------------------

class PreprocessConfig(BaseModel):
    interval: float = 30.0
    downsample_step: int = 2
    window: int = 32
    # None means non-overlapping segments of length downsample_step * window
    segment_stride: Optional[int] = None
    split_ratios: Tuple[float, float, float] = (0.7, 0.2, 0.1)
    modalities: List[str] = Field(default_factory=lambda: ["temperature", "humidity", "voltage"])
    adjacency_rule: Literal["radius", "knn"] = "knn"
    adjacency_radius: float = 10.0
    adjacency_k: int = 3
    exclude_nodes: List[int] = Field(default_factory=list)

    @field_validator("interval", "adjacency_radius")
    @classmethod
    def positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("downsample_step", "window", "adjacency_k")
    @classmethod
    def at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @property
    def stride(self) -> int:
        return self.segment_stride or self.downsample_step * self.window


class AnomalySpec(BaseModel):
    injection_rate: float = 0.02
    labeled_fraction: float = 0.03
    label_ratio_normal_to_anomalous: float = 2.0
    type_mix: Dict[str, float] = Field(default_factory=lambda: {kind: 0.2 for kind in ANOMALY_KINDS})
    magnitude: float = 4.0
    collective_magnitude: float = 2.0
    segment_fraction: Tuple[float, float] = (0.10, 0.25)
    rng_seed: int = 0

    @field_validator("injection_rate", "labeled_fraction")
    @classmethod
    def unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        return v

    @field_validator("type_mix")
    @classmethod
    def valid_mix(cls, v: Dict[str, float]) -> Dict[str, float]:
        unknown = set(v) - set(ANOMALY_KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly types: {sorted(unknown)}")
        if any(w < 0 for w in v.values()):
            raise ValueError("type_mix weights must be nonnegative")
        if abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("type_mix weights must sum to 1")
        return v

    @field_validator("segment_fraction")
    @classmethod
    def ordered_fraction(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("segment_fraction must satisfy 0 < low <= high <= 1")
        return v


class BackboneConfig(BaseModel):
    num_layers: int = 3
    num_heads: int = 2
    d_model: int = 24
    key_dim: Optional[int] = None
    cr_key_dim: Optional[int] = None
    cr_value_dim: Optional[int] = None
    ffn_dim: Optional[int] = None
    gat_out: Optional[int] = None
    rotary_base: float = 10000.0
    use_cr: bool = True
    use_fpn: bool = True
    use_gat: bool = True
    dtype: Literal["float32", "float64"] = "float32"
    # Bound from the dataset manifest before a model is built.
    num_nodes: int = 8
    num_modalities: int = 3
    window_length: int = 32

    @model_validator(mode="after")
    def consistent_widths(self) -> "BackboneConfig":
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if min(self.num_heads, self.d_model, self.num_nodes, self.num_modalities, self.window_length) < 1:
            raise ValueError("widths and counts must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by num_heads={self.num_heads}")
        if self.d_model % self.num_modalities:
            raise ValueError(f"d_model={self.d_model} must be divisible by num_modalities={self.num_modalities}")
        if self.head_key_dim % 2:
            raise ValueError("retention key width must be even for rotary encoding")
        if self.use_cr:
            if self.num_modalities < 2:
                raise ValueError("cross retention needs at least two modalities")
            if self.modality_key_dim % 2:
                raise ValueError("cross retention key width must be even for rotary encoding")
            if self.modality_value_dim * self.num_modalities != self.d_model:
                raise ValueError("cr_value_dim * num_modalities must equal d_model")
        return self

    @property
    def head_key_dim(self) -> int:
        return self.key_dim or self.d_model // self.num_heads

    @property
    def head_value_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def modality_width(self) -> int:
        return self.d_model // self.num_modalities

    @property
    def modality_key_dim(self) -> int:
        return self.cr_key_dim or self.modality_width

    @property
    def modality_value_dim(self) -> int:
        return self.cr_value_dim or self.modality_width

    @property
    def hidden_ffn_dim(self) -> int:
        return self.ffn_dim or 2 * self.d_model

    @property
    def embedding_dim(self) -> int:
        if self.use_gat:
            return self.gat_out or self.d_model
        return self.d_model


class PretrainConfig(BaseModel):
    walk_length: int = 3
    num_negatives: int = 5
    pretrain_temperature: float = 0.1
    similarity: Literal["dot", "cosine"] = "dot"

    @field_validator("pretrain_temperature")
    @classmethod
    def positive_tau(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("temperature must be > 0")
        return v


class DiscriminatorConfig(BaseModel):
    shots: int = 5
    graph_layers: int = 5
    query_size: int = 32
    lambda_ins: float = 0.5
    lambda_dis: float = 0.5
    contrast_temperature: float = 0.1
    buffer_capacity: int = 64
    threshold: float = 0.5

    @field_validator("lambda_ins", "lambda_dis", "threshold")
    @classmethod
    def unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("shots", "graph_layers", "query_size", "buffer_capacity")
    @classmethod
    def at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @property
    def episode_size(self) -> int:
        return 2 * self.shots + self.query_size


class TrainConfig(BaseModel):
    stage1_epochs: int = 200
    stage2_epochs: int = 100
    freeze_backbone_after: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    omega: float = 0.4
    seed: int = 0
    save_interval: int = 10
    early_stopping_patience: Optional[int] = None
    pretrain: bool = True

    @field_validator("omega")
    @classmethod
    def omega_range(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        return v

    @field_validator("learning_rate", "adam_eps")
    @classmethod
    def positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @model_validator(mode="after")
    def freeze_before_end(self) -> "TrainConfig":
        if not 0 <= self.freeze_backbone_after < self.stage2_epochs:
            raise ValueError("freeze_backbone_after must be smaller than stage2_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


SECTIONS = {
    "preprocess": PreprocessConfig,
    "anomaly": AnomalySpec,
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
}


class GlobalConfig(BaseModel):
    # Where to find input data and store output
    data_path: str = "data/"
    output_path: str = "output/"

    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    anomaly: AnomalySpec = Field(default_factory=AnomalySpec)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "GlobalConfig":
        """
        Route a flat key-value mapping into the typed sections.
        Unknown keys are rejected so typos never silently fall back to defaults.
        """
        routed: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        top: Dict[str, Any] = {}
        owners = {key: name for name, model in SECTIONS.items() for key in model.model_fields}
        for key, value in (flat or {}).items():
            if key in ("data_path", "output_path"):
                top[key] = value
            elif key in owners:
                routed[owners[key]][key] = value
            else:
                raise ConfigError(f"Unknown configuration key: '{key}'")
        return cls.model_validate({**top, **routed})

    def flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"data_path": self.data_path, "output_path": self.output_path}
        for name in SECTIONS:
            out.update(getattr(self, name).model_dump(mode="json"))
        return out


def compute_config_hash(model: BaseModel) -> str:
    """
    Hash of a configuration model, stable across runs and key order.
    """
    payload = model.model_dump(mode="json")
    return canonical_hash(payload)


def canonical_hash(payload: Any) -> str:
    serialized = json.dumps(
        payload,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(serialized.encode("utf-8")).hexdigest()


# ---------------------------------
# Data pipeline types
# ---------------------------------

class RawRecord(BaseModel):
    timestamp: float
    node_id: int
    values: List[Optional[float]]

    @field_validator("timestamp")
    @classmethod
    def finite_time(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("timestamp must be finite")
        return v

    @field_validator("node_id")
    @classmethod
    def non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("node_id must be >= 0")
        return v


class AlignedSeries(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    interval: float
    grid: np.ndarray  # (T,)
    data: np.ndarray  # (N, M, T)
    fill_mask: np.ndarray  # (N, M, T) bool
    modalities: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_grid(self) -> "AlignedSeries":
        if self.data.shape != self.fill_mask.shape or self.data.shape[-1] != self.grid.shape[0]:
            raise ValueError("grid, data and fill_mask shapes disagree")
        if self.grid.shape[0] > 1 and not np.allclose(np.diff(self.grid), self.interval):
            raise ValueError("grid spacing must equal interval")
        return self

    @property
    def num_steps(self) -> int:
        return int(self.grid.shape[0])


class SampleWindow(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    X: np.ndarray  # (N, M, W)
    origin_time: float
    phase: int
    times: Optional[np.ndarray] = None  # (W,)

    @field_validator("X")
    @classmethod
    def non_empty(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3 or v.shape[-1] < 1:
            raise ValueError("X must have shape (N, M, W) with W > 0")
        return v


class AttributedGraphSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    A: np.ndarray  # (N, N) binary
    X: np.ndarray  # (N, M, W)
    # -1 marks an unlabeled node
    node_labels: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None
    truth_mask: Optional[np.ndarray] = None  # (N, W)
    times: Optional[np.ndarray] = None
    origin_time: float = 0.0
    phase: int = 0

    @model_validator(mode="after")
    def check_graph(self) -> "AttributedGraphSample":
        n = self.X.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(n, n)}")
        if not np.array_equal(self.A, self.A.T):
            raise ValueError("A must be symmetric")
        if not np.all(np.diag(self.A) == 1):
            raise ValueError("A must carry unit self-loops")
        for name in ("node_labels", "truth"):
            vec = getattr(self, name)
            if vec is not None and vec.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        return self

    @property
    def num_nodes(self) -> int:
        return int(self.X.shape[0])

    @property
    def window(self) -> int:
        return int(self.X.shape[-1])


class DatasetSplit(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: List[AttributedGraphSample]
    validation: List[AttributedGraphSample]
    test: List[AttributedGraphSample]
    ratios: Tuple[float, float, float] = (0.7, 0.2, 0.1)

    def partitions(self) -> Dict[str, List[AttributedGraphSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


class InjectionRecord(BaseModel):
    partition: str
    window_index: int
    node: int
    type: str
    start: int
    length: int
    magnitude: float
    seed: int
    parameters: Dict[str, Any] = Field(default_factory=dict)


class DatasetManifest(BaseModel):
    version: str = Field(default="1")
    modalities: List[str]
    num_nodes: int
    num_modalities: int
    window: int
    downsample_step: int
    interval: float
    counts: Dict[str, int]
    content_hashes: Dict[str, str]
    adjacency_hash: str
    injected: bool = False
    anomaly_spec: Optional[AnomalySpec] = None
    preprocess: PreprocessConfig

    @computed_field
    @property
    def manifest_hash(self) -> str:
        """Hash over everything that identifies the dataset contents."""
        payload = self.model_dump(mode="json", exclude={"manifest_hash"})
        return canonical_hash(payload)


# ---------------------------------
# Evaluation artifacts
# ---------------------------------

class MetricsReport(BaseModel):
    TP: int
    FP: int
    FN: int
    TN: int
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)


class FlopsEntry(BaseModel):
    module: str
    operation: str
    flops: int


class FlopsLedger(BaseModel):
    mode: Literal["parallel", "recurrent"]
    entries: List[FlopsEntry] = Field(default_factory=list)

    def add(self, module: str, operation: str, flops: int) -> None:
        self.entries.append(FlopsEntry(module=module, operation=operation, flops=int(flops)))

    @computed_field
    @property
    def breakdown(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for entry in self.entries:
            out[entry.module] = out.get(entry.module, 0) + entry.flops
        return out

    @computed_field
    @property
    def total_flops(self) -> int:
        return sum(entry.flops for entry in self.entries)

    @computed_field
    @property
    def total_mflops(self) -> float:
        return self.total_flops / 1e6

    def operation_total(self, operation: str) -> int:
        return sum(e.flops for e in self.entries if e.operation == operation)


class DetectionRecord(BaseModel):
    sample_id: str
    node_id: int
    score: float
    label: int
    threshold: float
    manifest_hash: str = ""
