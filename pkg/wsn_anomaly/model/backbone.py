"""
Feature extraction backbone: per-modality embedding, stacked RetNet layers (multi-scale
retention followed by cross retention), multi-granularity fusion and graph attention.

The parallel forward is used for training; BackboneStream runs the same weights one
time step at a time and produces identical embeddings once W steps have been seen.
"""
import logging
from collections import deque
from typing import Deque, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from wsn_anomaly.data_classes import AttributedGraphSample, BackboneConfig
from wsn_anomaly.errors import DataError, ShapeError, WarmupError

from .cross_retention import CrossRetention, CrossState
from .retention import MultiScaleRetention, RetentionState

logger = logging.getLogger(__name__)

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ModalityEmbedding(nn.Module):
    """Lift every scalar reading to a d/M slab, one affine map per modality."""

    def __init__(self, num_modalities: int, slab_width: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_modalities, slab_width))
        self.bias = nn.Parameter(torch.zeros(num_modalities, slab_width))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        # B x N x M x W -> B x N x W x (M * slab)
        out = torch.einsum("bnmw,mc->bnwmc", X, self.weight) + self.bias
        return out.flatten(-2)


class RetNetLayer(nn.Module):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        d = config.d_model
        self.norm_msr = nn.LayerNorm(d)
        self.msr = MultiScaleRetention(
            d, config.num_heads, config.head_key_dim, config.head_value_dim, rotary_base=config.rotary_base
        )
        self.cr: Optional[CrossRetention] = None
        if config.use_cr:
            self.norm_cr = nn.LayerNorm(d)
            self.cr = CrossRetention(
                [config.modality_width] * config.num_modalities,
                config.modality_key_dim,
                config.modality_value_dim,
                rotary_base=config.rotary_base,
            )
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, config.hidden_ffn_dim), nn.GELU(), nn.Linear(config.hidden_ffn_dim, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.msr(self.norm_msr(x))
        if self.cr is not None:
            x = x + self.cr(self.norm_cr(x))
        return x + self.ffn(self.norm_ffn(x))

    def initial_state(self, batch: int, nodes: int, dtype: torch.dtype):
        cr_state = self.cr.initial_state(batch, nodes, dtype) if self.cr is not None else None
        return self.msr.initial_state(batch, nodes, dtype), cr_state

    def recurrent_step(
        self, x_t: torch.Tensor, state: Tuple[RetentionState, Optional[CrossState]]
    ) -> Tuple[torch.Tensor, Tuple[RetentionState, Optional[CrossState]]]:
        msr_state, cr_state = state
        out, msr_state = self.msr.recurrent_step(self.norm_msr(x_t), msr_state)
        x_t = x_t + out
        if self.cr is not None:
            out, cr_state = self.cr.recurrent_step(self.norm_cr(x_t), cr_state)
            x_t = x_t + out
        return x_t + self.ffn(self.norm_ffn(x_t)), (msr_state, cr_state)


class FPNFusion(nn.Module):
    """
    Stack the L layer outputs on the feature axis (width dL), mix them per step with
    Linear+ReLU, mean-pool over time, then fuse the modality slabs with Linear+ReLU.
    """

    def __init__(self, d_model: int, num_layers: int) -> None:
        super().__init__()
        self.num_layers = num_layers
        self.granularity = nn.Linear(d_model * num_layers, d_model)
        self.modality = nn.Linear(d_model, d_model)

    def forward(self, layer_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(layer_outputs) != self.num_layers:
            raise ShapeError(f"expected {self.num_layers} layer outputs, got {len(layer_outputs)}")
        shapes = {tuple(t.shape) for t in layer_outputs}
        if len(shapes) != 1:
            raise ShapeError(f"layer outputs disagree in shape: {sorted(shapes)}")
        stacked = torch.cat(list(layer_outputs), dim=-1)
        mixed = F.relu(self.granularity(stacked)).mean(dim=-2)
        return F.relu(self.modality(mixed))


def fpn_fuse(fusion: FPNFusion, layer_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
    return fusion(layer_outputs)


class GraphAttention(nn.Module):
    """Single-head graph attention with LeakyReLU(0.2) scores and ELU output."""

    def __init__(self, d_in: int, d_out: int, negative_slope: float = 0.2) -> None:
        super().__init__()
        self.proj = nn.Linear(d_in, d_out, bias=False)
        self.a_src = nn.Parameter(torch.empty(d_out))
        self.a_dst = nn.Parameter(torch.empty(d_out))
        self.negative_slope = negative_slope
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.uniform_(self.a_src, -0.1, 0.1)
        nn.init.uniform_(self.a_dst, -0.1, 0.1)

    def attention(self, h: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        if (A.sum(dim=-1) == 0).any():
            raise DataError("adjacency has a row without any neighbour; self-loops are required")
        scores = (h @ self.a_src)[..., :, None] + (h @ self.a_dst)[..., None, :]
        scores = F.leaky_relu(scores, self.negative_slope)
        scores = scores.masked_fill(A == 0, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        """X: (B x) N x d_in, A: (B x) N x N."""
        if A.shape[-1] != X.shape[-2] or A.shape[-2] != X.shape[-2]:
            raise ShapeError(f"adjacency {tuple(A.shape)} does not match {X.shape[-2]} nodes")
        h = self.proj(X)
        return F.elu(self.attention(h, A) @ h)


def gat_forward(gat: GraphAttention, X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    return gat(X, A)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        self.embedding = ModalityEmbedding(config.num_modalities, config.modality_width)
        self.layers = nn.ModuleList([RetNetLayer(config) for _ in range(config.num_layers)])
        self.fusion = FPNFusion(config.d_model, config.num_layers) if config.use_fpn else None
        self.gat = GraphAttention(config.d_model, config.embedding_dim) if config.use_gat else None
        self.to(TORCH_DTYPES[config.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.weight.dtype

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def _check(self, X: torch.Tensor) -> None:
        c = self.config
        if X.dim() != 4 or X.shape[1] != c.num_nodes or X.shape[2] != c.num_modalities:
            raise ShapeError(
                f"input must be B x {c.num_nodes} x {c.num_modalities} x W, got {tuple(X.shape)}"
            )
        if X.shape[-1] != c.window_length:
            raise ShapeError(f"input covers {X.shape[-1]} steps, the backbone is bound to W = {c.window_length}")

    def layer_outputs(self, X: torch.Tensor) -> List[torch.Tensor]:
        self._check(X)
        x = self.embedding(X)
        outputs = []
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs

    def fuse(self, layer_outputs: Sequence[torch.Tensor], A: torch.Tensor) -> torch.Tensor:
        if self.fusion is not None:
            z = self.fusion(layer_outputs)
        else:
            z = layer_outputs[-1].mean(dim=-2)
        if self.gat is not None:
            z = self.gat(z, A)
        return z

    def forward(self, X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        """Parallel form: X B x N x M x W, A (B x) N x N -> B x N x d_emb."""
        return self.fuse(self.layer_outputs(X), A)

    def stream(self, A: torch.Tensor, batch: int = 1) -> "BackboneStream":
        return BackboneStream(self, A, batch)


class BackboneStream:
    """
    Streaming handle: per-layer retention states plus a ring of the last W per-step
    layer outputs. Owned by one caller, never shared.
    """

    def __init__(self, backbone: Backbone, A: torch.Tensor, batch: int = 1) -> None:
        self.backbone = backbone
        self.A = A
        self.batch = batch
        self.window = backbone.config.window_length
        self.reset()

    def reset(self) -> None:
        cfg = self.backbone.config
        self.states = [layer.initial_state(self.batch, cfg.num_nodes, self.backbone.dtype) for layer in self.backbone.layers]
        self.rings: List[Deque[torch.Tensor]] = [deque(maxlen=self.window) for _ in self.backbone.layers]
        self.steps = 0

    @property
    def warm(self) -> bool:
        return self.steps >= self.window

    def push(self, x_t: torch.Tensor) -> None:
        """x_t: B x N x M readings for one time step."""
        x = self.backbone.embedding(x_t[..., None])  # B x N x 1 x d
        for i, layer in enumerate(self.backbone.layers):
            x, self.states[i] = layer.recurrent_step(x, self.states[i])
            self.rings[i].append(x)
        self.steps += 1

    def embedding(self) -> torch.Tensor:
        if not self.warm:
            raise WarmupError(self.window - self.steps)
        outputs = [torch.cat(list(ring), dim=2) for ring in self.rings]
        return self.backbone.fuse(outputs, self.A)

    def run(self, X: torch.Tensor) -> torch.Tensor:
        """Feed every step of X (B x N x M x W) and return the embedding."""
        for t in range(X.shape[-1]):
            self.push(X[..., t])
        return self.embedding()


def samples_to_tensors(
    samples: Sequence[AttributedGraphSample], dtype: torch.dtype = torch.float32
) -> Tuple[torch.Tensor, torch.Tensor]:
    X = torch.as_tensor(np.stack([s.X for s in samples]), dtype=dtype)
    A = torch.as_tensor(np.stack([s.A for s in samples]), dtype=dtype)
    return X, A


def backbone_forward(
    backbone: Backbone,
    batch: Sequence[AttributedGraphSample],
    mode: Literal["train_parallel", "stream_recurrent"] = "train_parallel",
) -> torch.Tensor:
    """
    Node embeddings (B x N x d_emb) for a batch of graphs in either execution mode.
    """
    X, A = samples_to_tensors(batch, backbone.dtype)
    if mode == "train_parallel":
        return backbone(X, A)
    if mode == "stream_recurrent":
        W = backbone.config.window_length
        if X.shape[-1] < W:
            raise WarmupError(W - X.shape[-1])
        if X.shape[-1] > W:
            raise ShapeError(f"input covers {X.shape[-1]} steps, the backbone is bound to W = {W}")
        return BackboneStream(backbone, A, batch=X.shape[0]).run(X)
    raise ValueError(f"Unknown backbone mode '{mode}'")
