"""
Cross retention: each modality's queries retain the summed keys of every other modality.

    O^i = (Q^i (sum_{j != i} K^j)^T * D) V^i

Three forms share the parameters: a per-modality loop (heterogeneous slab widths), a
batched form over a stacked modality axis (equal widths), and a recurrent step.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import nn

from wsn_anomaly.errors import ConfigError, ShapeError, StateError

from .retention import ROTARY_BASE, decay_matrix, encode_keys, encode_queries, group_norm_slabs

CR_GAMMA = 1.0 - 2.0**-5


@dataclass
class CrossState:
    S: torch.Tensor  # B x N x M x dk x dv
    step: int = 0


class CrossRetention(nn.Module):
    def __init__(
        self,
        widths: Sequence[int],
        key_dim: int,
        value_dim: int,
        gamma: float = CR_GAMMA,
        rotary_base: float = ROTARY_BASE,
    ) -> None:
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ConfigError(f"cross retention needs at least two modalities, got {len(widths)}")
        if key_dim % 2:
            raise ConfigError(f"key width must be even for rotary encoding, got {key_dim}")
        self.widths = widths
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.gamma = gamma
        self.rotary_base = rotary_base
        self.W_Q = nn.ParameterList([nn.Parameter(torch.empty(w, key_dim)) for w in widths])
        self.W_K = nn.ParameterList([nn.Parameter(torch.empty(w, key_dim)) for w in widths])
        self.W_V = nn.ParameterList([nn.Parameter(torch.empty(w, value_dim)) for w in widths])
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for bank in (self.W_Q, self.W_K, self.W_V):
            for weight in bank:
                nn.init.xavier_uniform_(weight)

    @property
    def num_modalities(self) -> int:
        return len(self.widths)

    @property
    def out_dim(self) -> int:
        return self.num_modalities * self.value_dim

    def _split(self, X: torch.Tensor) -> List[torch.Tensor]:
        if X.dim() != 4:
            raise ShapeError(f"cross retention input must be B x N x W x d, got {tuple(X.shape)}")
        if X.shape[-1] != sum(self.widths):
            raise ShapeError(f"feature axis has width {X.shape[-1]}, expected {sum(self.widths)}")
        return list(torch.split(X, self.widths, dim=-1))

    def _project(self, slabs: List[torch.Tensor], positions: torch.Tensor):
        Q = [encode_queries(x @ w, positions, self.rotary_base) for x, w in zip(slabs, self.W_Q)]
        K = [encode_keys(x @ w, positions, self.rotary_base) for x, w in zip(slabs, self.W_K)]
        V = [x @ w for x, w in zip(slabs, self.W_V)]
        return Q, K, V

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        """Loop form, B x N x W x sum(d_i) -> B x N x W x (M * dv)."""
        slabs = self._split(X)
        W = X.shape[2]
        positions = torch.arange(W, device=X.device)
        Q, K, V = self._project(slabs, positions)
        K_total = torch.stack(K).sum(0)
        D = decay_matrix(W, torch.tensor(self.gamma, dtype=X.dtype, device=X.device))
        outputs = [((q @ (K_total - k).transpose(-1, -2)) * D) @ v for q, k, v in zip(Q, K, V)]
        return group_norm_slabs(torch.stack(outputs, dim=-2))

    def stacked_weights(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if len(set(self.widths)) != 1:
            raise ConfigError(
                f"batched cross retention needs equal modality widths, got {self.widths}; use the loop form"
            )
        return torch.stack(list(self.W_Q)), torch.stack(list(self.W_K)), torch.stack(list(self.W_V))

    def forward_batched(self, X: torch.Tensor) -> torch.Tensor:
        """
        Batched form over a modality axis, B x N x M x W x d_i -> B x N x W x (M * dv).
        """
        WQ, WK, WV = self.stacked_weights()
        if X.dim() != 5 or X.shape[2] != self.num_modalities or X.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"batched input must be B x N x {self.num_modalities} x W x {self.widths[0]}, got {tuple(X.shape)}"
            )
        W = X.shape[3]
        positions = torch.arange(W, device=X.device)
        Q = encode_queries(torch.einsum("bnmwd,mdk->bnmwk", X, WQ), positions, self.rotary_base)
        K = encode_keys(torch.einsum("bnmwd,mdk->bnmwk", X, WK), positions, self.rotary_base)
        V = torch.einsum("bnmwd,mdv->bnmwv", X, WV)
        K_cross = K.sum(dim=2, keepdim=True) - K
        D = decay_matrix(W, torch.tensor(self.gamma, dtype=X.dtype, device=X.device))
        O = ((Q @ K_cross.transpose(-1, -2)) * D) @ V  # B x N x M x W x dv
        return group_norm_slabs(O.transpose(2, 3))

    def initial_state(self, batch: int, nodes: int, dtype=None) -> CrossState:
        dtype = dtype or self.W_Q[0].dtype
        S = torch.zeros(
            batch, nodes, self.num_modalities, self.key_dim, self.value_dim, dtype=dtype, device=self.W_Q[0].device
        )
        return CrossState(S=S)

    def recurrent_step(self, X_t: torch.Tensor, state: CrossState) -> Tuple[torch.Tensor, CrossState]:
        """
        S_t^i = gamma S_{t-1}^i + (sum_{j != i} K_t^j)^T V_t^i, O_t^i = Q_t^i S_t^i.
        """
        slabs = self._split(X_t)
        if X_t.shape[2] != 1:
            raise ShapeError(f"recurrent step takes one time step, got {X_t.shape[2]}")
        if state.S.shape[2] != self.num_modalities:
            raise StateError(f"state holds {state.S.shape[2]} modalities, block has {self.num_modalities}")
        position = torch.tensor([state.step], device=X_t.device)
        Q, K, V = self._project(slabs, position)
        Q, K, V = torch.stack(Q, dim=2), torch.stack(K, dim=2), torch.stack(V, dim=2)  # B x N x M x 1 x *
        K_cross = K.sum(dim=2, keepdim=True) - K
        S = self.gamma * state.S + K_cross.transpose(-1, -2) @ V
        O = Q @ S
        return group_norm_slabs(O.transpose(2, 3)), CrossState(S=S, step=state.step + 1)
