"""
Multi-scale retention with equivalent parallel and recurrent forms.

Positions are 0-based. Query/key pairs are scored with the complex pairing
    <a, b> = sum_m (a_{2m} b_{2m} - a_{2m+1} b_{2m+1})
after rotating queries by +p*theta and keys by -p*theta, so every score depends only
on the relative offset between the two positions.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from wsn_anomaly.errors import ConfigError, ShapeError, StateError

GN_EPS = 1e-6
ROTARY_BASE = 10000.0


def head_gammas(h: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """gamma_i = 1 - 2^(-5-i) for i = 0..h-1."""
    if h < 1:
        raise ConfigError(f"head count must be >= 1, got {h}")
    return 1.0 - torch.pow(2.0, -5.0 - torch.arange(h, dtype=dtype))


@dataclass(frozen=True)
class DecayMask:
    D: torch.Tensor  # (..., W, W)
    gamma: torch.Tensor


def decay_matrix(W: int, gamma: torch.Tensor) -> torch.Tensor:
    """
    Lower-triangular gamma^(t1-t2), batched over any leading shape of gamma.
    """
    gamma = torch.as_tensor(gamma)
    t = torch.arange(W, device=gamma.device)
    offsets = (t[:, None] - t[None, :]).to(gamma.dtype)
    causal = offsets >= 0
    g = gamma[..., None, None]
    D = torch.pow(g, offsets.clamp(min=0))
    return torch.where(causal, D, torch.zeros_like(D))


def build_decay_mask(W: int, gamma: float, dtype: torch.dtype = torch.float64) -> DecayMask:
    if W < 1:
        raise ConfigError(f"mask length must be >= 1, got {W}")
    g = torch.as_tensor(gamma, dtype=dtype)
    if not 0.0 <= float(g) <= 1.0:
        raise ConfigError(f"decay must lie in [0, 1], got {gamma}")
    return DecayMask(D=decay_matrix(W, g), gamma=g)


def apply_rotary(
    Z: torch.Tensor,
    positions: torch.Tensor,
    conjugate: bool = False,
    base: float = ROTARY_BASE,
) -> torch.Tensor:
    """
    Rotate consecutive coordinate pairs of Z (... x W x d) by position * theta_m,
    theta_m = base^(-2m/d). conjugate negates the angles.
    """
    d = Z.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary encoding needs an even feature width, got {d}")
    theta = torch.pow(torch.as_tensor(base, dtype=Z.dtype), -2.0 * torch.arange(d // 2, dtype=Z.dtype, device=Z.device) / d)
    angles = torch.as_tensor(positions, dtype=Z.dtype, device=Z.device)[..., None] * theta
    if conjugate:
        angles = -angles
    cos, sin = angles.cos(), angles.sin()
    even, odd = Z[..., 0::2], Z[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


def conjugate_pairs(Z: torch.Tensor) -> torch.Tensor:
    """Negate the second coordinate of every pair."""
    sign = torch.ones(Z.shape[-1], dtype=Z.dtype, device=Z.device)
    sign[1::2] = -1.0
    return Z * sign


def rotary_pairing(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * conjugate_pairs(b)).sum(-1)


def encode_queries(Q: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    return apply_rotary(Q, positions, base=base)


def encode_keys(K: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    # plain dot products against these keys realize rotary_pairing
    return conjugate_pairs(apply_rotary(K, positions, conjugate=True, base=base))


def group_norm_slabs(O: torch.Tensor) -> torch.Tensor:
    """
    Normalize each slab of O (... x G x dv) over its own features, per position.
    Returns ... x (G * dv).
    """
    *lead, G, dv = O.shape
    flat = O.reshape(-1, G * dv)
    return F.group_norm(flat, G, eps=GN_EPS).reshape(*lead, G * dv)


@dataclass
class RetentionState:
    S: torch.Tensor  # B x N x h x dk x dv
    step: int = 0


class MultiScaleRetention(nn.Module):
    def __init__(
        self,
        d_in: int,
        num_heads: int,
        key_dim: int,
        value_dim: int,
        gammas: Optional[Sequence[float]] = None,
        rotary_base: float = ROTARY_BASE,
    ) -> None:
        super().__init__()
        if key_dim % 2:
            raise ConfigError(f"key width must be even for rotary encoding, got {key_dim}")
        self.d_in = d_in
        self.num_heads = num_heads
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.rotary_base = rotary_base

        self.W_Q = nn.Parameter(torch.empty(num_heads, d_in, key_dim))
        self.W_K = nn.Parameter(torch.empty(num_heads, d_in, key_dim))
        self.W_V = nn.Parameter(torch.empty(num_heads, d_in, value_dim))
        g = head_gammas(num_heads) if gammas is None else torch.as_tensor(gammas, dtype=torch.float64)
        if g.shape != (num_heads,):
            raise ConfigError(f"expected {num_heads} decay values, got {tuple(g.shape)}")
        self.register_buffer("gammas", g.to(torch.get_default_dtype()))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            for weight in (self.W_Q, self.W_K, self.W_V):
                for head in range(self.num_heads):
                    nn.init.xavier_uniform_(weight[head])

    @property
    def out_dim(self) -> int:
        return self.num_heads * self.value_dim

    def _check_input(self, X: torch.Tensor) -> None:
        if X.dim() != 4:
            raise ShapeError(f"retention input must be B x N x W x d, got {tuple(X.shape)}")
        if X.shape[-1] != self.d_in:
            raise ShapeError(f"feature axis has width {X.shape[-1]}, expected {self.d_in}")

    def project(self, X: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        Q = torch.einsum("bnwd,hdk->bnhwk", X, self.W_Q)
        K = torch.einsum("bnwd,hdk->bnhwk", X, self.W_K)
        V = torch.einsum("bnwd,hdv->bnhwv", X, self.W_V)
        return Q, K, V

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        """Parallel form, B x N x W x d_in -> B x N x W x (h * dv)."""
        self._check_input(X)
        W = X.shape[2]
        positions = torch.arange(W, device=X.device)
        Q, K, V = self.project(X)
        Q = encode_queries(Q, positions, self.rotary_base)
        K = encode_keys(K, positions, self.rotary_base)
        D = decay_matrix(W, self.gammas.to(X.dtype))  # h x W x W
        O = ((Q @ K.transpose(-1, -2)) * D) @ V  # B x N x h x W x dv
        return group_norm_slabs(O.transpose(2, 3))

    def initial_state(self, batch: int, nodes: int, dtype: Optional[torch.dtype] = None) -> RetentionState:
        dtype = dtype or self.W_Q.dtype
        S = torch.zeros(batch, nodes, self.num_heads, self.key_dim, self.value_dim, dtype=dtype, device=self.W_Q.device)
        return RetentionState(S=S)

    def recurrent_step(self, X_t: torch.Tensor, state: RetentionState) -> Tuple[torch.Tensor, RetentionState]:
        """
        One recurrent step, B x N x 1 x d_in -> B x N x 1 x (h * dv).
        S_t = gamma S_{t-1} + K_t^T V_t, O_t = Q_t S_t.
        """
        self._check_input(X_t)
        if X_t.shape[2] != 1:
            raise ShapeError(f"recurrent step takes one time step, got {X_t.shape[2]}")
        if state.S.shape[2] != self.num_heads or state.S.shape[-2:] != (self.key_dim, self.value_dim):
            raise StateError(f"state shape {tuple(state.S.shape)} does not match {self.num_heads} heads")
        if state.step < 0:
            raise StateError(f"state step must be >= 0, got {state.step}")

        position = torch.tensor([state.step], device=X_t.device)
        Q, K, V = self.project(X_t)  # B x N x h x 1 x *
        Q = encode_queries(Q, position, self.rotary_base)
        K = encode_keys(K, position, self.rotary_base)
        gamma = self.gammas.to(X_t.dtype)[:, None, None]
        S = gamma * state.S + K.transpose(-1, -2) @ V
        O = Q @ S  # B x N x h x 1 x dv
        return group_norm_slabs(O.transpose(2, 3)), RetentionState(S=S, step=state.step + 1)
