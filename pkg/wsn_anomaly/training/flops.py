"""
Analytic forward-pass FLOPs ledger and a wall-clock step-latency probe.

Conventions: an m x k by k x n product costs 2mkn, a dense layer 2 * in * out per row
plus the bias add, activations one FLOP per element, layer norm 5 and group norm
(no affine) 4 per element.
"""
import logging
import statistics
import time
from typing import Dict, Literal, Optional, Sequence

import torch

from wsn_anomaly.data_classes import BackboneConfig, DiscriminatorConfig, FlopsLedger

logger = logging.getLogger(__name__)


def matmul(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def dense(rows: int, d_in: int, d_out: int, bias: bool = True) -> int:
    return matmul(rows, d_in, d_out) + (rows * d_out if bias else 0)


def _retention_block(
    ledger: FlopsLedger, module: str, rows: int, W: int, d_in: int, groups: int, dk: int, dv: int, recurrent: bool,
    cross: bool = False,
) -> None:
    # rows = positions processed (N * W in parallel form, N per recurrent step)
    ledger.add(module, "projection", groups * (2 * matmul(rows, d_in, dk) + matmul(rows, d_in, dv)))
    ledger.add(module, "rotary", groups * 2 * 6 * rows * (dk // 2))
    if cross:
        ledger.add(module, "key_sum", groups * 2 * rows * dk)
    if recurrent:
        # S = gamma S + K^T V, O = Q S
        ledger.add(module, "state_update", groups * rows * (matmul(dk, 1, dv) + 2 * dk * dv))
        ledger.add(module, "readout", groups * matmul(rows, dk, dv))
    else:
        nodes = rows // W
        ledger.add(module, "qk_scores", groups * nodes * matmul(W, dk, W))
        ledger.add(module, "decay_mask", groups * nodes * W * W)
        ledger.add(module, "value_mix", groups * nodes * matmul(W, W, dv))
    ledger.add(module, "group_norm", 4 * rows * groups * dv)


def _readout(ledger: FlopsLedger, config: BackboneConfig, N: int, W: int) -> None:
    d, L = config.d_model, config.num_layers
    if config.use_fpn:
        ledger.add("fpn", "granularity_linear", dense(N * W, d * L, d) + N * W * d)
        ledger.add("fpn", "temporal_pool", N * W * d)
        ledger.add("fpn", "modality_linear", dense(N, d, d) + N * d)
    else:
        ledger.add("fpn", "temporal_pool", N * W * d)
    if config.use_gat:
        d_out = config.embedding_dim
        ledger.add("gat", "projection", matmul(N, d, d_out))
        ledger.add("gat", "scores", 2 * matmul(N, d_out, 1) + 2 * N * N)
        ledger.add("gat", "softmax", 3 * N * N)
        ledger.add("gat", "aggregate", matmul(N, N, d_out) + N * d_out)


def _discriminator(ledger: FlopsLedger, config: DiscriminatorConfig, d_emb: int) -> None:
    E, S = config.episode_size, 2 * config.shots
    d_ins = d_emb + 2

    def mlp(rows: int, d_in: int, d_out: int) -> int:
        return dense(rows, d_in, 2 * d_in) + rows * 2 * d_in + dense(rows, 2 * d_in, d_out) + rows * d_out

    rounds = config.graph_layers
    ledger.add("discriminator", "edge_mlp", (rounds + 1) * (mlp(E * E, d_ins, 1) + mlp(E * E, S, 1) + 3 * E * E * (d_ins + S)))
    ledger.add("discriminator", "node_mlp", rounds * (mlp(E, S + E, S) + mlp(E, 2 * d_ins, d_ins)))
    ledger.add("discriminator", "aggregate", rounds * matmul(E, E, d_ins))
    ledger.add("discriminator", "predict", rounds * (2 * matmul(E, S, 2) + matmul(E, S, 2) + dense(E, d_ins, 2) + 6 * E))


def count_flops(
    config: BackboneConfig,
    mode: Literal["parallel", "recurrent"] = "parallel",
    W: Optional[int] = None,
    position: int = 0,
    discriminator: Optional[DiscriminatorConfig] = None,
) -> FlopsLedger:
    """
    Forward cost of one graph. Parallel mode covers a whole window; recurrent mode one
    streaming step including the fused readout over the ring. position is accepted for
    symmetry with the streaming API; the per-step cost does not depend on it.
    """
    del position
    W = W or config.window_length
    N, M, d = config.num_nodes, config.num_modalities, config.d_model
    recurrent = mode == "recurrent"
    rows = N if recurrent else N * W
    ledger = FlopsLedger(mode=mode)

    ledger.add("embedding", "projection", 2 * rows * d)
    for i in range(config.num_layers):
        layer = f"layer{i}"
        ledger.add(f"{layer}.msr", "layer_norm", 5 * rows * d)
        _retention_block(
            ledger, f"{layer}.msr", rows, W, d, config.num_heads, config.head_key_dim, config.head_value_dim, recurrent
        )
        ledger.add(f"{layer}.msr", "residual", rows * d)
        if config.use_cr:
            ledger.add(f"{layer}.cr", "layer_norm", 5 * rows * d)
            _retention_block(
                ledger,
                f"{layer}.cr",
                rows,
                W,
                config.modality_width,
                M,
                config.modality_key_dim,
                config.modality_value_dim,
                recurrent,
                cross=True,
            )
            ledger.add(f"{layer}.cr", "residual", rows * d)
        f = config.hidden_ffn_dim
        ledger.add(f"{layer}.ffn", "layer_norm", 5 * rows * d)
        ledger.add(f"{layer}.ffn", "linear", dense(rows, d, f) + rows * f + dense(rows, f, d) + rows * d)

    _readout(ledger, config, N, W)
    if discriminator is not None:
        _discriminator(ledger, discriminator, config.embedding_dim)
    return ledger


@torch.no_grad()
def measure_step_latency(
    backbone, positions: Sequence[int] = (10, 1000), repeats: int = 20, seed: int = 0
) -> Dict[int, float]:
    """
    Median wall-clock seconds of one recurrent step after the stream has advanced to
    each position.
    """
    cfg = backbone.config
    generator = torch.Generator().manual_seed(seed)
    A = torch.ones(cfg.num_nodes, cfg.num_nodes, dtype=backbone.dtype)
    backbone.eval()
    result = {}
    for position in positions:
        stream = backbone.stream(A)
        x = torch.randn(1, cfg.num_nodes, cfg.num_modalities, generator=generator, dtype=backbone.dtype)
        for _ in range(position):
            stream.push(x)
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            stream.push(x)
            timings.append(time.perf_counter() - start)
        result[position] = statistics.median(timings)
        logger.debug("Recurrent step at position %d: %.3f ms", position, 1e3 * result[position])
    return result
