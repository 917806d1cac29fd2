"""
Unsupervised node-vs-subgraph contrastive pretraining of the backbone.

For each graph an anchor node is drawn, every other node seeds a subgraph (its
neighbourhood plus a short random walk) whose mean embedding is a candidate. The
candidate most Pearson-correlated with the anchor is the positive, the least
correlated ones are negatives, and InfoNCE pulls the anchor towards the positive.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from wsn_anomaly.data_classes import AttributedGraphSample, PretrainConfig
from wsn_anomaly.errors import ConfigError, EpisodeError, ShapeError
from wsn_anomaly.utils.utils import derive_seed

from .backbone import Backbone, backbone_forward

logger = logging.getLogger(__name__)

SIGMA_EPS = 1e-12


def _as_rng(seed: Union[int, np.random.Generator, None]) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_subgraph(
    A: np.ndarray, center: int, walk_len: int, seed: Union[int, np.random.Generator, None] = None
) -> List[int]:
    """
    Union of center, its neighbours and a uniform random walk of walk_len steps.
    Returns sorted node ids.
    """
    A = np.asarray(A)
    if not 0 <= center < A.shape[0]:
        raise ShapeError(f"center {center} outside [0, {A.shape[0]})")
    if walk_len < 0:
        raise ConfigError(f"walk length must be >= 0, got {walk_len}")
    rng = _as_rng(seed)
    members = set(np.flatnonzero(A[center]).tolist()) | {center}
    current = center
    for _ in range(walk_len):
        hops = np.flatnonzero(A[current])
        hops = hops[hops != current]
        if hops.size == 0:
            break
        current = int(rng.choice(hops))
        members.add(current)
    return sorted(members)


def pool_subgraph(embeddings: torch.Tensor, members: Sequence[int]) -> torch.Tensor:
    if len(members) == 0:
        raise EpisodeError("subgraph has no members to pool")
    return embeddings[list(members)].mean(dim=0)


def pearson(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Pearson correlation of two vectors; 0 when either is (near) constant.
    """
    if a.shape[-1] < 2 or a.shape != b.shape:
        raise ShapeError(f"pearson needs two vectors of equal length >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = ac.norm(), bc.norm()
    n = a.shape[-1] ** 0.5
    if na / n < SIGMA_EPS or nb / n < SIGMA_EPS:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return (ac / na) @ (bc / nb)


@dataclass
class SubgraphSample:
    center: int
    members: List[int]
    pooled: torch.Tensor


@dataclass
class ContrastEpisode:
    anchor: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor  # k_neg x d
    tau: float
    positive_center: int = -1
    negative_centers: List[int] = field(default_factory=list)


def select_pairs(
    anchor: torch.Tensor, candidates: Sequence[SubgraphSample], k_neg: int, tau: float = 0.1
) -> ContrastEpisode:
    """
    Positive = highest correlation with the anchor, negatives = the k_neg lowest.
    Ties go to the lower center id.
    """
    if k_neg < 1:
        raise ConfigError(f"k_neg must be >= 1, got {k_neg}")
    if len(candidates) < k_neg + 1:
        raise EpisodeError(f"{len(candidates)} candidate subgraphs, at least {k_neg + 1} required")
    with torch.no_grad():
        rho = [float(pearson(anchor, c.pooled)) for c in candidates]
    by_high = sorted(range(len(candidates)), key=lambda i: (-rho[i], candidates[i].center))
    positive = by_high[0]
    rest = sorted((i for i in range(len(candidates)) if i != positive), key=lambda i: (rho[i], candidates[i].center))
    negatives = rest[:k_neg]
    return ContrastEpisode(
        anchor=anchor,
        positive=candidates[positive].pooled,
        negatives=torch.stack([candidates[i].pooled for i in negatives]),
        tau=tau,
        positive_center=candidates[positive].center,
        negative_centers=[candidates[i].center for i in negatives],
    )


def info_nce(episode: ContrastEpisode, similarity: Literal["dot", "cosine"] = "dot") -> torch.Tensor:
    """
    -log softmax of the positive logit against positive + negatives, logits = sim / tau.
    """
    if not episode.tau > 0:
        raise ConfigError(f"temperature must be > 0, got {episode.tau}")
    keys = torch.cat([episode.positive[None], episode.negatives], dim=0)
    if similarity == "dot":
        sims = keys @ episode.anchor
    elif similarity == "cosine":
        sims = F.cosine_similarity(keys, episode.anchor[None], dim=-1)
    else:
        raise ConfigError(f"unknown similarity '{similarity}'")
    logits = sims / episode.tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def pretrain_loss(
    batch: Sequence[AttributedGraphSample],
    backbone: Backbone,
    config: PretrainConfig,
    seed: int,
    epoch: int,
    offset: int = 0,
) -> Optional[torch.Tensor]:
    """
    Mean InfoNCE over the graphs of a batch, or None when every graph was skipped.
    The RNG stream of each graph depends only on (seed, epoch, offset + graph index).
    """
    embeddings = backbone_forward(backbone, batch)
    losses = []
    for g, sample in enumerate(batch):
        n = sample.num_nodes
        if n < config.num_negatives + 2:
            warnings.warn(
                f"Skipping graph with {n} nodes: contrast needs at least {config.num_negatives + 2}",
                UserWarning,
                stacklevel=2,
            )
            continue
        rng = np.random.default_rng(derive_seed(seed, epoch, offset + g))
        anchor = int(rng.integers(n))
        candidates = []
        for center in range(n):
            if center == anchor:
                continue
            members = sample_subgraph(sample.A, center, config.walk_length, rng)
            candidates.append(SubgraphSample(center, members, pool_subgraph(embeddings[g], members)))
        episode = select_pairs(embeddings[g, anchor], candidates, config.num_negatives, config.pretrain_temperature)
        losses.append(info_nce(episode, config.similarity))
    if not losses:
        return None
    return torch.stack(losses).mean()


def pretrain_step(
    batch: Sequence[AttributedGraphSample],
    backbone: Backbone,
    optimizer: torch.optim.Optimizer,
    config: PretrainConfig,
    seed: int = 0,
    epoch: int = 0,
    offset: int = 0,
) -> Optional[float]:
    """One optimizer step on the batch's contrastive loss; returns the loss value."""
    backbone.train()
    loss = pretrain_loss(batch, backbone, config, seed, epoch, offset)
    if loss is None:
        return None
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())
