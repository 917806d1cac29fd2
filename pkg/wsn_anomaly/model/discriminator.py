"""
Few-shot dual-graph discriminator.

An episode holds 2K labeled support nodes and the remaining nodes of a batch as queries.
Two complete graphs are built over the support plus at most query_size queries at a time:
the instance graph (features + label, edge weights from feature similarity) and the distribution graph (similarity to each support
member, edge weights from distribution similarity). Both are refined over L alternating
rounds; every round predicts the query labels from edge-propagated support labels.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Iterable, List, NamedTuple, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from wsn_anomaly.data_classes import DiscriminatorConfig
from wsn_anomaly.errors import ConfigError, EpisodeError, LossError, ShapeError, ShortageError

logger = logging.getLogger(__name__)

NUM_CLASSES = 2


# ---------------------------------
# Anomaly buffer and episode sampling
# ---------------------------------

class BufferEntry(NamedTuple):
    value: Any
    source: str


class AnomalyBuffer:
    """FIFO store of the most recent anomalous embeddings, each tagged with the batch it came from."""

    def __init__(self, capacity: int = 64) -> None:
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: Deque[BufferEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, item: Any, source: str = "") -> None:
        self.entries.append(BufferEntry(item, source))

    def push_many(self, items: Iterable[Any], source: str = "") -> None:
        self.entries.extend(BufferEntry(item, source) for item in items)

    def take_entries(self, count: int) -> List[BufferEntry]:
        """The `count` most recent entries, oldest first, without removing them."""
        if count > len(self.entries):
            raise ShortageError(count, len(self.entries), "buffered anomalies")
        if count <= 0:
            return []
        return list(self.entries)[len(self.entries) - count :]

    def take(self, count: int) -> List[Any]:
        return [entry.value for entry in self.take_entries(count)]

    def copy(self) -> "AnomalyBuffer":
        other = AnomalyBuffer(self.capacity)
        other.entries.extend(self.entries)
        return other

    def clear(self) -> None:
        self.entries.clear()


@dataclass
class EpisodeBatch:
    support_normal: torch.Tensor  # K x d
    support_anomalous: torch.Tensor  # K x d
    query_labeled: torch.Tensor  # Ql x d
    query_labels: torch.Tensor  # Ql
    query_unlabeled: torch.Tensor  # Qu x d
    # flat (graph * N + node) indices; -1 marks a support anomaly taken from the buffer
    support_normal_index: List[int] = field(default_factory=list)
    support_anomalous_index: List[int] = field(default_factory=list)
    query_labeled_index: List[int] = field(default_factory=list)
    query_unlabeled_index: List[int] = field(default_factory=list)
    # source tags of the buffer entries that fill an anomaly shortfall
    borrowed_sources: List[str] = field(default_factory=list)

    @property
    def shots(self) -> int:
        return self.support_normal.shape[0]

    @property
    def anchor(self) -> torch.Tensor:
        return self.support_normal[0]

    @property
    def positives(self) -> torch.Tensor:
        return self.support_normal[1:]

    @property
    def negatives(self) -> torch.Tensor:
        return self.support_anomalous

    @property
    def support(self) -> torch.Tensor:
        return torch.cat([self.support_normal, self.support_anomalous], dim=0)

    @property
    def support_labels(self) -> torch.Tensor:
        K = self.shots
        return torch.cat([torch.zeros(K, dtype=torch.long), torch.ones(K, dtype=torch.long)])

    @property
    def queries(self) -> torch.Tensor:
        return torch.cat([self.query_labeled, self.query_unlabeled], dim=0)


def _pick(indices: torch.Tensor, count: int, generator: torch.Generator) -> torch.Tensor:
    return indices[torch.randperm(indices.numel(), generator=generator)[:count]]


def sample_episode(
    features: torch.Tensor,
    labels: torch.Tensor,
    buffer: AnomalyBuffer,
    K: int,
    seed: Union[int, torch.Generator] = 0,
    source: str = "",
) -> EpisodeBatch:
    """
    Draw K labeled normal and K labeled anomalous support nodes from a batch
    (features B x N x d, labels B x N with -1 for unlabeled). An anomaly shortfall is
    filled with the buffer's most recent entries. Every other labeled node becomes a
    labeled query and every unlabeled node an unlabeled query, so the episode covers
    each node of the batch exactly once. All labeled anomalies of the batch are pushed
    to the buffer afterwards, tagged with `source`.
    """
    if K < 1:
        raise EpisodeError(f"episode needs K >= 1 support nodes per class, got {K}")
    if features.shape[:-1] != labels.shape:
        raise ShapeError(f"features {tuple(features.shape)} and labels {tuple(labels.shape)} disagree")
    generator = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))

    flat = features.reshape(-1, features.shape[-1])
    flat_labels = labels.reshape(-1).to(torch.long)
    normal = torch.nonzero(flat_labels == 0).flatten()
    anomalous = torch.nonzero(flat_labels == 1).flatten()
    unlabeled = torch.nonzero(flat_labels < 0).flatten()

    if normal.numel() < K:
        raise EpisodeError(f"{normal.numel()} labeled normal nodes available, {K} required")
    support_n = _pick(normal, K, generator)
    support_a = _pick(anomalous, min(K, anomalous.numel()), generator)
    shortfall = K - support_a.numel()
    borrowed = buffer.take_entries(shortfall) if shortfall else []

    chosen = torch.zeros_like(flat_labels, dtype=torch.bool)
    chosen[support_n] = True
    chosen[support_a] = True
    rest_labeled = torch.nonzero(~chosen & (flat_labels >= 0)).flatten()

    anomalous_rows = [flat[support_a]]
    if borrowed:
        anomalous_rows.append(torch.stack([b.value.to(flat.dtype) for b in borrowed]))

    episode = EpisodeBatch(
        support_normal=flat[support_n],
        support_anomalous=torch.cat(anomalous_rows, dim=0),
        query_labeled=flat[rest_labeled],
        query_labels=flat_labels[rest_labeled],
        query_unlabeled=flat[unlabeled],
        support_normal_index=support_n.tolist(),
        support_anomalous_index=support_a.tolist() + [-1] * shortfall,
        query_labeled_index=rest_labeled.tolist(),
        query_unlabeled_index=unlabeled.tolist(),
        borrowed_sources=[b.source for b in borrowed],
    )
    buffer.push_many(flat[anomalous].detach().clone(), source)
    return episode


# ---------------------------------
# Dual graph
# ---------------------------------

def edge_mlp(d_in: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, 2 * d_in), nn.ELU(), nn.Linear(2 * d_in, 1), nn.Sigmoid())


def node_mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, 2 * d_in), nn.ELU(), nn.Linear(2 * d_in, d_out))


def squared_difference(v: torch.Tensor) -> torch.Tensor:
    return (v[:, None, :] - v[None, :, :]) ** 2


@dataclass
class DualGraphState:
    """Per-layer tensors of both graphs; index 0 holds the initialization."""

    v_ins: List[torch.Tensor]  # E x (d + 2)
    e_ins: List[torch.Tensor]  # E x E
    v_dis: List[torch.Tensor]  # E x 2K
    e_dis: List[torch.Tensor]  # E x E
    member_mask: torch.Tensor  # E
    num_support: int

    @property
    def depth(self) -> int:
        return len(self.v_ins) - 1


@dataclass
class LayerPrediction:
    ins_logits: torch.Tensor
    dis_logits: torch.Tensor

    @property
    def ins_probs(self) -> torch.Tensor:
        return torch.softmax(self.ins_logits, dim=-1)

    @property
    def dis_probs(self) -> torch.Tensor:
        return torch.softmax(self.dis_logits, dim=-1)


class DualGraphDiscriminator(nn.Module):
    def __init__(self, embedding_dim: int, config: DiscriminatorConfig) -> None:
        super().__init__()
        self.config = config
        self.embedding_dim = embedding_dim
        K, L = config.shots, config.graph_layers
        self.num_support = 2 * K
        self.episode_size = config.episode_size
        d_ins = embedding_dim + NUM_CLASSES

        # index l of each edge bank is round l (0 = initialization); node banks cover rounds 1..L
        self.edge_ins = nn.ModuleList([edge_mlp(d_ins) for _ in range(L + 1)])
        self.edge_dis = nn.ModuleList([edge_mlp(self.num_support) for _ in range(L + 1)])
        self.i2d = nn.ModuleList([node_mlp(self.num_support + self.episode_size, self.num_support) for _ in range(L)])
        self.d2i = nn.ModuleList([node_mlp(2 * d_ins, d_ins) for _ in range(L)])
        self.head = nn.Linear(d_ins, NUM_CLASSES)

        self.register_buffer("support_x", torch.zeros(self.num_support, embedding_dim))
        self.register_buffer("support_y", torch.cat([torch.zeros(K), torch.ones(K)]).long())
        self.register_buffer("support_ready", torch.zeros((), dtype=torch.bool))

    @property
    def num_layers(self) -> int:
        return self.config.graph_layers

    def set_support(self, support_x: torch.Tensor, support_y: torch.Tensor) -> None:
        if support_x.shape != self.support_x.shape:
            raise ShapeError(f"support set must be {tuple(self.support_x.shape)}, got {tuple(support_x.shape)}")
        self.support_x.copy_(support_x.detach())
        self.support_y.copy_(support_y)
        self.support_ready.fill_(True)

    def init_graphs(self, support_x: torch.Tensor, support_y: torch.Tensor, query_x: torch.Tensor) -> DualGraphState:
        S, Q, E = support_x.shape[0], query_x.shape[0], self.episode_size
        if S == 0:
            raise EpisodeError("episode has an empty support set")
        if S != self.num_support:
            raise ShapeError(f"support set has {S} members, expected {self.num_support}")
        if S + Q > E:
            raise ShapeError(f"episode holds at most {E - S} queries, got {Q}")

        dtype = support_x.dtype
        pad = E - S - Q
        x = torch.cat([support_x, query_x, support_x.new_zeros(pad, support_x.shape[1])], dim=0)
        y = torch.zeros(E, NUM_CLASSES, dtype=dtype, device=x.device)
        y[:S] = F.one_hot(support_y, NUM_CLASSES).to(dtype)
        v_ins = torch.cat([x, y], dim=-1)

        same = (support_y[:, None] == support_y[None, :]).to(dtype)
        v_dis = torch.full((E, S), 1.0 / S, dtype=dtype, device=x.device)
        v_dis = torch.cat([same, v_dis[S:]], dim=0)

        mask = torch.zeros(E, dtype=dtype, device=x.device)
        mask[: S + Q] = 1.0
        pair = mask[:, None] * mask[None, :]
        e_ins = self.edge_ins[0](squared_difference(v_ins)).squeeze(-1) * pair
        e_dis = self.edge_dis[0](squared_difference(v_dis)).squeeze(-1) * pair
        return DualGraphState([v_ins], [e_ins], [v_dis], [e_dis], mask, S)

    def _edge_row(self, e_ins: torch.Tensor, S: int) -> torch.Tensor:
        # query columns in descending order so the row does not depend on query order
        support_part = e_ins[:, :S]
        query_part = torch.sort(e_ins[:, S:], dim=-1, descending=True).values
        return torch.cat([support_part, query_part], dim=-1)

    def propagate_layer(self, state: DualGraphState, l: int) -> DualGraphState:
        """
        Round l, in order: instance edges, distribution nodes, distribution edges, instance nodes.
        """
        if not 1 <= l <= self.num_layers:
            raise ConfigError(f"no MLP bank for round {l}; rounds run 1..{self.num_layers}")
        if state.depth != l - 1:
            raise ConfigError(f"round {l} needs round {l - 1} tensors, state holds {state.depth}")
        v_ins, e_ins = state.v_ins[-1], state.e_ins[-1]
        v_dis, e_dis = state.v_dis[-1], state.e_dis[-1]

        e_ins_l = self.edge_ins[l](squared_difference(v_ins)).squeeze(-1) * e_ins
        v_dis_l = self.i2d[l - 1](torch.cat([v_dis, self._edge_row(e_ins_l, state.num_support)], dim=-1))
        e_dis_l = self.edge_dis[l](squared_difference(v_dis)).squeeze(-1) * e_dis
        off_diagonal = 1.0 - torch.eye(e_dis_l.shape[0], dtype=e_dis_l.dtype, device=e_dis_l.device)
        aggregated = (e_dis_l * off_diagonal) @ v_ins
        v_ins_l = self.d2i[l - 1](torch.cat([v_ins, aggregated], dim=-1))

        state.e_ins.append(e_ins_l)
        state.v_dis.append(v_dis_l)
        state.e_dis.append(e_dis_l)
        state.v_ins.append(v_ins_l)
        return state

    def predict_labels(self, state: DualGraphState, l: int, support_y: torch.Tensor) -> LayerPrediction:
        """
        Logits over every episode member for round l; softmax gives the label distributions.
        """
        S = state.num_support
        if S == 0:
            raise EpisodeError("prediction needs a non-empty support set")
        lam_ins, lam_dis = self.config.lambda_ins, self.config.lambda_dis
        Y = F.one_hot(support_y, NUM_CLASSES).to(state.v_ins[l].dtype)
        ins_logits = lam_ins * (state.e_ins[l][:, :S] @ Y) + (1.0 - lam_ins) * self.head(state.v_ins[l])
        dis_logits = lam_dis * (state.e_dis[l][:, :S] @ Y) + (1.0 - lam_dis) * (state.v_dis[l] @ Y)
        return LayerPrediction(ins_logits, dis_logits)

    def forward(
        self, support_x: torch.Tensor, support_y: torch.Tensor, query_x: torch.Tensor
    ) -> Tuple[List[LayerPrediction], DualGraphState]:
        """
        Run all L rounds. Predictions are sliced to the query members.
        """
        state = self.init_graphs(support_x, support_y, query_x)
        S, Q = support_x.shape[0], query_x.shape[0]
        predictions = []
        for l in range(1, self.num_layers + 1):
            self.propagate_layer(state, l)
            p = self.predict_labels(state, l, support_y)
            predictions.append(LayerPrediction(p.ins_logits[S : S + Q], p.dis_logits[S : S + Q]))
        return predictions, state

    def forward_episode(self, episode: EpisodeBatch) -> List[LayerPrediction]:
        """
        Predictions for all episode queries, in `episode.queries` order. Queries are fed in
        consecutive chunks of query_size that share the episode's support set.
        """
        support = episode.support
        support_y = episode.support_labels.to(support.device)
        queries = episode.queries
        if queries.shape[0] == 0:
            predictions, _ = self(support, support_y, queries)
            return predictions
        chunks = [self(support, support_y, chunk)[0] for chunk in torch.split(queries, self.config.query_size)]
        return [
            LayerPrediction(
                torch.cat([c[l].ins_logits for c in chunks], dim=0),
                torch.cat([c[l].dis_logits for c in chunks], dim=0),
            )
            for l in range(self.num_layers)
        ]

    def score(self, query_x: torch.Tensor) -> torch.Tensor:
        """
        Anomaly scores for any number of query embeddings against the stored support set,
        processed in chunks of query_size.
        """
        if not bool(self.support_ready):
            raise EpisodeError("no support set stored; train the discriminator first")
        scores = []
        for chunk in torch.split(query_x, self.config.query_size):
            predictions, _ = self(self.support_x.to(chunk.dtype), self.support_y, chunk)
            score, _ = classify_nodes(predictions[-1].ins_probs, predictions[-1].dis_probs, self.config.threshold)
            scores.append(score)
        if not scores:
            return query_x.new_zeros(0)
        return torch.cat(scores)


# ---------------------------------
# Losses and decision rule
# ---------------------------------

def classification_losses(
    predictions: Sequence[LayerPrediction], labels: torch.Tensor
) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """
    Per-round cross entropy summed over the labeled queries, which come first in every
    prediction row block. Returns (instance losses, distribution losses).
    """
    n = labels.shape[0]
    if n == 0:
        raise LossError("episode carries no labeled queries")
    ins = [F.cross_entropy(p.ins_logits[:n], labels, reduction="sum") for p in predictions]
    dis = [F.cross_entropy(p.dis_logits[:n], labels, reduction="sum") for p in predictions]
    return ins, dis


def contrastive_loss_disc(anchor: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """
    -log( sum_pos exp(a.v / tau) / sum_neg exp(a.v / tau) ).
    """
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise LossError("contrastive loss needs non-empty positive and negative sets")
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    pos = torch.logsumexp(positives @ anchor / tau, dim=0)
    neg = torch.logsumexp(negatives @ anchor / tau, dim=0)
    return neg - pos


def layer_weights(L: int) -> List[float]:
    return [2.0 ** -(L - l) for l in range(1, L + 1)]


def joint_loss(
    omega: float, contrastive: torch.Tensor, ins_losses: Sequence[torch.Tensor], dis_losses: Sequence[torch.Tensor]
) -> torch.Tensor:
    """omega * L_cont + (1 - omega) * sum_l 2^-(L-l) (L_dis_l + L_ins_l)."""
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"omega must lie in [0, 1], got {omega}")
    if len(ins_losses) != len(dis_losses) or not ins_losses:
        raise LossError("instance and distribution losses must cover the same non-empty set of rounds")
    graph = sum(w * (d + i) for w, d, i in zip(layer_weights(len(ins_losses)), dis_losses, ins_losses))
    return omega * contrastive + (1.0 - omega) * graph


def classify_nodes(ins_probs: torch.Tensor, dis_probs: torch.Tensor, threshold: float = 0.5) -> Tuple[torch.Tensor, torch.Tensor]:
    """Score = mean anomalous mass of both graphs; label 1 iff score >= threshold."""
    score = 0.5 * (ins_probs[..., 1] + dis_probs[..., 1])
    return score, (score >= threshold).long()
