from typing import Tuple

import torch
from torch import nn

from wsn_anomaly.data_classes import BackboneConfig, DiscriminatorConfig

from .backbone import TORCH_DTYPES, Backbone
from .discriminator import DualGraphDiscriminator


class AnomalyDetector(nn.Module):
    """Backbone plus dual-graph discriminator, the unit saved after stage 2."""

    def __init__(self, backbone_config: BackboneConfig, discriminator_config: DiscriminatorConfig) -> None:
        super().__init__()
        self.backbone = Backbone(backbone_config)
        self.discriminator = DualGraphDiscriminator(backbone_config.embedding_dim, discriminator_config)
        self.discriminator.to(TORCH_DTYPES[backbone_config.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.dtype

    def score_embeddings(self, embeddings: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """B x N x d embeddings -> (scores, labels), each B x N."""
        B, N, d = embeddings.shape
        scores = self.discriminator.score(embeddings.reshape(B * N, d)).reshape(B, N)
        return scores, (scores >= self.discriminator.config.threshold).long()

    def forward(self, X: torch.Tensor, A: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.score_embeddings(self.backbone(X, A))
