import numpy as np
import pytest
import torch

from tests.conftest import tiny_backbone_config
from wsn_anomaly.data_classes import PretrainConfig
from wsn_anomaly.errors import ConfigError, EpisodeError, ShapeError
from wsn_anomaly.model.backbone import Backbone
from wsn_anomaly.model.pretrain import (
    ContrastEpisode,
    SubgraphSample,
    info_nce,
    pearson,
    pretrain_loss,
    pretrain_step,
    sample_subgraph,
    select_pairs,
)

PATH_GRAPH = np.array(
    [
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [0, 1, 1, 1, 0],
        [0, 0, 1, 1, 1],
        [0, 0, 0, 1, 1],
    ]
)


def test_subgraph_without_walk_is_the_closed_neighbourhood():
    assert sample_subgraph(PATH_GRAPH, 2, 0, seed=0) == [1, 2, 3]
    assert sample_subgraph(PATH_GRAPH, 0, 0, seed=0) == [0, 1]


def test_subgraph_walk_stays_on_edges():
    for seed in range(20):
        members = sample_subgraph(PATH_GRAPH, 0, 3, seed=seed)
        assert members == sorted(members)
        assert {0, 1} <= set(members)
        # three hops from node 0 reach at most node 3
        assert max(members) <= 3


def test_subgraph_is_deterministic_per_seed():
    A = (np.random.default_rng(0).random((8, 8)) < 0.3).astype(int)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1)
    assert sample_subgraph(A, 4, 5, seed=9) == sample_subgraph(A, 4, 5, seed=9)


def test_subgraph_rejects_bad_arguments():
    with pytest.raises(ShapeError):
        sample_subgraph(PATH_GRAPH, 7, 1)
    with pytest.raises(ConfigError):
        sample_subgraph(PATH_GRAPH, 0, -1)


def test_pearson_matches_numpy(rng):
    for _ in range(20):
        a = rng.normal(size=10)
        b = 0.5 * a + rng.normal(size=10)
        expected = np.corrcoef(a, b)[0, 1]
        assert float(pearson(torch.tensor(a), torch.tensor(b))) == pytest.approx(expected, abs=1e-12)


def test_pearson_of_constant_vector_is_zero():
    a = torch.full((6,), 3.0, dtype=torch.float64)
    b = torch.arange(6, dtype=torch.float64)
    assert float(pearson(a, b)) == 0.0
    with pytest.raises(ShapeError):
        pearson(torch.zeros(3), torch.zeros(4))


def candidates_from(pooled: torch.Tensor, centers=None):
    centers = centers if centers is not None else range(len(pooled))
    return [SubgraphSample(c, [c], p) for c, p in zip(centers, pooled)]


def test_select_pairs_matches_brute_force(rng):
    for _ in range(20):
        anchor = torch.tensor(rng.normal(size=6))
        pooled = torch.tensor(rng.normal(size=(7, 6)))
        episode = select_pairs(anchor, candidates_from(pooled), k_neg=3)

        rho = np.array([np.corrcoef(anchor.numpy(), p.numpy())[0, 1] for p in pooled])
        assert episode.positive_center == int(np.argmax(rho))
        ranked = [int(i) for i in np.argsort(rho, kind="stable") if i != np.argmax(rho)]
        assert episode.negative_centers == ranked[:3]
        assert episode.negatives.shape == (3, 6)


def test_select_pairs_ties_go_to_lower_center():
    anchor = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    same = anchor.clone()
    pooled = torch.stack([anchor * 2, same, -anchor, -anchor * 4])
    episode = select_pairs(anchor, candidates_from(pooled, centers=[5, 1, 4, 2]), k_neg=2)
    assert episode.positive_center == 1
    assert episode.negative_centers == [2, 4]


def test_select_pairs_needs_enough_candidates():
    pooled = torch.randn(2, 4)
    with pytest.raises(EpisodeError):
        select_pairs(torch.randn(4), candidates_from(pooled), k_neg=2)
    with pytest.raises(ConfigError):
        select_pairs(torch.randn(4), candidates_from(pooled), k_neg=0)


def test_info_nce_value():
    anchor = torch.tensor([1.0, 0.0], dtype=torch.float64)
    episode = ContrastEpisode(
        anchor=anchor,
        positive=torch.tensor([1.0, 0.0], dtype=torch.float64),
        negatives=torch.tensor([[0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64),
        tau=0.5,
    )
    logits = np.array([2.0, 0.0, -2.0])
    expected = -np.log(np.exp(logits[0]) / np.exp(logits).sum())
    assert float(info_nce(episode)) == pytest.approx(expected, abs=1e-12)


def test_info_nce_cosine_ignores_scale():
    anchor = torch.tensor([3.0, 4.0], dtype=torch.float64)
    positive = torch.tensor([0.3, 0.4], dtype=torch.float64)
    negatives = torch.tensor([[-4.0, 3.0]], dtype=torch.float64)
    a = info_nce(ContrastEpisode(anchor, positive, negatives, 0.1), "cosine")
    b = info_nce(ContrastEpisode(anchor * 10, positive, negatives * 0.5, 0.1), "cosine")
    torch.testing.assert_close(a, b)


def test_info_nce_rejects_bad_temperature():
    episode = ContrastEpisode(torch.ones(2), torch.ones(2), torch.ones(1, 2), tau=0.0)
    with pytest.raises(ConfigError):
        info_nce(episode)


def test_info_nce_gradients():
    anchor = torch.randn(4, dtype=torch.float64, requires_grad=True)
    positive = torch.randn(4, dtype=torch.float64, requires_grad=True)
    negatives = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)

    def f(a, p, n):
        return info_nce(ContrastEpisode(a, p, n, tau=0.3))

    assert torch.autograd.gradcheck(f, (anchor, positive, negatives), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_pretrain_loss_on_synthetic_batch(clean_split):
    split, _, _ = clean_split
    backbone = Backbone(tiny_backbone_config(num_nodes=6, window_length=16))
    config = PretrainConfig(num_negatives=3, walk_length=2)
    loss = pretrain_loss(split.train[:4], backbone, config, seed=1, epoch=0)
    assert loss is not None and torch.isfinite(loss)
    again = pretrain_loss(split.train[:4], backbone, config, seed=1, epoch=0)
    torch.testing.assert_close(loss, again)


def test_pretrain_step_updates_weights(clean_split):
    split, _, _ = clean_split
    backbone = Backbone(tiny_backbone_config(num_nodes=6, window_length=16))
    before = backbone.embedding.weight.detach().clone()
    optimizer = torch.optim.Adam(backbone.parameters(), lr=1e-2)
    value = pretrain_step(split.train[:4], backbone, optimizer, PretrainConfig(num_negatives=3, walk_length=2))
    assert value is not None and np.isfinite(value)
    assert not torch.equal(before, backbone.embedding.weight)


def test_small_graphs_are_skipped_with_a_warning(clean_split):
    split, _, _ = clean_split
    backbone = Backbone(tiny_backbone_config(num_nodes=6, window_length=16))
    config = PretrainConfig(num_negatives=5, walk_length=2)
    with pytest.warns(UserWarning, match="Skipping graph"):
        assert pretrain_loss(split.train[:2], backbone, config, seed=1, epoch=0) is None
