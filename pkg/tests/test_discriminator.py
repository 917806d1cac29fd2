import math

import pytest
import torch

from wsn_anomaly.data_classes import DiscriminatorConfig
from wsn_anomaly.errors import ConfigError, EpisodeError, LossError, ShapeError, ShortageError
from wsn_anomaly.model.discriminator import (
    AnomalyBuffer,
    DualGraphDiscriminator,
    classification_losses,
    classify_nodes,
    contrastive_loss_disc,
    joint_loss,
    layer_weights,
    sample_episode,
)


def small_discriminator(shots: int = 2, layers: int = 2, query_size: int = 4, dim: int = 3) -> DualGraphDiscriminator:
    config = DiscriminatorConfig(shots=shots, graph_layers=layers, query_size=query_size)
    return DualGraphDiscriminator(dim, config).double()


def support_set(shots: int = 2, dim: int = 3):
    x = torch.randn(2 * shots, dim, dtype=torch.float64)
    y = torch.cat([torch.zeros(shots), torch.ones(shots)]).long()
    return x, y


# ---------------------------------
# Buffer and episodes
# ---------------------------------

def test_buffer_matches_list_oracle(rng):
    buffer = AnomalyBuffer(capacity=7)
    oracle = []
    for _ in range(10000):
        if rng.random() < 0.6:
            value = int(rng.integers(1_000_000))
            buffer.push(value)
            oracle = (oracle + [value])[-7:]
        else:
            count = int(rng.integers(0, 9))
            if count > len(oracle):
                with pytest.raises(ShortageError):
                    buffer.take(count)
            else:
                assert buffer.take(count) == (oracle[len(oracle) - count :] if count else [])
        assert len(buffer) == len(oracle)


def test_buffer_rejects_zero_capacity():
    with pytest.raises(ConfigError):
        AnomalyBuffer(0)


def episode_inputs():
    features = torch.arange(2 * 6 * 3, dtype=torch.float64).reshape(2, 6, 3)
    labels = torch.tensor([[0, 0, 1, -1, 0, 1], [-1, 0, 1, 0, -1, -1]])
    return features, labels


def test_episode_partitions_the_batch():
    features, labels = episode_inputs()
    buffer = AnomalyBuffer(8)
    episode = sample_episode(features, labels, buffer, K=2, seed=3)

    groups = [
        episode.support_normal_index,
        episode.support_anomalous_index,
        episode.query_labeled_index,
        episode.query_unlabeled_index,
    ]
    flat_ids = [i for g in groups for i in g]
    assert sorted(flat_ids) == list(range(12))
    flat_labels = labels.reshape(-1)
    assert all(flat_labels[i] == 0 for i in episode.support_normal_index)
    assert all(flat_labels[i] == 1 for i in episode.support_anomalous_index)
    assert all(flat_labels[i] == -1 for i in episode.query_unlabeled_index)
    torch.testing.assert_close(episode.query_labels, flat_labels[episode.query_labeled_index])
    flat = features.reshape(-1, 3)
    torch.testing.assert_close(episode.support_normal, flat[episode.support_normal_index])
    # every labeled anomaly of the batch lands in the buffer
    assert len(buffer) == 3


def test_episode_views():
    features, labels = episode_inputs()
    episode = sample_episode(features, labels, AnomalyBuffer(8), K=2, seed=0)
    assert episode.shots == 2
    torch.testing.assert_close(episode.anchor, episode.support_normal[0])
    assert episode.positives.shape == (1, 3)
    assert episode.support.shape == (4, 3)
    assert episode.support_labels.tolist() == [0, 0, 1, 1]
    assert episode.queries.shape[0] == len(episode.query_labeled_index) + len(episode.query_unlabeled_index)


def test_episode_is_seeded():
    features, labels = episode_inputs()
    a = sample_episode(features, labels, AnomalyBuffer(8), K=2, seed=11)
    b = sample_episode(features, labels, AnomalyBuffer(8), K=2, seed=11)
    assert a.support_normal_index == b.support_normal_index
    assert a.support_anomalous_index == b.support_anomalous_index


def test_episode_keeps_every_node_as_a_query():
    features, labels = episode_inputs()
    episode = sample_episode(features, labels, AnomalyBuffer(8), K=2, seed=1)
    assert len(episode.query_labeled_index) == 4
    assert len(episode.query_unlabeled_index) == 4
    torch.testing.assert_close(episode.queries[:4], features.reshape(-1, 3)[episode.query_labeled_index])


def test_forward_episode_feeds_queries_in_chunks():
    disc = small_discriminator(query_size=3)
    features, labels = episode_inputs()
    episode = sample_episode(features / 10.0, labels, AnomalyBuffer(8), K=2, seed=1)

    predictions = disc.forward_episode(episode)

    queries = episode.queries
    assert all(p.ins_logits.shape == (8, 2) for p in predictions)
    for start in range(0, 8, 3):
        chunk, _ = disc(episode.support, episode.support_labels, queries[start : start + 3])
        for full, part in zip(predictions, chunk):
            torch.testing.assert_close(full.ins_logits[start : start + 3], part.ins_logits)
            torch.testing.assert_close(full.dis_logits[start : start + 3], part.dis_logits)


def test_anomaly_shortfall_is_filled_from_buffer():
    features = torch.randn(1, 6, 3, dtype=torch.float64)
    labels = torch.tensor([[0, 0, 0, 1, -1, -1]])
    buffer = AnomalyBuffer(4)
    stored = [torch.full((3,), float(v), dtype=torch.float64) for v in (7, 8, 9)]
    buffer.push_many(stored, source="epoch1/step0")

    episode = sample_episode(features, labels, buffer, K=2, seed=0, source="epoch1/step1")

    assert episode.support_anomalous_index == [3, -1]
    assert episode.borrowed_sources == ["epoch1/step0"]
    torch.testing.assert_close(episode.support_anomalous[1], stored[-1])
    torch.testing.assert_close(buffer.entries[-1].value, features[0, 3])
    assert buffer.entries[-1].source == "epoch1/step1"


def test_buffer_copy_is_independent():
    buffer = AnomalyBuffer(3)
    buffer.push(1, source="a")
    copy = buffer.copy()
    copy.push(2, source="b")
    assert buffer.take_entries(1) == [(1, "a")]
    assert copy.take(2) == [1, 2]


def test_episode_errors():
    features = torch.randn(1, 4, 3)
    with pytest.raises(EpisodeError):
        sample_episode(features, torch.tensor([[0, 1, 1, -1]]), AnomalyBuffer(4), K=2)
    with pytest.raises(ShortageError):
        sample_episode(features, torch.tensor([[0, 0, 1, -1]]), AnomalyBuffer(4), K=2)
    with pytest.raises(ShapeError):
        sample_episode(features, torch.tensor([[0, 0, 1]]), AnomalyBuffer(4), K=1)


# ---------------------------------
# Dual graph
# ---------------------------------

def test_predictions_are_distributions_and_edges_positive():
    disc = small_discriminator()
    support_x, support_y = support_set()
    query_x = torch.randn(3, 3, dtype=torch.float64)
    predictions, state = disc(support_x, support_y, query_x)

    assert len(predictions) == 2
    for p in predictions:
        assert p.ins_logits.shape == (3, 2)
        torch.testing.assert_close(p.ins_probs.sum(-1), torch.ones(3, dtype=torch.float64))
        torch.testing.assert_close(p.dis_probs.sum(-1), torch.ones(3, dtype=torch.float64))
    members = 4 + 3
    for e in state.e_ins + state.e_dis:
        assert (e[:members, :members] > 0).all()
        # the padding slot is disconnected
        assert (e[members:] == 0).all()


def test_discriminator_is_query_permutation_equivariant():
    disc = small_discriminator(query_size=5)
    support_x, support_y = support_set()
    query_x = torch.randn(5, 3, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])

    base, _ = disc(support_x, support_y, query_x)
    permuted, _ = disc(support_x, support_y, query_x[perm])
    for a, b in zip(base, permuted):
        assert (a.ins_logits[perm] - b.ins_logits).abs().max() <= 1e-10
        assert (a.dis_logits[perm] - b.dis_logits).abs().max() <= 1e-10


def test_too_many_queries_rejected():
    disc = small_discriminator(query_size=2)
    support_x, support_y = support_set()
    with pytest.raises(ShapeError):
        disc(support_x, support_y, torch.randn(3, 3, dtype=torch.float64))


def test_propagation_rounds_run_in_order():
    disc = small_discriminator()
    support_x, support_y = support_set()
    state = disc.init_graphs(support_x, support_y, torch.randn(2, 3, dtype=torch.float64))
    with pytest.raises(ConfigError):
        disc.propagate_layer(state, 2)
    disc.propagate_layer(state, 1)
    assert state.depth == 1
    with pytest.raises(ConfigError):
        disc.propagate_layer(state, 3)


def test_score_needs_a_stored_support_set():
    disc = small_discriminator(query_size=3)
    with pytest.raises(EpisodeError):
        disc.score(torch.randn(2, 3, dtype=torch.float64))
    support_x, support_y = support_set()
    disc.set_support(support_x, support_y)
    scores = disc.score(torch.randn(7, 3, dtype=torch.float64))
    assert scores.shape == (7,)
    assert ((scores >= 0) & (scores <= 1)).all()
    with pytest.raises(ShapeError):
        disc.set_support(torch.randn(3, 3, dtype=torch.float64), support_y)


def test_discriminator_gradients_on_a_small_episode():
    disc = small_discriminator(shots=2, layers=2, query_size=2)
    support_x, support_y = support_set()
    query_x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)

    def f(q):
        predictions, _ = disc(support_x, support_y, q)
        return predictions[-1].ins_logits, predictions[-1].dis_logits

    assert torch.autograd.gradcheck(f, (query_x,), eps=1e-6, atol=1e-5, rtol=1e-4)


# ---------------------------------
# Losses and decision rule
# ---------------------------------

def test_classify_nodes_examples():
    score, label = classify_nodes(torch.tensor([[0.1, 0.9]]), torch.tensor([[0.1, 0.9]]))
    assert float(score[0]) == pytest.approx(0.9) and int(label[0]) == 1

    score, label = classify_nodes(torch.tensor([[0.8, 0.2]]), torch.tensor([[0.4, 0.6]]))
    assert float(score[0]) == pytest.approx(0.4) and int(label[0]) == 0

    # a score on the threshold counts as anomalous
    score, label = classify_nodes(torch.tensor([[0.5, 0.5]]), torch.tensor([[0.5, 0.5]]))
    assert float(score[0]) == 0.5 and int(label[0]) == 1


def test_layer_weights_favour_the_last_round():
    assert layer_weights(3) == [0.25, 0.5, 1.0]


def test_joint_loss_value():
    one = torch.tensor(1.0)
    loss = joint_loss(0.4, one, [one, 2 * one], [3 * one, 4 * one])
    # 0.4 * 1 + 0.6 * (0.5 * 4 + 1.0 * 6)
    assert float(loss) == pytest.approx(5.2)
    assert float(joint_loss(1.0, one, [one], [one])) == 1.0
    with pytest.raises(ConfigError):
        joint_loss(1.5, one, [one], [one])
    with pytest.raises(LossError):
        joint_loss(0.5, one, [one], [])


def test_contrastive_loss_value():
    anchor = torch.tensor([1.0, 0.0], dtype=torch.float64)
    positives = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    negatives = torch.tensor([[-1.0, 0.0]], dtype=torch.float64)
    loss = contrastive_loss_disc(anchor, positives, negatives, tau=0.5)
    expected = -math.log((math.exp(2.0) + 1.0) / math.exp(-2.0))
    assert float(loss) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(LossError):
        contrastive_loss_disc(anchor, positives[:0], negatives, tau=0.5)


def test_classification_losses_need_labels():
    disc = small_discriminator()
    support_x, support_y = support_set()
    predictions, _ = disc(support_x, support_y, torch.randn(3, 3, dtype=torch.float64))
    ins, dis = classification_losses(predictions, torch.tensor([1, 0]))
    assert len(ins) == len(dis) == 2
    assert all(torch.isfinite(v) for v in ins + dis)
    with pytest.raises(LossError):
        classification_losses(predictions, torch.zeros(0, dtype=torch.long))


def test_episode_training_step_reduces_to_a_scalar():
    disc = small_discriminator(query_size=6)
    features, labels = episode_inputs()
    episode = sample_episode(features / 10.0, labels, AnomalyBuffer(8), K=2, seed=2)
    predictions = disc.forward_episode(episode)
    ins, dis = classification_losses(predictions, episode.query_labels)
    contrast = contrastive_loss_disc(episode.anchor, episode.positives, episode.negatives, 0.1)
    loss = joint_loss(0.4, contrast, ins, dis)
    loss.backward()
    assert loss.dim() == 0
    assert disc.head.weight.grad is not None
