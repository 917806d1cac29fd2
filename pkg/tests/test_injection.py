import numpy as np
import pytest

from wsn_anomaly.data_classes import ANOMALY_KINDS, AnomalySpec
from wsn_anomaly.errors import BudgetError
from wsn_anomaly.preprocessing import inject_anomalies
from wsn_anomaly.preprocessing.injection import injectors_from_spec, round_half_up
from wsn_anomaly.preprocessing.injection.strategies import (
    AnomalyInjectorCollective,
    AnomalyInjectorContextual,
    AnomalyInjectorInterCorr,
    AnomalyInjectorIntraCorr,
    AnomalyInjectorPoint,
)


def smooth_window(rng, nodes: int = 3, modalities: int = 2, W: int = 32) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, W)
    X = np.empty((nodes, modalities, W))
    for n in range(nodes):
        for m in range(modalities):
            X[n, m] = np.sin(t + 0.3 * n + m) + 0.05 * rng.normal(size=W)
    return X


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2
    assert round_half_up(0.5) == 1


def test_injectors_cover_every_kind():
    injectors = injectors_from_spec(AnomalySpec())
    assert set(injectors) == set(ANOMALY_KINDS)
    assert isinstance(injectors["point"], AnomalyInjectorPoint)
    assert injectors["collective"].magnitude == AnomalySpec().collective_magnitude


def test_point_anomaly_passes_three_sigma_rule(rng):
    for _ in range(50):
        X = smooth_window(rng)
        outcome = AnomalyInjectorPoint(magnitude=6.0).apply(X, 1, np.array([0, 1, 2]), rng)
        x = X[1, outcome.modality]
        z = abs(x[outcome.start] - x.mean()) / x.std()
        assert z >= 3.0
        assert outcome.length == 1


def test_collective_anomaly_shifts_a_segment(rng):
    X = smooth_window(rng)
    before = X.copy()
    outcome = AnomalyInjectorCollective(magnitude=2.0).apply(X, 0, np.array([0, 1]), rng)
    seg = slice(outcome.start, outcome.start + outcome.length)
    shift = X[0, outcome.modality, seg] - before[0, outcome.modality, seg]
    np.testing.assert_allclose(shift, shift[0])
    assert abs(shift[0]) > 0
    # everything outside the segment is untouched
    mask = np.ones_like(X, dtype=bool)
    mask[0, outcome.modality, seg] = False
    np.testing.assert_array_equal(X[mask], before[mask])


def test_contextual_anomaly_keeps_values_in_range(rng):
    X = smooth_window(rng)
    before = X.copy()
    outcome = AnomalyInjectorContextual().apply(X, 2, np.array([1, 2]), rng)
    x = X[2, outcome.modality]
    assert before[2, outcome.modality].min() <= x.min() and x.max() <= before[2, outcome.modality].max()
    assert not np.array_equal(x, before[2, outcome.modality])


def test_intra_corr_breaks_negative_correlation(rng):
    for flip_probability in (0.0, 1.0):
        for _ in range(20):
            y = rng.normal(size=32)
            X = np.stack([-y + 0.2 * rng.normal(size=32), y])[None]
            injector = AnomalyInjectorIntraCorr(flip_probability=flip_probability)
            outcome = injector.apply(X, 0, np.array([0]), rng)
            seg = slice(outcome.start, outcome.start + outcome.length)
            paired = outcome.parameters["paired_modality"]
            rho = np.corrcoef(X[0, outcome.modality, seg], X[0, paired, seg])[0, 1]
            assert rho >= -1e-8


def test_intra_corr_vanish_leaves_no_correlation(rng):
    injector = AnomalyInjectorIntraCorr(flip_probability=0.0)
    for _ in range(50):
        y = rng.normal(size=32)
        X = np.stack([-y + 0.2 * rng.normal(size=32), y])[None]
        before = X.copy()
        outcome = injector.apply(X, 0, np.array([0]), rng)
        assert outcome.parameters["mode"] == "vanish"
        seg = slice(outcome.start, outcome.start + outcome.length)
        x, paired = X[0, outcome.modality, seg], X[0, outcome.parameters["paired_modality"], seg]
        assert abs(np.corrcoef(x, paired)[0, 1]) < 1e-9
        assert x.std() == pytest.approx(before[0, outcome.modality, seg].std())


def test_intra_corr_needs_two_modalities(rng):
    with pytest.raises(ValueError):
        AnomalyInjectorIntraCorr().apply(np.zeros((2, 1, 16)), 0, np.array([0]), rng)


def test_inter_corr_reverses_neighbour_trend(rng):
    t = np.linspace(0, 2 * np.pi, 32)
    X = np.stack([np.sin(t)[None].repeat(2, 0) for _ in range(3)])
    outcome = AnomalyInjectorInterCorr().apply(X, 0, np.array([0, 1, 2]), rng)
    seg = slice(outcome.start, outcome.start + outcome.length)
    rho = np.corrcoef(X[0, outcome.modality, seg], X[1, outcome.modality, seg])[0, 1]
    assert rho < 0


def test_injection_counts_and_truth(clean_split, injected_split):
    split, _, _ = clean_split
    injected, log = injected_split
    spec_rate = 0.15
    for name, samples in injected.partitions().items():
        slots = len(samples) * samples[0].num_nodes
        truth = np.stack([s.truth for s in samples])
        assert truth.sum() == round_half_up(spec_rate * slots)
        assert sum(1 for r in log if r.partition == name) == truth.sum()
        for record in (r for r in log if r.partition == name):
            mask = samples[record.window_index].truth_mask[record.node]
            assert mask[record.start : record.start + record.length].all()
    # the clean split is left untouched
    assert split.train[0].truth is None


def test_labels_only_on_training_split(injected_split):
    injected, _ = injected_split
    train_labels = np.stack([s.node_labels for s in injected.train])
    truth = np.stack([s.truth for s in injected.train])
    labeled = train_labels >= 0
    np.testing.assert_array_equal(train_labels[labeled], truth[labeled])
    assert labeled.sum() == round_half_up(0.3 * truth.size)
    assert (train_labels == 1).sum() == round_half_up(labeled.sum() / 3.0)
    for sample in injected.validation + injected.test:
        assert (sample.node_labels == -1).all()


def test_injection_is_deterministic(clean_split):
    split, _, _ = clean_split
    spec = AnomalySpec(injection_rate=0.1, labeled_fraction=0.2, rng_seed=11)
    a, log_a = inject_anomalies(split, spec)
    b, log_b = inject_anomalies(split, spec)
    for sa, sb in zip(a.train, b.train):
        np.testing.assert_array_equal(sa.X, sb.X)
        np.testing.assert_array_equal(sa.node_labels, sb.node_labels)
    assert [r.model_dump() for r in log_a] == [r.model_dump() for r in log_b]


def test_label_budget_exceeding_injections(clean_split):
    split, _, _ = clean_split
    with pytest.raises(BudgetError):
        inject_anomalies(split, AnomalySpec(injection_rate=0.0, labeled_fraction=0.3))
