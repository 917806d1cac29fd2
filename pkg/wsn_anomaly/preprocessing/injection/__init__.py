"""
Controlled anomaly injection into normalized dataset splits.
"""
import logging
import math
from typing import Dict, List, Tuple

import numpy as np
from pydantic import TypeAdapter

from wsn_anomaly.data_classes import ANOMALY_KINDS, AnomalySpec, AttributedGraphSample, DatasetSplit, InjectionRecord
from wsn_anomaly.errors import BudgetError

from .strategies import AnomalyInjector, AnyInjector

logger = logging.getLogger(__name__)

_injector_adapter = TypeAdapter(AnyInjector)

# Offsets the label draw away from the per-partition injection streams.
LABEL_STREAM = 1009


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def injectors_from_spec(spec: AnomalySpec) -> Dict[str, AnomalyInjector]:
    magnitudes = {"point": spec.magnitude, "collective": spec.collective_magnitude}
    return {
        kind: _injector_adapter.validate_python(
            {"kind": kind, "magnitude": magnitudes.get(kind, 0.0), "segment_fraction": spec.segment_fraction}
        )
        for kind in ANOMALY_KINDS
    }


def _inject_partition(
    name: str,
    index: int,
    samples: List[AttributedGraphSample],
    spec: AnomalySpec,
    injectors: Dict[str, AnomalyInjector],
) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray, List[InjectionRecord]]:
    n_windows = len(samples)
    n_nodes, _, W = samples[0].X.shape
    slots = n_windows * n_nodes
    n_anomalous = round_half_up(spec.injection_rate * slots)

    kinds = [k for k in ANOMALY_KINDS if spec.type_mix.get(k, 0.0) > 0]
    weights = np.array([spec.type_mix[k] for k in kinds])
    weights = weights / weights.sum()

    chosen = np.sort(np.random.default_rng([spec.rng_seed, index]).choice(slots, size=n_anomalous, replace=False))
    Xs = [s.X.copy() for s in samples]
    truth = np.zeros((n_windows, n_nodes), dtype=np.int64)
    truth_mask = np.zeros((n_windows, n_nodes, W), dtype=bool)
    records = []
    for slot in chosen:
        window, node = divmod(int(slot), n_nodes)
        rng = np.random.default_rng([spec.rng_seed, index, window, node])
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        neighbors = np.flatnonzero(samples[window].A[node])
        outcome = injectors[kind].apply(Xs[window], node, neighbors, rng)

        truth[window, node] = 1
        truth_mask[window, node, outcome.start : outcome.start + outcome.length] = True
        records.append(
            InjectionRecord(
                partition=name,
                window_index=window,
                node=node,
                type=kind,
                start=outcome.start,
                length=outcome.length,
                magnitude=outcome.magnitude,
                seed=spec.rng_seed,
                parameters={"modality": outcome.modality, **outcome.parameters},
            )
        )
    return Xs, truth, truth_mask, records


def _draw_labels(truth: np.ndarray, spec: AnomalySpec) -> np.ndarray:
    """
    Label labeled_fraction of the node-slots at the configured normal:anomalous ratio.
    """
    flat = truth.ravel()
    n_labeled = round_half_up(spec.labeled_fraction * flat.size)
    n_anomalous = round_half_up(n_labeled / (spec.label_ratio_normal_to_anomalous + 1.0))
    n_normal = n_labeled - n_anomalous

    anomalous_slots = np.flatnonzero(flat == 1)
    normal_slots = np.flatnonzero(flat == 0)
    if n_anomalous > anomalous_slots.size:
        raise BudgetError(
            f"{n_anomalous} labeled anomalies requested but only {anomalous_slots.size} anomalies were injected"
        )
    if n_normal > normal_slots.size:
        raise BudgetError(f"{n_normal} labeled normal slots requested but only {normal_slots.size} exist")

    rng = np.random.default_rng([spec.rng_seed, LABEL_STREAM])
    labels = np.full(flat.size, -1, dtype=np.int64)
    labels[rng.choice(anomalous_slots, size=n_anomalous, replace=False)] = 1
    labels[rng.choice(normal_slots, size=n_normal, replace=False)] = 0
    return labels.reshape(truth.shape)


def inject_anomalies(split: DatasetSplit, spec: AnomalySpec) -> Tuple[DatasetSplit, List[InjectionRecord]]:
    """
    Inject anomalies into every partition and draw the partial labels on the training split.

    Returns the labeled split and the injection log. Identical spec and seed give
    identical output.
    """
    injectors = injectors_from_spec(spec)
    partitions: Dict[str, List[AttributedGraphSample]] = {}
    log: List[InjectionRecord] = []

    for index, (name, samples) in enumerate(split.partitions().items()):
        if not samples:
            partitions[name] = []
            continue
        Xs, truth, truth_mask, records = _inject_partition(name, index, samples, spec, injectors)
        if name == "train":
            labels = _draw_labels(truth, spec)
        else:
            labels = np.full(truth.shape, -1, dtype=np.int64)
        partitions[name] = [
            sample.model_copy(
                update={"X": Xs[i], "truth": truth[i], "truth_mask": truth_mask[i], "node_labels": labels[i]}
            )
            for i, sample in enumerate(samples)
        ]
        log.extend(records)
        logger.info(
            "Injected %d anomalies into %s (%d windows, %d labeled slots)",
            len(records),
            name,
            len(samples),
            int((labels >= 0).sum()),
        )

    return DatasetSplit(**partitions, ratios=split.ratios), log
