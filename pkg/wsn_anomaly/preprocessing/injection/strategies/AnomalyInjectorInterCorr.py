from typing import Literal

import numpy as np

from .AnomalyInjector import AnomalyInjector, InjectionOutcome, scale_of


class AnomalyInjectorInterCorr(AnomalyInjector):
    kind: Literal["inter_corr"] = "inter_corr"

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Decouple one modality of the node from the shared trend of its graph neighbours
        by mirroring the neighbourhood mean on a segment. Without neighbours the node's own
        segment is mirrored.
        """
        W = X.shape[2]
        modality = int(rng.integers(0, X.shape[1]))
        start, length = self.draw_segment(W, rng, min_length=min(3, W))
        seg = slice(start, start + length)

        x = X[node, modality, seg]
        mean, std = scale_of(x)
        others = neighbors[neighbors != node]
        if others.size:
            trend = X[others, modality, seg].mean(axis=0)
            t_mean, t_std = scale_of(trend)
            X[node, modality, seg] = mean - (trend - t_mean) * (std / t_std)
        else:
            X[node, modality, seg] = 2.0 * mean - x
        return InjectionOutcome(
            modality=modality,
            start=start,
            length=length,
            magnitude=self.magnitude,
            parameters={"neighbors": others.tolist()},
        )
