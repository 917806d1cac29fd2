from typing import Literal

import numpy as np

from .AnomalyInjector import AnomalyInjector, InjectionOutcome, scale_of


class AnomalyInjectorCollective(AnomalyInjector):
    kind: Literal["collective"] = "collective"
    magnitude: float = 2.0

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Level shift of a contiguous segment by magnitude * sigma.
        """
        modality = int(rng.integers(0, X.shape[1]))
        start, length = self.draw_segment(X.shape[2], rng)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        _, std = scale_of(X[node, modality])
        X[node, modality, start : start + length] += sign * self.magnitude * std
        return InjectionOutcome(
            modality=modality, start=start, length=length, magnitude=self.magnitude, parameters={"sign": sign}
        )
