from typing import Literal

import numpy as np

from .AnomalyInjector import AnomalyInjector, InjectionOutcome, scale_of


class AnomalyInjectorPoint(AnomalyInjector):
    kind: Literal["point"] = "point"
    magnitude: float = 4.0

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Replace one reading with a spike magnitude * sigma away from the window mean.
        """
        modality = int(rng.integers(0, X.shape[1]))
        index = int(rng.integers(0, X.shape[2]))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        mean, std = scale_of(X[node, modality])
        X[node, modality, index] = mean + sign * self.magnitude * std
        return InjectionOutcome(modality=modality, start=index, length=1, magnitude=self.magnitude, parameters={"sign": sign})
