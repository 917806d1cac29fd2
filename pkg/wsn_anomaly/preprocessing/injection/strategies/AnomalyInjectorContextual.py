from typing import Literal

import numpy as np

from .AnomalyInjector import AnomalyInjector, InjectionOutcome


class AnomalyInjectorContextual(AnomalyInjector):
    kind: Literal["contextual"] = "contextual"

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Replace a segment with the readings half a window away. The values stay within the
        node's normal range but no longer fit their neighbourhood in time.
        """
        W = X.shape[2]
        modality = int(rng.integers(0, X.shape[1]))
        start, length = self.draw_segment(W, rng)
        idx = np.arange(start, start + length)
        shift = max(W // 2, 1)
        X[node, modality, idx] = X[node, modality, (idx + shift) % W].copy()
        return InjectionOutcome(
            modality=modality, start=start, length=length, magnitude=self.magnitude, parameters={"shift": shift}
        )
