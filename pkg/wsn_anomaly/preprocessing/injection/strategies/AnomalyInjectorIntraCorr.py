from typing import Literal

import numpy as np

from .AnomalyInjector import AnomalyInjector, InjectionOutcome


class AnomalyInjectorIntraCorr(AnomalyInjector):
    kind: Literal["intra_corr"] = "intra_corr"
    flip_probability: float = 0.5

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Break the correlation between two modalities of the node on a segment.

        flip reflects the segment about its mean (rho -> -rho). vanish removes the
        component aligned with the paired modality and rescales to the original spread
        (rho -> 0).
        """
        M, W = X.shape[1], X.shape[2]
        if M < 2:
            raise ValueError("intra-node correlation anomalies need at least two modalities")
        modality, paired = (int(i) for i in rng.choice(M, size=2, replace=False))
        start, length = self.draw_segment(W, rng, min_length=min(3, W))
        seg = slice(start, start + length)

        x = X[node, modality, seg]
        y = X[node, paired, seg]
        xc, yc = x - x.mean(), y - y.mean()
        mode = "flip" if rng.random() < self.flip_probability else "vanish"
        if mode == "flip" or yc @ yc < 1e-12:
            new = x.mean() - xc
        else:
            resid = xc - (xc @ yc) / (yc @ yc) * yc
            # second pass drops the rounding left by the first
            resid -= (resid @ yc) / (yc @ yc) * yc
            spread = np.sqrt(resid @ resid)
            new = x.mean() + (resid * np.sqrt(xc @ xc) / spread if spread > 1e-12 else resid)
        X[node, modality, seg] = new
        return InjectionOutcome(
            modality=modality,
            start=start,
            length=length,
            magnitude=self.magnitude,
            parameters={"paired_modality": paired, "mode": mode},
        )
