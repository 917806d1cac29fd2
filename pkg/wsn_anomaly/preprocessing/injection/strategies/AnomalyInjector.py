import math
from typing import Any, Dict, Tuple

import numpy as np
from pydantic import BaseModel, Field


class InjectionOutcome(BaseModel):
    modality: int
    start: int
    length: int
    magnitude: float
    parameters: Dict[str, Any] = Field(default_factory=dict)


class AnomalyInjector(BaseModel):
    kind: str
    magnitude: float = 0.0
    segment_fraction: Tuple[float, float] = (0.10, 0.25)

    def apply(self, X: np.ndarray, node: int, neighbors: np.ndarray, rng: np.random.Generator) -> InjectionOutcome:
        """
        Alter X (N x M x W, modified in place) for one node and describe what changed.
        """
        raise NotImplementedError

    def draw_segment(self, W: int, rng: np.random.Generator, min_length: int = 1) -> Tuple[int, int]:
        lo, hi = self.segment_fraction
        shortest = max(min_length, math.ceil(lo * W))
        longest = max(shortest, math.floor(hi * W))
        length = min(int(rng.integers(shortest, longest + 1)), W)
        start = int(rng.integers(0, W - length + 1))
        return start, length


def scale_of(x: np.ndarray) -> Tuple[float, float]:
    return float(x.mean()), float(max(x.std(), 1e-8))
