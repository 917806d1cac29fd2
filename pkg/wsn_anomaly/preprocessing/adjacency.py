import warnings
from typing import Literal, Optional

import numpy as np

from wsn_anomaly.errors import ConfigError, DataError


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def build_adjacency(
    positions: np.ndarray,
    rule: Literal["radius", "knn"] = "knn",
    radius: Optional[float] = None,
    k: Optional[int] = None,
) -> np.ndarray:
    """
    Binary symmetric adjacency with unit self-loops.

    radius: a_ij = 1 iff the Euclidean distance is at most radius.
    knn: each node links to its k nearest other nodes (ties by lower index), then symmetrized.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or not np.isfinite(positions).all():
        raise DataError("positions must be a finite N x D array")
    n = positions.shape[0]
    dist = pairwise_distances(positions)

    if rule == "radius":
        if radius is None or not radius > 0:
            raise ConfigError(f"radius rule needs radius > 0, got {radius}")
        A = (dist <= radius).astype(np.int8)
        np.fill_diagonal(A, 1)
        isolated = np.flatnonzero(A.sum(axis=1) == 1)
        if n > 1 and isolated.size:
            warnings.warn(f"Nodes {isolated.tolist()} have no neighbor within radius {radius}", UserWarning, stacklevel=2)
    elif rule == "knn":
        if k is None or k < 1:
            raise ConfigError(f"knn rule needs k >= 1, got {k}")
        A = np.zeros((n, n), dtype=np.int8)
        masked = dist + np.diag(np.full(n, np.inf))
        order = np.argsort(masked, axis=1, kind="stable")[:, : min(k, n - 1)]
        rows = np.repeat(np.arange(n), order.shape[1])
        A[rows, order.ravel()] = 1
        A = np.maximum(A, A.T)
        np.fill_diagonal(A, 1)
    else:
        raise ConfigError(f"Unknown adjacency rule '{rule}'")
    return A
