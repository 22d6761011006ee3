"""Deterministic point sampling: farthest point sampling and exact k-NN.

Both functions are pure and fully tie-broken (lowest index wins), so
repeated calls on identical input give identical output on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from poco.errors import ContractViolation


@dataclass(frozen=True)
class SampleResult:
    """Indices into the input point set, in selection order."""

    indices: np.ndarray  # (m,) int64

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class NeighborList:
    """k nearest reference indices per query, nearest first."""

    indices: np.ndarray    # (m, k) int64
    distances: np.ndarray  # (m, k) float64, Euclidean


def fps(positions: np.ndarray, m: int) -> SampleResult:
    """Greedy farthest point sampling of m points.

    Seeds with the point nearest the centroid, then repeatedly takes the
    point maximizing distance to the selected set (max-min). Ties always go
    to the lowest index. O(n*m).
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise ContractViolation(f"fps expects a non-empty (n, d) array, got shape {pos.shape}")
    n = pos.shape[0]
    if not (1 <= m <= n):
        raise ContractViolation(f"fps requires 1 <= m <= n, got m={m}, n={n}")

    centroid = pos.mean(axis=0)
    d2_seed = ((pos - centroid) ** 2).sum(axis=1)
    current = int(np.argmin(d2_seed))  # argmin takes the first (lowest index) on ties

    selected = np.empty(m, dtype=np.int64)
    min_d2 = np.full(n, np.inf)
    for i in range(m):
        selected[i] = current
        d2 = ((pos - pos[current]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[current] = -np.inf  # never re-select, even among duplicate points
        if i + 1 < m:
            current = int(np.argmax(min_d2))
    return SampleResult(indices=selected)


def knn(queries: np.ndarray, references: np.ndarray, k: int,
        chunk: int = 256) -> NeighborList:
    """Exact k nearest references for each query (Euclidean), ties by lowest index.

    Brute force with stable argsort; queries are processed in chunks to bound
    the (chunk, n, d) intermediate.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise ContractViolation(f"knn expects (m, d) and (n, d) arrays, got {q.shape}, {r.shape}")
    n = r.shape[0]
    if not (1 <= k <= n):
        raise ContractViolation(f"knn requires 1 <= k <= n, got k={k}, n={n}")

    m = q.shape[0]
    out_idx = np.empty((m, k), dtype=np.int64)
    out_d2 = np.empty((m, k), dtype=np.float64)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        diff = q[lo:hi, None, :] - r[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out_idx[lo:hi] = order
        out_d2[lo:hi] = np.take_along_axis(d2, order, axis=1)
    return NeighborList(indices=out_idx, distances=np.sqrt(out_d2))
