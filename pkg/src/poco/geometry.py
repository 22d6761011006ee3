"""Rotation/translation-invariant encoding of an oriented point pair.

For a center point p (normal n) and neighbor p_k (normal n_k), with
r = p - p_k, r_hat = r/|r|, the encoding builds a local frame
(r_hat, v, w) from the neighbor normal:

    v = normalize(n_k - (n_k . r_hat) r_hat)
    w = normalize(r_hat x v)

and emits 8 scalars (GEOM_DIM):

    [ n.n_k,  r_hat.n_k,  r_hat.n,  n.v,  n.w,  r.n_k,  r.(n x n_k),  |r| ]

Every entry is a dot product of vectors that co-rotate with the cloud, so
the vector is invariant under any rigid motion applied to (p, n, p_k, n_k).

Degenerate cases are deterministic:
  * |r| < 1e-9 (coincident points): output is [n.n_k, 0, 0, 0, 0, 0, 0, 0];
  * n_k parallel to r_hat (v undefined): v falls back to the axis-priority
    unit vector orthogonal to r_hat (see unit_orthogonal).
"""

from __future__ import annotations

import numpy as np

from poco.errors import ContractViolation

GEOM_DIM = 8

_EPS = 1e-9


def unit_orthogonal(d: np.ndarray) -> np.ndarray:
    """Deterministic unit vector orthogonal to each (unit) row vector in d.

    Picks the coordinate axis least aligned with d (lowest index on ties) and
    projects out the d component. Shape-preserving on (..., 3) input.
    """
    d = np.asarray(d, dtype=np.float64)
    axis = np.argmin(np.abs(d), axis=-1)
    e = np.zeros_like(d)
    np.put_along_axis(e, axis[..., None], 1.0, axis=-1)
    proj = (e * d).sum(axis=-1, keepdims=True)
    raw = e - proj * d
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    return raw / np.where(norm < _EPS, 1.0, norm)


def _check_unit(name: str, vec: np.ndarray, tol: float = 1e-4) -> None:
    norms = np.linalg.norm(vec, axis=-1)
    err = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if err > tol:
        raise ContractViolation(f"{name} must be unit length, worst |norm-1| = {err:.3e}")


def geom_encode_pairs(p: np.ndarray, n: np.ndarray,
                      p_k: np.ndarray, n_k: np.ndarray) -> np.ndarray:
    """Batched encoding: p, n are (m, 3); p_k, n_k are (m, k, 3) -> (m, k, 8)."""
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    p_k = np.asarray(p_k, dtype=np.float64)
    n_k = np.asarray(n_k, dtype=np.float64)
    if p.shape != n.shape or p_k.shape != n_k.shape or p.shape[-1] != 3 or p_k.shape[-1] != 3:
        raise ContractViolation(
            f"geom_encode_pairs shapes: p{p.shape} n{n.shape} p_k{p_k.shape} n_k{n_k.shape}")
    _check_unit("center normal", n)
    _check_unit("neighbor normal", n_k)

    nb = n[:, None, :]
    r = p[:, None, :] - p_k                       # (m, k, 3)
    r_len = np.linalg.norm(r, axis=-1)            # (m, k)
    near = r_len < _EPS
    safe_len = np.where(near, 1.0, r_len)
    r_hat = r / safe_len[..., None]

    # local frame from the neighbor normal
    along = (n_k * r_hat).sum(axis=-1, keepdims=True)
    v_raw = n_k - along * r_hat
    v_norm = np.linalg.norm(v_raw, axis=-1, keepdims=True)
    v_deg = v_norm[..., 0] < _EPS
    v = v_raw / np.where(v_norm < _EPS, 1.0, v_norm)
    if v_deg.any():
        v = np.where(v_deg[..., None], unit_orthogonal(r_hat), v)
    w_raw = np.cross(r_hat, v)
    w_norm = np.linalg.norm(w_raw, axis=-1, keepdims=True)
    w = w_raw / np.where(w_norm < _EPS, 1.0, w_norm)

    out = np.empty(r.shape[:2] + (GEOM_DIM,), dtype=np.float64)
    out[..., 0] = np.clip((nb * n_k).sum(axis=-1), -1.0, 1.0)
    out[..., 1] = np.clip((r_hat * n_k).sum(axis=-1), -1.0, 1.0)
    out[..., 2] = np.clip((r_hat * nb).sum(axis=-1), -1.0, 1.0)
    out[..., 3] = np.clip((nb * v).sum(axis=-1), -1.0, 1.0)
    out[..., 4] = np.clip((nb * w).sum(axis=-1), -1.0, 1.0)
    out[..., 5] = (r * n_k).sum(axis=-1)
    out[..., 6] = (r * np.cross(np.broadcast_to(nb, n_k.shape), n_k)).sum(axis=-1)
    out[..., 7] = r_len
    if near.any():
        keep0 = out[..., 0].copy()
        out[near] = 0.0
        out[..., 0] = keep0
    return out


def geom_encode(p, n, p_k, n_k) -> np.ndarray:
    """Single-pair encoding -> (8,) vector. See module docstring for layout."""
    out = geom_encode_pairs(np.asarray(p, dtype=np.float64)[None, :],
                            np.asarray(n, dtype=np.float64)[None, :],
                            np.asarray(p_k, dtype=np.float64)[None, None, :],
                            np.asarray(n_k, dtype=np.float64)[None, None, :])
    return out[0, 0]
