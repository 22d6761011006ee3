"""Metric-learning losses over global descriptors.

circle_loss pushes query-positive cosine similarities toward 1 and
query-negative similarities toward 0 with self-paced weights; triplet_loss
is a hinge on squared Euclidean distances. On unit descriptors the two views
are linked exactly by metric_convert: ||x - y||^2 = 2 - 2 cos(x, y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from poco import autodiff as ad
from poco.autodiff import Tensor
from poco.errors import ContractViolation

#: Selectable a_p weighting variants. "standard" is the default:
#: a_p = [1 + m - s_p]_+, consistent with delta_p = 1 - m and similarities
#: being driven toward 1. The other two reproduce the printed formulas of the
#: two paper versions for comparison: "final_print" a_p = [s_p - 1 - m]_+
#: (non-positive for s_p <= 1, zeroing the positive branch) and "draft"
#: a_p = [1 - m - s_p]_+.
CIRCLE_VARIANTS = ("standard", "final_print", "draft")


@dataclass(frozen=True)
class CircleConfig:
    m: float = 0.2
    gamma: float = 1.0
    variant: str = "standard"

    def __post_init__(self) -> None:
        if not (0.0 < self.m < 0.5):
            raise ContractViolation(f"circle margin must be in (0, 0.5), got {self.m}")
        if self.gamma <= 0.0:
            raise ContractViolation(f"gamma must be positive, got {self.gamma}")
        if self.variant not in CIRCLE_VARIANTS:
            raise ContractViolation(f"unknown circle variant {self.variant!r}")

    @property
    def delta_p(self) -> float:
        return 1.0 - self.m

    @property
    def delta_n(self) -> float:
        return self.m


@dataclass(frozen=True)
class TripletConfig:
    m: float = 0.2

    def __post_init__(self) -> None:
        if self.m <= 0.0:
            raise ContractViolation(f"triplet margin must be positive, got {self.m}")


@dataclass(frozen=True)
class LossWeights:
    w_circle: float = 10.0
    w_triplet: float = 0.1

    def __post_init__(self) -> None:
        if self.w_circle < 0.0 or self.w_triplet < 0.0:
            raise ContractViolation("loss weights must be non-negative")


def _as_vector(x, name: str) -> Tensor:
    t = ad.as_tensor(x)
    if t.ndim != 1:
        t = ad.reshape(t, (t.size,))
    if t.size == 0:
        raise ContractViolation(f"circle_loss requires non-empty {name}")
    return t


def circle_loss(s_p, s_n, cfg: CircleConfig = CircleConfig()) -> Tensor:
    """L = softplus(lse(gamma*a_n*(s_n - delta_n)) - lse(gamma*a_p*(s_p - delta_p))).

    The self-paced weights a_p = [1 + m - s_p]_+ and a_n = [s_n + m]_+ stay
    in the graph, so the loss is differentiable wherever the clamps are not
    exactly at their corners.  With the weights active, a_p*(s_p - delta_p)
    peaks at s_p = 1 and a_n*(s_n - delta_n) bottoms out at s_n = 0, so
    gradient descent drives positive similarities to 1 and negative ones to
    0 (and the gradient signs are d L / d s_p <= 0, d L / d s_n >= 0 on the
    clamp-inactive region with s_n >= 0).
    """
    sp = _as_vector(s_p, "s_p")
    sn = _as_vector(s_n, "s_n")
    for name, t in (("s_p", sp), ("s_n", sn)):
        worst = float(np.max(np.abs(t.data))) if t.size else 0.0
        if worst > 1.0 + 1e-6:
            raise ContractViolation(f"{name} must be cosine similarities in [-1, 1], "
                                    f"worst |value| = {worst:.6f}")

    if cfg.variant == "standard":
        a_p = ad.clamp_min(ad.sub(ad.as_tensor(1.0 + cfg.m), sp), 0.0)
    elif cfg.variant == "draft":
        a_p = ad.clamp_min(ad.sub(ad.as_tensor(1.0 - cfg.m), sp), 0.0)
    else:  # "final_print"
        a_p = ad.clamp_min(ad.sub(sp, ad.as_tensor(1.0 + cfg.m)), 0.0)
    a_n = ad.clamp_min(ad.add(sn, ad.as_tensor(cfg.m)), 0.0)

    gamma = ad.as_tensor(cfg.gamma)
    pos = ad.logsumexp(ad.mul(ad.mul(a_p, gamma),
                              ad.sub(sp, ad.as_tensor(cfg.delta_p))))
    neg = ad.logsumexp(ad.mul(ad.mul(a_n, gamma),
                              ad.sub(sn, ad.as_tensor(cfg.delta_n))))
    return ad.softplus(ad.sub(neg, pos))


def triplet_loss(g_q: Tensor, g_p: Tensor, g_n: Tensor,
                 cfg: TripletConfig = TripletConfig()) -> Tensor:
    """max(d(g_p, g_q) - d(g_n, g_q) + m, 0) with d = squared Euclidean."""
    g_q, g_p, g_n = ad.as_tensor(g_q), ad.as_tensor(g_p), ad.as_tensor(g_n)
    if not (g_q.shape == g_p.shape == g_n.shape):
        raise ContractViolation(
            f"descriptor shapes differ: {g_q.shape}, {g_p.shape}, {g_n.shape}")
    dp = ad.tsum(ad.mul(ad.sub(g_p, g_q), ad.sub(g_p, g_q)))
    dn = ad.tsum(ad.mul(ad.sub(g_n, g_q), ad.sub(g_n, g_q)))
    return ad.clamp_min(ad.add(ad.sub(dp, dn), ad.as_tensor(cfg.m)), 0.0)


def metric_convert(cos):
    """Squared Euclidean distance between unit vectors with cosine `cos`: 2 - 2 cos."""
    arr = np.asarray(cos, dtype=np.float64)
    out = 2.0 - 2.0 * arr
    return float(out) if arr.ndim == 0 else out


def combined_loss(circle: Tensor, triplet: Tensor,
                  w: LossWeights = LossWeights()) -> Tensor:
    """w_circle * circle + w_triplet * triplet."""
    return ad.add(ad.mul(ad.as_tensor(circle), ad.as_tensor(w.w_circle)),
                  ad.mul(ad.as_tensor(triplet), ad.as_tensor(w.w_triplet)))
