"""Grad-CAM attribution maps, pixel ranks, top-K supports and the rank distance metric.

Per-sample helpers work on plain arrays.  :func:`gradcam` builds the batched,
differentiable maps used inside the search risk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams


@dataclass
class AttributionMap:
    values: np.ndarray  # H x W, nonnegative
    label: int
    source: str = "full-precision"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("attribution values must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _flat(m) -> np.ndarray:
    v = m.values if isinstance(m, AttributionMap) else np.asarray(m, dtype=np.float64)
    return v.reshape(-1)


def channel_weights(grad: np.ndarray) -> np.ndarray:
    """Average the score gradient over each channel's spatial extent (Z = H*W)."""
    grad = np.asarray(grad, dtype=np.float64)
    return grad.reshape(grad.shape[0], -1).mean(axis=1)


def attribution_map(alpha: Sequence[float], feats: np.ndarray, label: int = 0, source: str = "full-precision") -> AttributionMap:
    alpha = np.asarray(alpha, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if alpha.shape != (feats.shape[0],):
        raise ValueError(f"{alpha.shape[0]} channel weights for {feats.shape[0]} feature maps")
    return AttributionMap(np.maximum(np.tensordot(alpha, feats, axes=1), 0.0), int(label), source)


def rank_order(values: np.ndarray) -> np.ndarray:
    """Indices sorted by descending value, ties by ascending index."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def rank(m, support: Sequence[int] | None = None) -> np.ndarray:
    """Dense ranks (1 = largest) of the support pixels, in support order.

    Without a support every pixel is ranked in row-major order.
    """
    v = _flat(m)
    idx = np.arange(v.size) if support is None else np.asarray(support, dtype=np.int64)
    sub = v[idx]
    # ties break toward the lower pixel index, independent of support order
    order = np.lexsort((idx, -sub))
    out = np.empty(idx.size, dtype=np.int64)
    out[order] = np.arange(1, idx.size + 1)
    return out


def topk_support(map_f, k: int) -> np.ndarray:
    """Indices of the ``k`` largest pixels of the full-precision map, most important first."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    return rank_order(_flat(map_f))[:k]


def ard(map_q, map_f, k: int) -> float:
    """Mean |rank_q - rank_f| over the top-``k`` full-precision pixels; ranks use the whole map."""
    q, f = _flat(map_q), _flat(map_f)
    if q.shape != f.shape:
        raise ValueError(f"map shapes differ: {np.shape(map_q)} vs {np.shape(map_f)}")
    support = topk_support(f, k)
    rq, rf = rank(q), rank(f)
    return float(np.abs(rq[support] - rf[support]).mean())


def ard_batch(maps_q: np.ndarray, maps_f: np.ndarray, k: int) -> np.ndarray:
    """Per-sample :func:`ard` for stacks of maps (N x H x W)."""
    q = maps_q.reshape(maps_q.shape[0], -1)
    f = maps_f.reshape(maps_f.shape[0], -1)
    if q.shape != f.shape:
        raise ValueError(f"map shapes differ: {maps_q.shape} vs {maps_f.shape}")
    n, m = f.shape
    k = min(k, m)
    oq = np.argsort(-q, axis=1, kind="stable")
    of = np.argsort(-f, axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    rq = np.empty((n, m), dtype=np.int64)
    rf = np.empty((n, m), dtype=np.int64)
    rq[rows, oq] = np.arange(1, m + 1)
    rf[rows, of] = np.arange(1, m + 1)
    sup = of[:, :k]
    return np.abs(rq[rows, sup] - rf[rows, sup]).mean(axis=1)


def lp_target(map_f, p: float, support: Sequence[int] | None = None) -> np.ndarray:
    """``M_f**p / sum(M_f**p)`` over the support, in support order."""
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    v = _flat(map_f)
    idx = np.arange(v.size) if support is None else np.asarray(support, dtype=np.int64)
    powered = v[idx] ** p
    total = powered.sum()
    if not total > 0:
        raise ValueError("degenerate attribution: all-zero on the support")
    return powered / total


# ---------------------------------------------------------------------------
# batched maps
# ---------------------------------------------------------------------------


def head_jacobian(params: ModelParams) -> Tensor:
    """d logits / d pooled features: the product of the classifier-head weights.

    Everything after the global average pool is linear, so this matrix is
    constant in the input and differentiable in the head weights.
    """
    head = params.head_layers
    jac = params.weights[head[0]]
    for i in head[1:]:
        jac = ad.matmul(params.weights[i], jac)
    return jac


def gradcam(params: ModelParams, tap: Tensor, labels: Sequence[int]) -> Tensor:
    """Batched Grad-CAM maps (N x H x W) for each sample's label, differentiable in the tap and head."""
    n, c, h, w = tap.shape
    rows = ad.take_rows(head_jacobian(params), np.asarray(labels, dtype=np.int64))
    # d f[t] / d A[c, m, n] = J[t, c] / (H*W); channel_weights averages it over H*W again
    alpha = ad.scale(rows, 1.0 / (h * w))
    return ad.relu(ad.weighted_channel_sum(alpha, tap))
