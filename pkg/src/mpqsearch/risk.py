"""Classification, complexity and generalization risks and the capacity-aware exponent."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attribution import lp_target, rank_order, topk_support
from .autodiff import Tensor
from .model import ModelParams
from .quant import BitwidthSpace, BranchImportance, expected_bitwidth, expected_bitwidth_t

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModel:
    """MAC count of each searched layer, aligned with ``BitwidthSpace.layers``."""

    macs: tuple[int, ...]

    def __post_init__(self):
        if any(m <= 0 for m in self.macs):
            raise ValueError(f"MAC counts must be positive, got {self.macs}")

    @classmethod
    def from_model(cls, params: ModelParams, space: BitwidthSpace) -> "CostModel":
        table = params.macs()
        return cls(tuple(int(table[i]) for i in space.layers))

    @property
    def total(self) -> int:
        return int(np.sum(self.macs))


@dataclass(frozen=True)
class RiskBreakdown:
    r_e: float
    r_c: float
    r_g: float
    p_effective: float
    zeta: float
    eta: float
    total: float

    def terms(self) -> dict[str, float]:
        return {"r_e": self.r_e, "r_c": self.r_c, "r_g": self.r_g, "p": self.p_effective, "total": self.total}


def complexity_risk_t(importance: BranchImportance, space: BitwidthSpace, cost: CostModel) -> Tensor:
    """Expected BOPs: sum_k E[q_w^k] * E[q_a^k] * MAC_k, differentiable in the logits."""
    terms = None
    for k in range(len(space)):
        ew = expected_bitwidth_t(importance.w_logits[k], space.w_bits[k])
        ea = expected_bitwidth_t(importance.a_logits[k], space.a_bits[k])
        term = ad.scale(ad.mul(ew, ea), float(cost.macs[k]))
        terms = term if terms is None else ad.add(terms, term)
    return terms


def complexity_risk(importance: BranchImportance, space: BitwidthSpace, cost: CostModel) -> float:
    return float(
        sum(
            expected_bitwidth(importance.w_logits[k], space.w_bits[k])
            * expected_bitwidth(importance.a_logits[k], space.a_bits[k])
            * cost.macs[k]
            for k in range(len(space))
        )
    )


def capacity_p(importance: BranchImportance, space: BitwidthSpace, qw0: float = 4.0, qa0: float = 6.0) -> float:
    """Average over searched layers of (qw0 / E[q_w]) * (qa0 / E[q_a])."""
    vals = []
    for k in range(len(space)):
        ew = expected_bitwidth(importance.w_logits[k], space.w_bits[k])
        ea = expected_bitwidth(importance.a_logits[k], space.a_bits[k])
        if ew <= 0 or ea <= 0:
            raise ValueError("expected bitwidths must be positive")
        vals.append((qw0 / ew) * (qa0 / ea))
    return float(np.mean(vals))


def policy_p(w_bits, a_bits, qw0: float = 4.0, qa0: float = 6.0) -> float:
    """The capacity exponent of a fixed policy (one-hot importances)."""
    return float(np.mean([(qw0 / w) * (qa0 / a) for w, a in zip(w_bits, a_bits)]))


def generalization_risk(map_q, map_f, p: float, k: int | None = None) -> float:
    """Squared distance on the top-``k`` support between sum-normalized ``map_q`` and the l_p target of ``map_f``."""
    q = np.asarray(map_q, dtype=np.float64).reshape(-1)
    f = np.asarray(map_f, dtype=np.float64).reshape(-1)
    if q.shape != f.shape:
        raise ValueError(f"map shapes differ: {np.shape(map_q)} vs {np.shape(map_f)}")
    support = np.arange(f.size) if k is None else topk_support(f, k)
    if not f[support].sum() > 0:
        log.warning("degenerate full-precision attribution on the support; generalization risk term is 0")
        return 0.0
    target = lp_target(f, p, support)
    sq = q[support]
    s = sq.sum()
    nq = sq / s if s != 0 else np.zeros_like(sq)
    return float(((nq - target) ** 2).sum())


def generalization_risk_t(maps_q: Tensor, maps_f: np.ndarray, p: float, k: int | None = None) -> Tensor:
    """Batch mean of :func:`generalization_risk`, differentiable through ``maps_q``.

    ``k=None`` uses every pixel as the support.
    """
    n = maps_q.shape[0]
    f = np.asarray(maps_f, dtype=np.float64).reshape(n, -1)
    m = f.shape[1]
    kk = m if k is None else min(int(k), m)
    support = np.stack([rank_order(row)[:kk] for row in f]) if kk < m else np.tile(np.arange(m), (n, 1))
    fs = np.take_along_axis(f, support, axis=1)
    powered = fs**p
    totals = powered.sum(axis=1, keepdims=True)
    ok = totals[:, 0] > 0
    if not ok.all():
        log.warning("%d sample(s) with degenerate full-precision attribution; their term is 0", int((~ok).sum()))
    target = np.where(ok[:, None], powered / np.where(ok[:, None], totals, 1.0), 0.0)
    flat_q = ad.reshape(maps_q, (n, m))
    nq = ad.normalize_rows(ad.gather_cols(flat_q, support))
    diff = ad.mul(ad.sub(nq, Tensor(target)), Tensor(np.broadcast_to(ok[:, None], nq.shape).astype(np.float64)))
    return ad.scale(ad.sum(ad.square(diff)), 1.0 / n)


def total_risk(r_e: float, r_c: float, r_g: float, zeta: float, eta: float, p: float = float("nan")) -> RiskBreakdown:
    total = r_e + zeta * r_c + eta * r_g
    return RiskBreakdown(float(r_e), float(r_c), float(r_g), float(p), float(zeta), float(eta), float(total))
