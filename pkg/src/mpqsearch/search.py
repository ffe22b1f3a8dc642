"""Hypernet search, policy extraction, finetuning and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attribution import ard_batch, gradcam
from .autodiff import Tensor
from .data import Dataset
from .model import ModelParams, accuracy, forward
from .optim import Adam
from .quant import (
    BitwidthSpace,
    BranchImportance,
    QuantPolicy,
    check_policy,
    extract_policy,
    hypernet_hook,
    policy_bops,
    policy_hook,
)
from .risk import (
    CostModel,
    RiskBreakdown,
    capacity_p,
    complexity_risk,
    complexity_risk_t,
    generalization_risk_t,
    policy_p,
    total_risk,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "r_e", "r_c", "r_g", "p", "total", "e_bops", "lr_w", "lr_pi")


@dataclass
class SearchConfig:
    zeta: float = 1e-7
    eta: float = 1.0
    qw0: float = 4.0
    qa0: float = 6.0
    topk: int = 1000
    epochs: int = 5
    batch_size: int = 64
    lr_weights: float = 1e-3
    lr_logits: float = 1e-2
    seed: int = 0
    bops_budget: float | None = None
    w_bits: tuple[int, ...] = (2, 3, 4)
    a_bits: tuple[int, ...] = (2, 3, 4)
    act_max: float = 4.0
    p_mode: str = "capacity"  # or "fixed"
    p_fixed: float = 1.0
    support: str = "topk"  # or "full"
    quantize_first: bool = True
    val_split: bool = False

    def __post_init__(self):
        if self.zeta < 0 or self.eta < 0:
            raise ValueError("zeta and eta must be >= 0")
        if self.qw0 <= 0 or self.qa0 <= 0:
            raise ValueError("qw0 and qa0 must be positive")
        if self.topk < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("topk and batch_size must be positive, epochs >= 0")
        if self.lr_weights < 0 or self.lr_logits < 0:
            raise ValueError("learning rates must be >= 0")
        if self.p_mode not in ("capacity", "fixed"):
            raise ValueError(f"p_mode must be 'capacity' or 'fixed', got {self.p_mode!r}")
        if self.support not in ("topk", "full"):
            raise ValueError(f"support must be 'topk' or 'full', got {self.support!r}")
        self.w_bits = tuple(int(b) for b in self.w_bits)
        self.a_bits = tuple(int(b) for b in self.a_bits)

    def space_for(self, params: ModelParams) -> BitwidthSpace:
        layers = params.conv_layers if self.quantize_first else params.conv_layers[1:]
        if not layers:
            raise ValueError("no conv layers left to quantize")
        return BitwidthSpace.uniform(layers, self.w_bits, self.a_bits)

    def as_meta(self) -> dict:
        d = asdict(self)
        d["w_bits"] = list(self.w_bits)
        d["a_bits"] = list(self.a_bits)
        return d


def frozen(params: ModelParams) -> ModelParams:
    """A copy whose tensors never join a gradient graph."""
    out = params.clone()
    for t in out.tensors():
        t.requires_grad = False
    return out


@dataclass
class SearchState:
    params: ModelParams
    importance: BranchImportance
    space: BitwidthSpace
    cost: CostModel
    optimizer: Adam
    step: int = 0

    @classmethod
    def init(cls, fp_reference: ModelParams, config: SearchConfig) -> "SearchState":
        """Hypernet weights start from the full-precision reference; importances start uniform."""
        params = fp_reference.clone()
        for t in params.tensors():
            t.requires_grad = True
        space = config.space_for(params)
        importance = BranchImportance.zeros(space)
        opt = Adam([(params.tensors(), config.lr_weights), (importance.tensors(), config.lr_logits)])
        return cls(params, importance, space, CostModel.from_model(params, space), opt)

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.params.tensors() + self.importance.tensors()]


def current_p(state: SearchState, config: SearchConfig) -> float:
    if config.p_mode == "fixed":
        return float(config.p_fixed)
    return capacity_p(state.importance, state.space, config.qw0, config.qa0)


def risk_graph(
    state: SearchState, images: np.ndarray, labels: np.ndarray, fp_ref: ModelParams, config: SearchConfig
) -> tuple[Tensor, dict[str, Tensor], float]:
    """Build the total risk for one batch.  Returns ``(total, terms, p)``; ``p`` is not differentiated."""
    hook = hypernet_hook(state.params, state.space, state.importance, config.act_max)
    logits, tap = forward(state.params, images, hook)
    r_e = ad.softmax_cross_entropy(logits, labels)
    r_c = complexity_risk_t(state.importance, state.space, state.cost)
    p = current_p(state, config)
    _, fp_tap = forward(fp_ref, images)
    maps_f = gradcam(fp_ref, fp_tap, labels).data
    maps_q = gradcam(state.params, tap, labels)
    k = None if config.support == "full" else config.topk
    r_g = generalization_risk_t(maps_q, maps_f, p, k)
    total = ad.add(r_e, ad.scale(r_c, config.zeta))
    if config.eta != 0.0:
        total = ad.add(total, ad.scale(r_g, config.eta))
    return total, {"r_e": r_e, "r_c": r_c, "r_g": r_g}, p


def _breakdown(terms: dict[str, Tensor], p: float, config: SearchConfig) -> RiskBreakdown:
    for name in ("r_e", "r_c", "r_g"):
        if not math.isfinite(terms[name].item()):
            raise FloatingPointError(f"non-finite risk term {name} = {terms[name].item()}")
    return total_risk(terms["r_e"].item(), terms["r_c"].item(), terms["r_g"].item(), config.zeta, config.eta, p)


def search_step(
    state: SearchState,
    images: np.ndarray,
    labels: np.ndarray,
    fp_ref: ModelParams,
    config: SearchConfig,
    update: str = "both",
) -> RiskBreakdown:
    """One joint Adam update of hypernet weights and branch logits.

    ``update`` may be ``"weights"`` or ``"logits"`` to step a single group
    (used by the optional alternating train/validation mode).
    """
    total, terms, p = risk_graph(state, images, labels, fp_ref, config)
    breakdown = _breakdown(terms, p, config)
    state.optimizer.zero_grad()
    ad.backward(total)
    frozen_group = {"weights": state.importance.tensors(), "logits": state.params.tensors()}.get(update, [])
    for t in frozen_group:
        t.zero_grad()
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.step += 1
    return breakdown


@dataclass
class SearchResult:
    policy: QuantPolicy
    trace: list[dict]
    expected_bops: float
    bops: float
    budget_exceeded: bool
    state: SearchState = field(repr=False)


def run_search(config: SearchConfig, dataset: Dataset, fp_reference: ModelParams, dataset_id: str | None = None) -> SearchResult:
    """Train the hypernet for ``config.epochs`` epochs and extract the argmax policy."""
    if len(dataset) == 0:
        raise ValueError("cannot search on an empty dataset")
    fp_ref = frozen(fp_reference)
    state = SearchState.init(fp_reference, config)
    rng = np.random.default_rng(config.seed)
    train, val = dataset, None
    if config.val_split:
        perm = rng.permutation(len(dataset))
        cut = max(1, int(round(0.9 * len(dataset))))
        train, val = dataset.subset(perm[:cut]), dataset.subset(perm[cut:])
        if len(val) == 0:
            val = train
    trace = []
    for epoch in range(config.epochs):
        val_iter = None if val is None else _cycle(val, config.batch_size, rng)
        for xb, yb in train.batches(config.batch_size, rng):
            if val_iter is None:
                b = search_step(state, xb, yb, fp_ref, config)
            else:
                b = search_step(state, xb, yb, fp_ref, config, update="weights")
                xv, yv = next(val_iter)
                search_step(state, xv, yv, fp_ref, config, update="logits")
            trace.append(
                {
                    "step": state.step,
                    "epoch": epoch,
                    "r_e": b.r_e,
                    "r_c": b.r_c,
                    "r_g": b.r_g,
                    "p": b.p_effective,
                    "total": b.total,
                    "e_bops": complexity_risk(state.importance, state.space, state.cost),
                    "lr_w": config.lr_weights,
                    "lr_pi": config.lr_logits,
                }
            )
    meta = {
        "search": config.as_meta(),
        "dataset": dataset_id or dataset.name,
    }
    policy = extract_policy(state.importance, state.space, meta)
    bops = policy_bops(policy, fp_reference.macs())
    exceeded = config.bops_budget is not None and bops > config.bops_budget
    if exceeded:
        log.warning("policy BOPs %.4g exceed the budget %.4g", bops, config.bops_budget)
    policy.meta["bops"] = bops
    policy.meta["budget_exceeded"] = exceeded
    return SearchResult(policy, trace, complexity_risk(state.importance, state.space, state.cost), bops, exceeded, state)


def _cycle(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    while True:
        yield from dataset.batches(batch_size, rng)


# ---------------------------------------------------------------------------
# deployment
# ---------------------------------------------------------------------------


def lr_at(epoch: int, epochs: int, lr: float) -> float:
    """Step decay: x0.1 from the halfway epoch, x0.01 from the three-quarter epoch."""
    if epoch >= int(0.75 * epochs):
        return lr * 0.01
    if epoch >= int(0.5 * epochs):
        return lr * 0.1
    return lr


def finetune(
    policy: QuantPolicy,
    dataset: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    init: ModelParams,
    act_max: float = 4.0,
    batch_size: int = 64,
) -> tuple[ModelParams, list[float]]:
    """Train the fixed-bitwidth network with Adam and step decay.

    Returns the trained copy of ``init`` and the dataset accuracy before
    training followed by the accuracy after each epoch.
    """
    check_policy(init, policy)
    params = init.clone()
    for t in params.tensors():
        t.requires_grad = True
    hook = policy_hook(params, policy, act_max)
    opt = Adam([(params.tensors(), lr)])
    rng = np.random.default_rng(seed)
    trace = [accuracy(params, dataset, hook)]
    for epoch in range(epochs):
        opt.set_lr(0, lr_at(epoch, epochs, lr))
        for xb, yb in dataset.batches(batch_size, rng):
            logits, _ = forward(params, xb, hook)
            loss = ad.softmax_cross_entropy(logits, yb)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        trace.append(accuracy(params, dataset, hook))
    opt.zero_grad()
    return params, trace


@dataclass
class EvalResult:
    accuracy: float
    mean_ard: float
    bops: float
    ards: np.ndarray = field(repr=False)
    maps_q: np.ndarray = field(repr=False)
    maps_f: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "mean_ard": self.mean_ard, "bops": self.bops}


def attribution_maps(
    params: ModelParams, images: np.ndarray, labels: np.ndarray, policy: QuantPolicy | None = None, act_max: float = 4.0, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and label-conditioned Grad-CAM maps for a full-precision (``policy=None``) or quantized network."""
    net = frozen(params)
    hook = None if policy is None else policy_hook(net, policy, act_max)
    logits, maps = [], []
    for s in range(0, images.shape[0], batch_size):
        lg, tap = forward(net, images[s : s + batch_size], hook)
        logits.append(lg.data)
        maps.append(gradcam(net, tap, labels[s : s + batch_size]).data)
    return np.concatenate(logits), np.concatenate(maps)


def evaluate(
    params: ModelParams,
    policy: QuantPolicy | None,
    dataset: Dataset,
    fp_reference: ModelParams,
    k: int = 100,
    act_max: float = 4.0,
) -> EvalResult:
    """Top-1 accuracy, mean rank distance to the reference's attribution, and deterministic BOPs."""
    logits, maps_q = attribution_maps(params, dataset.images, dataset.labels, policy, act_max)
    _, maps_f = attribution_maps(fp_reference, dataset.images, dataset.labels)
    acc = float((logits.argmax(axis=1) == dataset.labels).mean()) if len(dataset) else 0.0
    ards = ard_batch(maps_q, maps_f, k) if len(dataset) else np.zeros(0)
    if policy is None:
        bops = 32.0 * 32.0 * sum(params.macs()[i] for i in params.conv_layers)
    else:
        bops = policy_bops(policy, params.macs())
    return EvalResult(acc, float(ards.mean()) if ards.size else 0.0, bops, ards, maps_q, maps_f)


def policy_capacity_p(policy: QuantPolicy, config: SearchConfig) -> float:
    return policy_p(policy.w_bits, policy.a_bits, config.qw0, config.qa0)
