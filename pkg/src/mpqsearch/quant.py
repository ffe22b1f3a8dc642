"""Uniform fake quantization, branch mixing, compositional convolution and policies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _make
from .model import ConvHook, ModelParams


@dataclass
class BitwidthSpace:
    """Candidate bitwidths per quantized layer.  ``layers`` holds model layer indices."""

    layers: list[int]
    w_bits: list[tuple[int, ...]]
    a_bits: list[tuple[int, ...]]

    def __post_init__(self):
        if not (len(self.layers) == len(self.w_bits) == len(self.a_bits)):
            raise ValueError("layers, w_bits and a_bits must have equal length")
        self.w_bits = [tuple(int(b) for b in bits) for bits in self.w_bits]
        self.a_bits = [tuple(int(b) for b in bits) for bits in self.a_bits]
        for bits in self.w_bits + self.a_bits:
            if not bits:
                raise ValueError("empty bitwidth candidate list")
            if min(bits) < 2:
                raise ValueError(f"bitwidths must be >= 2, got {bits}")
            if any(b >= c for b, c in zip(bits, bits[1:])):
                raise ValueError(f"bitwidth candidates must be strictly increasing, got {bits}")

    @classmethod
    def uniform(cls, layers: Sequence[int], w_bits: Sequence[int], a_bits: Sequence[int]) -> "BitwidthSpace":
        layers = list(layers)
        return cls(layers, [tuple(w_bits)] * len(layers), [tuple(a_bits)] * len(layers))

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class BranchImportance:
    """Free logits whose softmax gives the branch importances of each layer."""

    w_logits: list[Tensor]
    a_logits: list[Tensor]

    @classmethod
    def zeros(cls, space: BitwidthSpace) -> "BranchImportance":
        return cls(
            [Tensor(np.zeros(len(b)), True) for b in space.w_bits],
            [Tensor(np.zeros(len(b)), True) for b in space.a_bits],
        )

    def tensors(self) -> list[Tensor]:
        return self.w_logits + self.a_logits

    def clone(self) -> "BranchImportance":
        return BranchImportance(
            [Tensor(t.data.copy(), True) for t in self.w_logits],
            [Tensor(t.data.copy(), True) for t in self.a_logits],
        )

    def pi_w(self, k: int) -> np.ndarray:
        return ad._softmax_np(self.w_logits[k].data)

    def pi_a(self, k: int) -> np.ndarray:
        return ad._softmax_np(self.a_logits[k].data)


@dataclass
class QuantPolicy:
    layers: list[int]
    w_bits: list[int]
    a_bits: list[int]
    meta: dict = field(default_factory=dict)

    def pairs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.layers, self.w_bits, self.a_bits))

    def to_json(self) -> str:
        doc = {
            "layers": [{"index": i, "w_bits": w, "a_bits": a} for i, w, a in self.pairs()],
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QuantPolicy":
        doc = json.loads(text)
        rows = doc["layers"]
        return cls(
            [int(r["index"]) for r in rows],
            [int(r["w_bits"]) for r in rows],
            [int(r["a_bits"]) for r in rows],
            doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "QuantPolicy":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# quantizer
# ---------------------------------------------------------------------------


def _check_bits(bits: int) -> None:
    if int(bits) != bits or bits < 2:
        raise ValueError(f"bitwidth must be an integer >= 2, got {bits}")


def quantize_np(x: np.ndarray, bits: int, lo: float, hi: float) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and snap to the nearest of ``2**bits`` uniform levels (ties to even index)."""
    _check_bits(bits)
    if not lo < hi:
        raise ValueError(f"quantization range must satisfy lo < hi, got [{lo}, {hi}]")
    n = (1 << int(bits)) - 1
    idx = np.rint((np.clip(x, lo, hi) - lo) * (n / (hi - lo)))
    # convex-combination form keeps both endpoints exact
    return (lo * (n - idx) + hi * idx) / n


def ste_grad(x, lo: float, hi: float) -> np.ndarray:
    """Clipped straight-through mask: 1 inside ``[lo, hi]``, 0 outside."""
    x = np.asarray(x, dtype=np.float64)
    return ((x >= lo) & (x <= hi)).astype(np.float64)


def quantize_uniform(x: Tensor, bits: int, lo: float, hi: float) -> Tensor:
    """Fake-quantize with the clipped straight-through gradient."""
    lo, hi = float(lo), float(hi)
    out = quantize_np(x.data, bits, lo, hi)
    mask = ste_grad(x.data, lo, hi)
    return _make(out, (x,), lambda g: (g * mask,), "quantize")


def weight_range(w: np.ndarray) -> tuple[float, float]:
    r = float(np.abs(w).max()) if w.size else 0.0
    if r == 0.0:
        r = 1.0
    return -r, r


# ---------------------------------------------------------------------------
# branch composition
# ---------------------------------------------------------------------------


def branch_activation_mix(a: Tensor, logits_a: Tensor, bits: Sequence[int], act_range: tuple[float, float]) -> Tensor:
    """``sum_j softmax(logits_a)_j * quantize(a, bits_j)``."""
    if logits_a.shape != (len(bits),):
        raise ValueError(f"{logits_a.shape} activation logits for {len(bits)} candidate bitwidths")
    lo, hi = act_range
    return ad.weighted_sum(ad.softmax(logits_a), [quantize_uniform(a, b, lo, hi) for b in bits])


def mixed_weight(weight: Tensor, logits_w: Tensor, bits: Sequence[int], w_range: tuple[float, float]) -> Tensor:
    if logits_w.shape != (len(bits),):
        raise ValueError(f"{logits_w.shape} weight logits for {len(bits)} candidate bitwidths")
    lo, hi = w_range
    return ad.weighted_sum(ad.softmax(logits_w), [quantize_uniform(weight, b, lo, hi) for b in bits])


def composed_conv(
    input_mixed: Tensor,
    weight: Tensor,
    logits_w: Tensor,
    bits: Sequence[int],
    w_range: tuple[float, float],
    stride: int = 1,
    padding: int = 0,
    bias: Tensor | None = None,
) -> Tensor:
    """One convolution with the importance-weighted sum of quantized kernels.

    Convolution is linear in the kernel, so this equals the weighted sum of
    per-branch convolutions.
    """
    return ad.conv2d(input_mixed, mixed_weight(weight, logits_w, bits, w_range), bias, stride, padding)


def expected_bitwidth(logits, bits: Sequence[int]) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.shape != (len(bits),):
        raise ValueError(f"{z.shape} logits for {len(bits)} bitwidths")
    return float(ad._softmax_np(z) @ np.asarray(bits, dtype=np.float64))


def expected_bitwidth_t(logits: Tensor, bits: Sequence[int]) -> Tensor:
    """Differentiable ``dot(softmax(logits), bits)``."""
    b = Tensor(np.asarray(bits, dtype=np.float64))
    return ad.sum(ad.mul(ad.softmax(logits), b))


def extract_policy(importance: BranchImportance, space: BitwidthSpace, meta: dict | None = None) -> QuantPolicy:
    """Per-layer argmax branch; ties go to the lower bitwidth (first candidate)."""
    w_sel = [space.w_bits[k][int(np.argmax(importance.w_logits[k].data))] for k in range(len(space))]
    a_sel = [space.a_bits[k][int(np.argmax(importance.a_logits[k].data))] for k in range(len(space))]
    return QuantPolicy(list(space.layers), w_sel, a_sel, dict(meta or {}))


# ---------------------------------------------------------------------------
# forward-pass hooks
# ---------------------------------------------------------------------------


def activation_range(params: ModelParams, layer: int, act_max: float) -> tuple[float, float]:
    """Network input is signed; every later conv input follows a ReLU."""
    return (-act_max, act_max) if layer == params.conv_layers[0] else (0.0, act_max)


def hypernet_hook(params: ModelParams, space: BitwidthSpace, importance: BranchImportance, act_max: float) -> ConvHook:
    """Conv hook realising the branch-mixed forward pass of every searched layer."""
    pos = {layer: k for k, layer in enumerate(space.layers)}

    def hook(i: int, x: Tensor, w: Tensor):
        k = pos.get(i)
        if k is None:
            return x, w
        xm = branch_activation_mix(x, importance.a_logits[k], space.a_bits[k], activation_range(params, i, act_max))
        wm = mixed_weight(w, importance.w_logits[k], space.w_bits[k], weight_range(w.data))
        return xm, wm

    return hook


def policy_hook(params: ModelParams, policy: QuantPolicy, act_max: float) -> ConvHook:
    """Conv hook for a fixed-bitwidth network."""
    table = {i: (wb, ab) for i, wb, ab in policy.pairs()}

    def hook(i: int, x: Tensor, w: Tensor):
        if i not in table:
            return x, w
        wb, ab = table[i]
        lo, hi = activation_range(params, i, act_max)
        wlo, whi = weight_range(w.data)
        return quantize_uniform(x, ab, lo, hi), quantize_uniform(w, wb, wlo, whi)

    return hook


def check_policy(params: ModelParams, policy: QuantPolicy) -> None:
    convs = set(params.conv_layers)
    bad = [i for i in policy.layers if i not in convs]
    if bad:
        raise ValueError(f"policy layers {bad} are not conv layers of the model ({format(sorted(convs))})")


def policy_bops(policy: QuantPolicy, macs: dict[int, int]) -> float:
    return float(sum(w * a * macs[i] for i, w, a in policy.pairs()))
