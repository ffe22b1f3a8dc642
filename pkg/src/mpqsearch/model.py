"""Small sequential CNNs: layer specs, parameters, forward pass, training, checkpoints."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .optim import SGD

KINDS = ("conv", "relu", "maxpool", "globalavgpool", "linear")
CKPT_MAGIC = b"MPQCKPT1"

# hypernet/quantized forward passes swap a conv layer's (input, kernel) pair
ConvHook = Callable[[int, Tensor, Tensor], tuple[Tensor, Tensor]]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "linear") and self.out <= 0:
            raise ValueError(f"{self.kind} needs a positive output size")
        if self.kind == "conv" and (self.kernel <= 0 or self.stride <= 0 or self.padding < 0):
            raise ValueError(f"bad conv geometry {self}")

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"conv{self.out}x{self.kernel}s{self.stride}p{self.padding}"
        if self.kind == "linear":
            return f"linear{self.out}"
        return {"globalavgpool": "gap"}.get(self.kind, self.kind)


_CONV_RE = re.compile(r"^conv(\d+)x(\d+)(?:s(\d+))?(?:p(\d+))?$")
_LINEAR_RE = re.compile(r"^linear(\d+)?$")


def parse_layers(text: str, classes: int) -> list[LayerSpec]:
    """Parse ``"conv16x3 relu maxpool ... gap linear"`` (commas or spaces).

    ``convOxK[sS][pP]`` defaults to stride 1 and same padding ``K // 2``;
    a bare ``linear`` maps to the class count.
    """
    specs = []
    for tok in re.split(r"[\s,]+", text.strip()):
        if not tok:
            continue
        if m := _CONV_RE.match(tok):
            k = int(m[2])
            specs.append(
                LayerSpec("conv", int(m[1]), k, int(m[3] or 1), int(m[4]) if m[4] is not None else k // 2)
            )
        elif m := _LINEAR_RE.match(tok):
            specs.append(LayerSpec("linear", int(m[1]) if m[1] else classes))
        elif tok in ("relu", "maxpool"):
            specs.append(LayerSpec(tok))
        elif tok in ("gap", "globalavgpool"):
            specs.append(LayerSpec("globalavgpool"))
        else:
            raise ValueError(f"cannot parse layer token {tok!r}")
    return specs


def format_layers(specs: Sequence[LayerSpec]) -> str:
    return " ".join(str(s) for s in specs)


def layer_shapes(specs: Sequence[LayerSpec], in_shape: Sequence[int], classes: int) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises naming the offending pair on bad composition."""
    if not specs:
        raise ValueError("empty layer list")
    gaps = [i for i, s in enumerate(specs) if s.kind == "globalavgpool"]
    if len(gaps) != 1:
        raise ValueError(f"exactly one globalavgpool required, found {len(gaps)}")
    g = gaps[0]
    for i in range(g + 1, len(specs)):
        if specs[i].kind != "linear":
            raise ValueError(f"only linear layers may follow globalavgpool: ({specs[g]}, {specs[i]})")
    if g + 1 == len(specs):
        raise ValueError("a linear classifier must follow globalavgpool")
    if specs[-1].out != classes:
        raise ValueError(f"final layer {specs[-1]} must produce {classes} outputs")
    convs_before = [i for i in range(g) if specs[i].kind == "conv"]
    if not convs_before:
        raise ValueError("at least one conv layer must precede globalavgpool")

    shape: tuple[int, ...] = tuple(int(v) for v in in_shape)
    out = []
    prev = "input"
    for s in specs:
        if s.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"({prev}, {s}): conv needs a C x H x W input, got {shape}")
            c, h, w = shape
            oh = (h + 2 * s.padding - s.kernel) // s.stride + 1
            ow = (w + 2 * s.padding - s.kernel) // s.stride + 1
            if oh <= 0 or ow <= 0:
                raise ValueError(f"({prev}, {s}): spatial size {h}x{w} too small")
            shape = (s.out, oh, ow)
        elif s.kind == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ValueError(f"({prev}, {s}): cannot pool shape {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif s.kind == "globalavgpool":
            if len(shape) != 3:
                raise ValueError(f"({prev}, {s}): needs a C x H x W input, got {shape}")
            shape = (shape[0],)
        elif s.kind == "linear":
            if len(shape) != 1:
                raise ValueError(f"({prev}, {s}): linear needs a flat input, got {shape}")
            shape = (s.out,)
        out.append(shape)
        prev = str(s)
    return out


@dataclass
class ModelParams:
    specs: list[LayerSpec]
    in_shape: tuple[int, int, int]
    classes: int
    weights: list[Tensor | None]
    biases: list[Tensor | None]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def gap_index(self) -> int:
        return next(i for i, s in enumerate(self.specs) if s.kind == "globalavgpool")

    @property
    def last_conv(self) -> int:
        return max(i for i in range(self.gap_index) if self.specs[i].kind == "conv")

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind == "conv"]

    @property
    def head_layers(self) -> list[int]:
        return list(range(self.gap_index + 1, len(self.specs)))

    def tensors(self) -> list[Tensor]:
        """All parameter tensors in declaration order (layer order, weight before bias)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.append(w)
            if b is not None:
                out.append(b)
        return out

    def clone(self) -> "ModelParams":
        return ModelParams(
            list(self.specs),
            self.in_shape,
            self.classes,
            [None if w is None else Tensor(w.data.copy(), w.requires_grad) for w in self.weights],
            [None if b is None else Tensor(b.data.copy(), b.requires_grad) for b in self.biases],
            self.seed,
            dict(self.meta),
        )

    def macs(self) -> dict[int, int]:
        """Multiply-accumulate count per conv/linear layer index."""
        shapes = layer_shapes(self.specs, self.in_shape, self.classes)
        out = {}
        prev = tuple(self.in_shape)
        for i, (s, shp) in enumerate(zip(self.specs, shapes)):
            if s.kind == "conv":
                out[i] = s.out * prev[0] * s.kernel * s.kernel * shp[1] * shp[2]
            elif s.kind == "linear":
                out[i] = s.out * prev[0]
            prev = shp
        return out

    def tap_shape(self) -> tuple[int, int, int]:
        shapes = layer_shapes(self.specs, self.in_shape, self.classes)
        return shapes[self.gap_index - 1]


def build_model(specs: Sequence[LayerSpec], in_shape: Sequence[int], classes: int, seed: int = 0) -> ModelParams:
    """Uniform He-style init in ``+-sqrt(6 / fan_in)``; zero biases."""
    specs = list(specs)
    shapes = layer_shapes(specs, in_shape, classes)
    rng = np.random.default_rng(seed)
    weights: list[Tensor | None] = []
    biases: list[Tensor | None] = []
    prev = tuple(in_shape)
    for s, shp in zip(specs, shapes):
        if s.kind == "conv":
            fan_in = prev[0] * s.kernel * s.kernel
            bound = np.sqrt(6.0 / fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (s.out, prev[0], s.kernel, s.kernel)), True))
            biases.append(Tensor(np.zeros(s.out), True))
        elif s.kind == "linear":
            bound = np.sqrt(6.0 / prev[0])
            weights.append(Tensor(rng.uniform(-bound, bound, (s.out, prev[0])), True))
            biases.append(Tensor(np.zeros(s.out), True))
        else:
            weights.append(None)
            biases.append(None)
        prev = shp
    return ModelParams(specs, tuple(int(v) for v in in_shape), classes, weights, biases, seed)


def forward(params: ModelParams, batch, conv_hook: ConvHook | None = None) -> tuple[Tensor, Tensor]:
    """Run the network and return ``(logits, tap)``.

    ``tap`` is the feature map entering the global average pool, i.e. the
    activation of the last convolutional stage used for attribution.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != tuple(params.in_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input {params.in_shape}")
    tap = None
    for i, s in enumerate(params.specs):
        if s.kind == "conv":
            xin, kern = (x, params.weights[i]) if conv_hook is None else conv_hook(i, x, params.weights[i])
            x = ad.conv2d(xin, kern, params.biases[i], s.stride, s.padding)
        elif s.kind == "relu":
            x = ad.relu(x)
        elif s.kind == "maxpool":
            x = ad.maxpool2x2(x)
        elif s.kind == "globalavgpool":
            tap = x
            x = ad.global_avg_pool(x)
        else:
            x = ad.linear(x, params.weights[i], params.biases[i])
    return x, tap


def forward_fp(params: ModelParams, batch) -> tuple[Tensor, Tensor]:
    return forward(params, batch)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256, conv_hook: ConvHook | None = None) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = forward(params, images[start : start + batch_size], conv_hook)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, params.classes))


def accuracy(params: ModelParams, dataset: Dataset, conv_hook: ConvHook | None = None) -> float:
    if len(dataset) == 0:
        return 0.0
    pred = predict(params, dataset.images, conv_hook=conv_hook).argmax(axis=1)
    return float((pred == dataset.labels).mean())


def train_fp_reference(
    params: ModelParams,
    dataset: Dataset,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
) -> tuple[ModelParams, list[float]]:
    """Minibatch SGD with momentum on softmax cross-entropy.  Returns a trained copy and per-epoch mean loss."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = params.clone()
    opt = SGD(params.tensors(), lr, momentum)
    rng = np.random.default_rng(seed)
    trace = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for xb, yb in dataset.batches(batch_size, rng):
            logits, _ = forward(params, xb)
            loss = ad.softmax_cross_entropy(logits, yb)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(yb)
            count += len(yb)
        trace.append(total / count)
    opt.zero_grad()
    return params, trace


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """``MPQCKPT1`` + u32 metadata length + UTF-8 JSON metadata + LE float64 tensors in declaration order."""
    meta = {
        "layers": [asdict(s) for s in params.specs],
        "in_shape": list(params.in_shape),
        "classes": params.classes,
        "seed": params.seed,
        "meta": params.meta,
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for t in params.tensors():
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (n,) = struct.unpack_from("<I", raw, 8)
    meta = json.loads(raw[12 : 12 + n].decode("utf-8"))
    specs = [LayerSpec(**d) for d in meta["layers"]]
    params = build_model(specs, meta["in_shape"], meta["classes"], meta["seed"])
    params.meta = meta.get("meta", {})
    off = 12 + n
    for t in params.tensors():
        count = t.size
        t.data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(t.shape)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return params
