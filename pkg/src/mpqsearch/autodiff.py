"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that maps the output gradient to parent gradients.  ``backward``
topologically sorts the reachable graph from a scalar root and visits each
recorded operation exactly once, in reverse order.

Only the primitives the search engine needs are provided.  There is no
general broadcasting; the one exception is the channel bias add inside
:func:`conv2d` / :func:`linear`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "relu",
    "sum",
    "mean",
    "matmul",
    "linear",
    "conv2d",
    "maxpool2x2",
    "global_avg_pool",
    "softmax",
    "softmax_cross_entropy",
    "weighted_sum",
    "weighted_channel_sum",
    "reshape",
    "take_rows",
    "gather_cols",
    "normalize_rows",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """A float64 array that can participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> None:
        """Keep this (non-leaf) tensor's gradient after ``backward``."""
        self._retain = True

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % a.data.ndim

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), fn, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows ``a[index]`` (rows may repeat; gradients scatter-add)."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), fn, "take_rows")


def gather_cols(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather on an ``N x M`` tensor: ``out[n, k] = a[n, index[n, k]]``."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ValueError(f"gather_cols: incompatible shapes {a.shape} and {index.shape}")
    shape = a.shape
    rows = np.arange(shape[0])[:, None]

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, (np.broadcast_to(rows, index.shape), index), g)
        return (out,)

    return _make(a.data[rows, index], (a,), fn, "gather_cols")


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row of an ``N x K`` tensor by its sum.  Zero-sum rows map to zero."""
    if a.data.ndim != 2:
        raise ValueError(f"normalize_rows expects a 2-d tensor, got {a.shape}")
    s = a.data.sum(axis=1, keepdims=True)
    ok = s != 0
    safe = np.where(ok, s, 1.0)
    y = np.where(ok, a.data / safe, 0.0)

    def fn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (np.where(ok, (g - inner) / safe, 0.0),)

    return _make(y, (a,), fn, "normalize_rows")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape N x in, ``weight`` out x in."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def fn(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, fn, "linear")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int, oh: int, ow: int):
    n, c, h, w = shape
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but kernel {kernel.shape} expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
        out = out + bias.data
        parents = (x, kernel, bias)
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = _col2im(gm @ wmat, x.shape, kh, kw, stride, padding, oh, ow) if x.requires_grad else None
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    return _make(np.ascontiguousarray(out), parents, fn, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise ValueError(f"maxpool2x2: input {x.shape} too small")
    win = x.data[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        sel = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(sel, arg[..., None], g[..., None], axis=-1)
        sel = sel.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        gx = np.zeros((n, c, h, w))
        gx[:, :, : 2 * oh, : 2 * ow] = sel
        return (gx,)

    return _make(out, (x,), fn, "maxpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def fn(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), fn, "global_avg_pool")


# ---------------------------------------------------------------------------
# softmax family and mixtures
# ---------------------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    y = _softmax_np(a.data)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), fn, "softmax")


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()
    p = np.exp(z - logsum[:, None])

    def fn(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), fn, "softmax_cross_entropy")


def weighted_sum(weights: Tensor, terms: Sequence[Tensor]) -> Tensor:
    """``sum_i weights[i] * terms[i]`` for a 1-d weight tensor and equal-shape terms."""
    if weights.data.ndim != 1 or weights.shape[0] != len(terms):
        raise ValueError(f"weighted_sum: {weights.shape} weights for {len(terms)} terms")
    shape = terms[0].shape
    for t in terms:
        _same_shape(terms[0], t, "weighted_sum")
    wd = weights.data
    out = np.zeros(shape)
    for wi, t in zip(wd, terms):
        out += wi * t.data

    def fn(g):
        gw = np.array([np.vdot(g, t.data) for t in terms])
        return [gw] + [g * wi for wi in wd]

    return _make(out, (weights, *terms), fn, "weighted_sum")


def weighted_channel_sum(alpha: Tensor, feats: Tensor) -> Tensor:
    """``out[n] = sum_c alpha[n, c] * feats[n, c]`` for N x C weights and NCHW maps."""
    if alpha.data.ndim != 2 or feats.data.ndim != 4 or alpha.shape != feats.shape[:2]:
        raise ValueError(f"weighted_channel_sum: alpha {alpha.shape} vs features {feats.shape}")
    ad, fd = alpha.data, feats.data
    out = np.einsum("nc,nchw->nhw", ad, fd)

    def fn(g):
        return (np.einsum("nhw,nchw->nc", g, fd), ad[:, :, None, None] * g[:, None, :, :])

    return _make(out, (alpha, feats), fn, "weighted_channel_sum")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d t`` into ``t.grad`` for every reachable tensor needing it."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def finite_diff_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative gap between the analytic gradient of ``f()`` w.r.t. ``x`` and central differences.

    ``f`` must rebuild its graph from ``x`` on every call.  The relative gap is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x.requires_grad = True
    x.grad = None
    root = f()
    backward(root)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f().item()
        flat[i] = orig - h
        lo = f().item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    gap = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(gap.max()) if gap.size else 0.0
