"""Reverse-mode automatic differentiation on numpy buffers.

A ``Tensor`` wraps an ndarray together with an optional gradient buffer and a
closure that scatters incoming gradients to its parents.  Graphs are built
eagerly by the op functions below and swept once by :func:`backward`.

Compute dtype defaults to float32; wrap code in ``with precision("float64")``
to build a graph in float64 (used by the finite-difference gradient tests).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError, ValidationError

_DTYPE = np.float32
_NAN_CHECKS = False


def current_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextmanager
def precision(dtype):
    """Temporarily switch the compute dtype for newly created tensors."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextmanager
def nan_checks(enabled: bool = True):
    """Assert finiteness of every op output while the context is active."""
    global _NAN_CHECKS
    old = _NAN_CHECKS
    _NAN_CHECKS = enabled
    try:
        yield
    finally:
        _NAN_CHECKS = old


class Tensor:
    """Node of the computation graph.

    ``grad`` is lazily allocated and accumulated with ``+=``; calling
    :func:`backward` twice without zeroing doubles the gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name
        if _NAN_CHECKS and not np.all(np.isfinite(self.data)):
            raise ValidationError(f"non-finite values in tensor {name or '<unnamed>'}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward_fn, name=""):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward=backward_fn if req else None, name=name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor):
    """Reverse topological sweep from a scalar root, accumulating gradients."""
    if root.data.size != 1:
        raise UsageError("backward() requires a scalar root tensor")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    if root.grad is None:
        root.grad = np.zeros_like(root.data)
    root.grad += np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw, "mul")


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)
    out_data = a.data * s

    def bw(g):
        _accumulate(a, g * s)

    return _make(out_data, (a,), bw, "scale")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0)

    def bw(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), bw, "relu")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw, "tanh")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), bw, "softmax")


def matmul(a, b) -> Tensor:
    """Matrix product: a is (m, k) or (..., m, k); b is (k, n)."""
    a, b = _lift(a), _lift(b)
    if b.ndim != 2 or a.ndim < 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        ga = a.data.reshape(-1, a.data.shape[-1])
        gg = g.reshape(-1, g.shape[-1])
        _accumulate(b, ga.T @ gg)

    return _make(out_data, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(out_data, (a,), bw, "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out_data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out_data, tuple(ts), bw, "stack")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _lift(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accumulate(a, full)

    return _make(out_data, (a,), bw, "slice")


def take_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatters back with accumulation."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _make(out_data, (a,), bw, "take_rows")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = a.data.size
    elif isinstance(axis, tuple):
        denom = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        denom = a.data.shape[axis]

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / denom, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / denom, a.data.shape).copy())

    return _make(out_data, (a,), bw, "mean")


def bias_add(x, b, axis: int = -1) -> Tensor:
    """Add a 1-D bias along `axis` of x."""
    x, b = _lift(x), _lift(b)
    if b.ndim != 1 or x.data.shape[axis] != b.data.shape[0]:
        raise ShapeError(f"bias_add: bias {b.data.shape} does not fit axis {axis} of {x.data.shape}")
    shape = [1] * x.ndim
    shape[axis] = b.data.shape[0]
    out_data = x.data + b.data.reshape(shape)

    def bw(g):
        _accumulate(x, g)
        reduce_axes = tuple(i for i in range(g.ndim) if i != axis % g.ndim)
        _accumulate(b, g.sum(axis=reduce_axes))

    return _make(out_data, (x, b), bw, "bias_add")


def dropout(a, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when train is False or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    a = _lift(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in train mode needs an explicit rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    mask = mask.astype(a.data.dtype)
    out_data = a.data * mask

    def bw(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), bw, "dropout")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W); w: (O, C, kh, kw)."""
    x, w = _lift(x), _lift(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes x={x.data.shape} w={w.data.shape}")
    kh, kw = w.data.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    Hp, Wp = xp.shape[2:]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} smaller than kernel {kh}x{kw}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out_data = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    Ho, Wo = out_data.shape[2:]

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += \
                        np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
            if ph or pw:
                dxp = dxp[:, :, ph:Hp - ph, pw:Wp - pw]
            _accumulate(x, dxp)

    return _make(out_data, (x, w), bw, "conv2d")


def conv2d_transpose(x, w, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed 2-D convolution (adjoint of conv2d).

    x: (N, C, H, W); w: (C, O, kh, kw).  Output spatial size is
    (H - 1) * stride - 2 * padding + kernel + output_padding.
    """
    x, w = _lift(x), _lift(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if x.ndim != 4 or w.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"conv2d_transpose: incompatible shapes x={x.data.shape} w={w.data.shape}")
    if not (0 <= oph < sh and 0 <= opw < sw):
        raise ValidationError("output_padding must satisfy 0 <= op < stride")
    kh, kw = w.data.shape[2:]
    N, C, H, W = x.data.shape
    O = w.data.shape[1]
    full_h = (H - 1) * sh + kh + oph
    full_w = (W - 1) * sw + kw + opw
    out_h = full_h - 2 * ph
    out_w = full_w - 2 * pw
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("conv2d_transpose: padding consumes the whole output")
    ypad = np.zeros((N, O, full_h, full_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            ypad[:, :, i:i + sh * (H - 1) + 1:sh, j:j + sw * (W - 1) + 1:sw] += \
                np.einsum("nchw,co->nohw", x.data, w.data[:, :, i, j], optimize=True)
    out_data = ypad[:, :, ph:ph + out_h, pw:pw + out_w]

    def bw(g):
        gp = np.zeros((N, O, full_h, full_w), dtype=g.dtype)
        gp[:, :, ph:ph + out_h, pw:pw + out_w] = g
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    sl = gp[:, :, i:i + sh * (H - 1) + 1:sh, j:j + sw * (W - 1) + 1:sw]
                    dx += np.einsum("nohw,co->nchw", sl, w.data[:, :, i, j], optimize=True)
            _accumulate(x, dx)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = gp[:, :, i:i + sh * (H - 1) + 1:sh, j:j + sw * (W - 1) + 1:sw]
                    dw[:, :, i, j] = np.einsum("nchw,nohw->co", x.data, sl, optimize=True)
            _accumulate(w, dw)

    return _make(out_data.copy(), (x, w), bw, "conv2d_transpose")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -sum(targets * log softmax(logits)).

    Targets are constants (soft labels allowed); each row must sum to 1
    within 1e-5.
    """
    logits = _lift(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if logits.ndim != 2 or t.shape != logits.data.shape:
        raise ShapeError(f"cross entropy: targets {t.shape} vs logits {logits.data.shape}")
    row_sums = t.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ValidationError("cross entropy targets must sum to 1 per row")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    n = x.shape[0]
    out_data = np.asarray((lse.squeeze(-1) - (t * x).sum(axis=-1)).mean(), dtype=x.dtype)

    def bw(g):
        p = np.exp(x - lse)
        _accumulate(logits, (p - t) * (g / n))

    return _make(out_data, (logits,), bw, "softmax_ce")


def mse(x, x_hat) -> Tensor:
    """Mean squared error over all cells."""
    x, x_hat = _lift(x), _lift(x_hat)
    if x.data.shape != x_hat.data.shape:
        raise ShapeError(f"mse: {x.data.shape} vs {x_hat.data.shape}")
    diff = x.data - x_hat.data
    out_data = np.asarray((diff * diff).mean(), dtype=x.data.dtype)
    n = diff.size

    def bw(g):
        _accumulate(x, g * 2.0 * diff / n)
        _accumulate(x_hat, g * (-2.0) * diff / n)

    return _make(out_data, (x, x_hat), bw, "mse")


def center_loss(features, labels, centers) -> Tensor:
    """Batch-mean squared distance of deep features to their class centers.

    ``centers`` (k, d) is non-graph state; gradients flow to features only.
    """
    features = _lift(features)
    labels = np.asarray(labels, dtype=np.int64)
    centers = np.asarray(centers, dtype=features.data.dtype)
    if labels.ndim != 1 or features.ndim != 2 or features.data.shape[0] != labels.shape[0]:
        raise ShapeError("center_loss: features must be (n, d) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= centers.shape[0]):
        raise ValidationError("center_loss: label out of range")
    diff = features.data - centers[labels]
    n = max(1, labels.shape[0])
    out_data = np.asarray((diff * diff).sum() / n, dtype=features.data.dtype)

    def bw(g):
        _accumulate(features, g * 2.0 * diff / n)

    return _make(out_data, (features,), bw, "center_loss")


def center_deltas(features: np.ndarray, labels: np.ndarray, centers: np.ndarray,
                  alpha: float) -> np.ndarray:
    """Moving-average center update: dc_j = alpha * sum_{i: y_i = j}(f_i - c_j) / (1 + n_j)."""
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    deltas = np.zeros_like(centers)
    for j in np.unique(labels):
        sel = features[labels == j]
        deltas[j] = alpha * (sel - centers[j]).sum(axis=0) / (1.0 + sel.shape[0])
    return deltas


# ---------------------------------------------------------------------------
# recurrent layers
# ---------------------------------------------------------------------------

def lstm(x, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False):
    """Single-direction LSTM over a (N, T, D) sequence.

    Weights: w_x (D, 4U), w_h (U, 4U), b (4U,) with gate order i, f, g, o.
    Returns (outputs (N, T, U), final hidden state (N, U)).
    """
    x = _lift(x)
    if x.ndim != 3:
        raise ShapeError(f"lstm expects (N, T, D), got {x.data.shape}")
    n, t_steps, d = x.data.shape
    units = w_h.data.shape[0]
    h = Tensor(np.zeros((n, units), dtype=x.data.dtype))
    c = Tensor(np.zeros((n, units), dtype=x.data.dtype))
    order = range(t_steps - 1, -1, -1) if reverse else range(t_steps)
    outputs: list[Tensor | None] = [None] * t_steps
    for t in order:
        xt = reshape(slice_axis(x, 1, t, t + 1), (n, d))
        gates = bias_add(add(matmul(xt, w_x), matmul(h, w_h)), b)
        i_g = sigmoid(slice_axis(gates, 1, 0, units))
        f_g = sigmoid(slice_axis(gates, 1, units, 2 * units))
        g_g = tanh(slice_axis(gates, 1, 2 * units, 3 * units))
        o_g = sigmoid(slice_axis(gates, 1, 3 * units, 4 * units))
        c = add(mul(f_g, c), mul(i_g, g_g))
        h = mul(o_g, tanh(c))
        outputs[t] = h
    return stack(outputs, axis=1), h


def bilstm(x, fwd_params, bwd_params):
    """Bidirectional LSTM; concatenates per-step outputs of both directions.

    Each params triple is (w_x, w_h, b).  Returns (seq (N, T, 2U),
    final-state concat (N, 2U)).
    """
    out_f, last_f = lstm(x, *fwd_params, reverse=False)
    out_b, last_b = lstm(x, *bwd_params, reverse=True)
    return concat([out_f, out_b], axis=2), concat([last_f, last_b], axis=1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter Adam moments plus the shared step count and learning rate."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValidationError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_arrays(self, names: Iterable[str]) -> dict[str, np.ndarray]:
        out = {}
        for name in names:
            if name in self.m:
                out[f"adam.m.{name}"] = self.m[name]
                out[f"adam.v.{name}"] = self.v[name]
        return out


def adam_step(params: dict[str, Tensor], state: AdamState,
              allowed: set[str] | None = None):
    """Bias-corrected Adam update in place; `allowed` restricts the updated set."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if allowed is not None and name not in allowed:
            continue
        if p.grad is None:
            raise UsageError(f"adam_step: parameter {name} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def glorot_uniform(shape, rng: np.random.Generator, fan_in=None, fan_out=None) -> np.ndarray:
    if fan_in is None or fan_out is None:
        if len(shape) == 2:
            fan_in, fan_out = shape
        elif len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in = fan_out = int(np.prod(shape))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(shape, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix init for recurrent weights (rows x cols)."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols]
