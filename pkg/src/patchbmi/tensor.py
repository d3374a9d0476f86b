"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input requires a gradient. Outside a tape every op is a plain
forward computation, which is how inference runs.

Layer ops accept either a single sample (``C,H,W`` / ``N_in``) or a batch with
a leading dimension; training uses the batched form.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "conv2d",
    "maxpool2d",
    "linear",
    "relu",
    "sigmoid",
    "dropout",
    "global_avg_pool",
    "reshape",
    "add",
    "sub",
    "mul",
    "square",
    "mean",
    "sum",
]


class Tensor:
    """N-dimensional array with an optional accumulated gradient.

    ``data`` is a numpy array (row-major); float inputs keep their dtype,
    everything else is stored as float32.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class GradTape:
    """Ordered record of differentiable ops from one forward pass.

    Nodes are appended as ops execute, so reverse order visits every consumer
    before its producer. A tape is single-owner; do not share it across
    threads.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradTape exited out of order")
        stack.pop()

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto existing ``.grad`` values; zero them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss is not connected to the tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in produced:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- layer ops


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects input (C,H,W) or (N,C,H,W) and weight "
                         f"(C_out,C_in,k,k); got {x.shape} and {weight.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, "
                         f"weight expects {c_in}")
    if kh != kw:
        raise ValueError(f"conv2d needs square kernels, got {kh}x{kw}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {h}x{w} (padding {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if single:
        out = out[0]
    out = np.ascontiguousarray(out)

    def vjp(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = gxp[0] if single else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, vjp)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    Backward routes the gradient to the first maximum of each window in
    row-major order.
    """
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    if x.ndim not in (3, 4):
        raise ValueError(f"maxpool2d expects (C,H,W) or (N,C,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    k = window
    if h % k or w % k:
        raise ValueError(f"maxpool2d needs spatial dims divisible by {k}, got {h}x{w}")
    # window offsets in row-major scan order
    offsets = [(i, j) for i in range(k) for j in range(k)]
    views = [x.data[..., i::k, j::k] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append(m)

    def vjp(g):
        gx = np.zeros_like(x.data)
        for (i, j), m in zip(offsets, masks):
            gx[..., i::k, j::k] = g * m
        return (gx,)

    return _record("maxpool2d", (x,), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``out[j] = sum_i weight[j, i] * x[i] (+ bias[j])``; x is (N_in,) or (B, N_in)."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, (gb if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", inputs, out, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return _record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (C,H,W) -> (C,), (N,C,H,W) -> (N,C)."""
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"global_avg_pool expects (C,H,W) or (N,C,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _record("global_avg_pool", (x,), out, vjp)


# ------------------------------------------------------------- generic ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _record("square", (x,), x.data * x.data, lambda g: (2 * g * x.data,))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _record("mean", (x,), out, lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _record("sum", (x,), out, lambda g: (np.full(x.shape, g, dtype=x.dtype),))
