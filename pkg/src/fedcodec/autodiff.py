"""Small define-by-run reverse-mode autodiff over numpy arrays.

Only the operations needed by the toy LoRA model and the autoencoder codecs
are provided. Every op records a node on the owning :class:`Graph`; calling
:meth:`Graph.backward` walks the tape in reverse.

Arrays are float64 in memory. Any op producing a non-finite value raises
:class:`NonFiniteError`.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Adam",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "conv1d",
    "conv2d",
    "conv_output_length",
    "conv_transpose1d",
    "conv_transpose2d",
    "conv_transpose_output_length",
    "cross_entropy",
    "matmul",
    "mean",
    "mse",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "sum",
    "transpose",
]


class GraphError(RuntimeError):
    """Misuse of the tape (backward before forward, non-scalar loss, ...)."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A node value on a :class:`Graph`."""

    __slots__ = ("data", "grad", "graph", "op", "parents", "requires_grad", "name", "_backward")

    def __init__(self, data, graph, op="const", parents=(), requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.graph = graph
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # operator sugar; constants are lifted onto the same graph
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(self.graph._lift(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Graph:
    """Tape of recorded operations.

    ``nodes`` is in creation order, which is a valid topological order since
    an op can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.params: Dict[str, Tensor] = {}
        self._ran_backward = False

    def _record(self, t: Tensor) -> Tensor:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite value produced by op {t.op!r}")
        self.nodes.append(t)
        return t

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise GraphError("tensor belongs to a different graph")
            return x
        return self.constant(x)

    def constant(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        return self._record(Tensor(arr, self, "const", name=name))

    def input(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        return self._record(Tensor(arr, self, "input", name=name))

    def param(self, name: str, value: ArrayLike) -> Tensor:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        t = self._record(Tensor(arr, self, "param", requires_grad=True, name=name))
        self.params[name] = t
        return t

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """Accumulate gradients of scalar ``loss`` into every upstream tensor.

        Returns ``{param_name: grad}`` for all parameters; parameters the loss
        does not depend on get zero gradients.
        """
        if not isinstance(loss, Tensor) or loss.graph is not self:
            raise GraphError("loss was not produced by a forward pass on this graph")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if self._ran_backward:
            raise GraphError("backward already ran on this graph; rebuild it")
        self._ran_backward = True

        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        stop = self.nodes.index(loss)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        out = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
            out[name] = g
        return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t.op not in ("const", "input")):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t.op not in ("const", "input")


def _node(graph: Graph, data, op, parents, backward: Callable[[np.ndarray], None]) -> Tensor:
    t = Tensor(data, graph, op, parents)
    if any(_needs(p) for p in parents):
        t._backward = backward
    else:
        # constant subgraph: behave like a constant for the tape walk
        t.op = "const"
    return graph._record(t)


def _binary_graph(a, b) -> Tuple[Graph, Tensor, Tensor]:
    if isinstance(a, Tensor):
        g = a.graph
    elif isinstance(b, Tensor):
        g = b.graph
    else:
        raise GraphError("at least one operand must be a Tensor")
    return g, g._lift(a), g._lift(b)


# --------------------------------------------------------------------- basic


def add(a, b) -> Tensor:
    g, a, b = _binary_graph(a, b)
    out = a.data + b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _node(g, out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    g, a, b = _binary_graph(a, b)
    out = a.data * b.data

    def backward(grad):
        if _needs(a):
            _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        if _needs(b):
            _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _node(g, out, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(grad):
        _accumulate(a, grad * c)

    return _node(a.graph, a.data * c, "scale", (a,), backward)


def matmul(a, b) -> Tensor:
    g, a, b = _binary_graph(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(grad):
        if _needs(a):
            _accumulate(a, grad @ b.data.T)
        if _needs(b):
            _accumulate(b, a.data.T @ grad)

    return _node(g, out, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(grad):
        _accumulate(a, grad.T)

    return _node(a.graph, a.data.T, "transpose", (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def backward(grad):
        _accumulate(a, grad.reshape(old))

    return _node(a.graph, a.data.reshape(tuple(shape)), "reshape", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(grad):
        _accumulate(a, grad * mask)

    return _node(a.graph, a.data * mask, "relu", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(grad):
        _accumulate(a, grad * s * (1.0 - s))

    return _node(a.graph, s, "sigmoid", (a,), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return _node(a.graph, np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences, as a graph node."""
    g, a, b = _binary_graph(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(grad):
        gd = grad * (2.0 / n) * diff
        if _needs(a):
            _accumulate(a, gd)
        if _needs(b):
            _accumulate(b, -gd)

    return _node(g, np.asarray(np.mean(diff * diff)), "mse", (a, b), backward)


def mse_loss(a: ArrayLike, b: ArrayLike) -> float:
    """Plain-array mean squared error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (n, k) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy expects (n, k) logits and (n,) labels, got {z.shape}, {labels.shape}")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(grad):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, grad * p / n)

    return _node(logits.graph, np.asarray(loss), "cross_entropy", (logits,), backward)


# ------------------------------------------------------------- convolutions


def conv_output_length(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_length(n: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv2d_forward(x, w, stride, padding):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = conv_output_length(x.shape[2], kh, sh, ph)
    wo = conv_output_length(x.shape[3], kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv kernel {(kh, kw)} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : ho * sh : sh, : wo * sw : sw]
    # win: (N, C, ho, wo, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, ho, wo, O)
    return out.transpose(0, 3, 1, 2), win, xp.shape


def _conv2d_backward_input(grad, w, xp_shape, stride, padding, out_hw):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2:]
    ho, wo = out_hw
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            # (N,O,ho,wo) x (O,C) -> (N,C,ho,wo)
            contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += contrib
    h, wd = xp_shape[2] - 2 * ph, xp_shape[3] - 2 * pw
    return dxp[:, :, ph : ph + h, pw : pw + wd]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw), b: (O,)."""
    g = x.graph
    w = g._lift(w)
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch x{x.shape} w{w.shape}")
    out, win, xp_shape = _conv2d_forward(x.data, w.data, stride, padding)
    parents = (x, w)
    if b is not None:
        b = g._lift(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    out_hw = out.shape[2:]

    def backward(grad):
        if _needs(w):
            _accumulate(w, np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and _needs(b):
            _accumulate(b, grad.sum(axis=(0, 2, 3)))
        if _needs(x):
            _accumulate(x, _conv2d_backward_input(grad, w.data, xp_shape, stride, padding, out_hw))

    return _node(g, np.ascontiguousarray(out), "conv2d", parents, backward)


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0, output_padding=0
) -> Tensor:
    """Transposed 2-D convolution. x: (N, Cin, H, W), w: (Cin, Cout, kh, kw)."""
    g = x.graph
    w = g._lift(w)
    (sh, sw), (ph, pw), (oph, opw) = _pair(stride), _pair(padding), _pair(output_padding)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d shape mismatch x{x.shape} w{w.shape}")
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    cout = w.shape[1]
    fh = (h - 1) * sh + kh + oph
    fw = (wd - 1) * sw + kw + opw
    ho = conv_transpose_output_length(h, kh, sh, ph, oph)
    wo = conv_transpose_output_length(wd, kw, sw, pw, opw)
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    full = np.zeros((n, cout, fh, fw))
    xd = x.data
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(xd, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i : i + h * sh : sh, j : j + wd * sw : sw] += contrib
    out = full[:, :, ph : ph + ho, pw : pw + wo]
    parents = (x, w)
    if b is not None:
        b = g._lift(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def backward(grad):
        gfull = np.zeros((n, cout, fh, fw))
        gfull[:, :, ph : ph + ho, pw : pw + wo] = grad
        if _needs(w):
            dw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gs = gfull[:, :, i : i + h * sh : sh, j : j + wd * sw : sw]
                    dw[:, :, i, j] = np.tensordot(xd, gs, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, dw)
        if b is not None and _needs(b):
            _accumulate(b, grad.sum(axis=(0, 2, 3)))
        if _needs(x):
            dx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gs = gfull[:, :, i : i + h * sh : sh, j : j + wd * sw : sw]
                    dx += np.tensordot(gs, w.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
            _accumulate(x, dx)

    return _node(g, np.ascontiguousarray(out), "conv_transpose2d", parents, backward)


def _as_1d_op(fn2d, op_name, x, w, b, **kw):
    g = x.graph
    w = g._lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"{op_name} expects 3-D x and w, got {x.shape}, {w.shape}")
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(w, (w.shape[0], w.shape[1], 1, w.shape[2]))
    y = fn2d(x4, w4, b, **kw)
    out = reshape(y, (y.shape[0], y.shape[1], y.shape[3]))
    out.op = op_name
    return out


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. x: (N, C, L), w: (O, C, k)."""
    return _as_1d_op(conv2d, "conv1d", x, w, b, stride=(1, stride), padding=(0, padding))


def conv_transpose1d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Transposed 1-D convolution. x: (N, Cin, L), w: (Cin, Cout, k)."""
    return _as_1d_op(
        conv_transpose2d,
        "conv_transpose1d",
        x,
        w,
        b,
        stride=(1, stride),
        padding=(0, padding),
        output_padding=(0, output_padding),
    )


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adam with bias correction.

    Moments are keyed by parameter name. ``eps`` is the numerical fuzz added to
    the root of the second moment.
    """

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Update ``params`` in place and return it."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if params[name].shape != g.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {params[name].shape} for {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

