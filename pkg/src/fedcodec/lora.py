"""Toy target model with LoRA adapters on four projections per layer.

Each layer computes ``h + g * W_O(W_V h)`` with the scalar gate
``g = sigmoid(<W_Q h, W_K h> / sqrt(d))``. A frozen linear head produces the
logits. Base weights are frozen; only the low-rank factors train.

Factor arrays are stored stacked: ``A`` has shape ``(L, 4, r, d)`` and ``B``
has shape ``(L, 4, d, r)`` with projections ordered K, Q, V, O.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import autodiff as ad

PROJECTIONS = ("K", "Q", "V", "O")
_K, _Q, _V, _O = range(4)


@dataclass(frozen=True)
class TargetModel:
    d: int
    n_layers: int
    rank: int
    n_classes: int
    base: np.ndarray = field(repr=False)  # (L, 4, d, d)
    head: np.ndarray = field(repr=False)  # (d, n_classes)

    @property
    def canvas_shape(self) -> Tuple[int, int]:
        return canvas_rows(self.rank, self.n_layers), self.d


@dataclass
class LoraFactors:
    A: np.ndarray  # (L, 4, r, d)
    B: np.ndarray  # (L, 4, d, r)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 4 or self.B.ndim != 4 or self.A.shape[1] != 4:
            raise ValueError(f"bad factor shapes A{self.A.shape} B{self.B.shape}")
        L, _, r, d = self.A.shape
        if self.B.shape != (L, 4, d, r):
            raise ValueError(f"B shape {self.B.shape} inconsistent with A shape {self.A.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[2]

    @property
    def d(self) -> int:
        return self.A.shape[3]

    @property
    def n_layers(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "LoraFactors":
        return LoraFactors(self.A.copy(), self.B.copy())

    def effective(self) -> np.ndarray:
        """Per-projection dense update ``B @ A``, shape (L, 4, d, d)."""
        return self.B @ self.A

    def __sub__(self, other: "LoraFactors") -> "LoraFactors":
        return LoraFactors(self.A - other.A, self.B - other.B)

    def __add__(self, other: "LoraFactors") -> "LoraFactors":
        return LoraFactors(self.A + other.A, self.B + other.B)

    def scaled(self, c: float) -> "LoraFactors":
        return LoraFactors(self.A * c, self.B * c)

    def tensors(self) -> List[np.ndarray]:
        """Every A and B tensor, layer-major, projection order K, Q, V, O."""
        out = []
        for layer in range(self.n_layers):
            for p in range(4):
                out.append(self.A[layer, p])
                out.append(self.B[layer, p])
        return out

    @classmethod
    def zeros(cls, n_layers: int, rank: int, d: int) -> "LoraFactors":
        return cls(np.zeros((n_layers, 4, rank, d)), np.zeros((n_layers, 4, d, rank)))

    def equals(self, other: "LoraFactors") -> bool:
        return np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B)


def _check_dims(d, n_layers, rank, n_classes):
    for name, v in (("d", d), ("n_layers", n_layers), ("rank", rank), ("n_classes", n_classes)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    if rank >= d:
        raise ValueError(f"rank ({rank}) must be smaller than d ({d})")


def init_model(d: int, n_layers: int, rank: int, n_classes: int, seed: int = 0) -> Tuple[TargetModel, LoraFactors]:
    """Build a frozen toy model and its round-zero adapter.

    Base weights and head are Gaussian with std ``1/sqrt(d)``. The returned
    factors follow the LoRA convention: A Gaussian with std ``1/sqrt(r)``,
    B zero.
    """
    _check_dims(d, n_layers, rank, n_classes)
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, 4, d, d))
    head = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n_classes))
    base.setflags(write=False)
    head.setflags(write=False)
    model = TargetModel(d, n_layers, rank, n_classes, base, head)
    return model, init_factors(model, rng)


def init_factors(model: TargetModel, seed) -> LoraFactors:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L, r, d = model.n_layers, model.rank, model.d
    A = rng.normal(0.0, 1.0 / np.sqrt(r), size=(L, 4, r, d))
    return LoraFactors(A, np.zeros((L, 4, d, r)))


def _weights(model: TargetModel, delta: Optional[np.ndarray]) -> np.ndarray:
    if delta is None:
        return model.base
    if delta.shape != model.base.shape:
        raise ValueError(f"dense delta shape {delta.shape} != {model.base.shape}")
    return model.base + delta


def forward_graph(
    g: ad.Graph,
    model: TargetModel,
    x: ad.Tensor,
    A: Sequence[Sequence[ad.Tensor]],
    B: Sequence[Sequence[ad.Tensor]],
    delta: Optional[np.ndarray] = None,
) -> ad.Tensor:
    """Logits for a batch ``x`` (n, d) with adapter tensors ``A[l][p]``, ``B[l][p]``."""
    W = _weights(model, delta)
    inv_sqrt_d = 1.0 / np.sqrt(model.d)
    h = x

    def proj(h, layer, p):
        dense = ad.matmul(h, g.constant(W[layer, p].T))
        low = ad.matmul(ad.matmul(h, ad.transpose(A[layer][p])), ad.transpose(B[layer][p]))
        return ad.add(dense, low)

    for layer in range(model.n_layers):
        q = proj(h, layer, _Q)
        k = proj(h, layer, _K)
        gate = ad.sigmoid(ad.scale(ad.sum(ad.mul(q, k), axis=1, keepdims=True), inv_sqrt_d))
        v = proj(h, layer, _V)
        o = proj(v, layer, _O)
        h = ad.add(h, ad.mul(gate, o))
    return ad.matmul(h, g.constant(model.head))


def _factor_params(g: ad.Graph, factors: LoraFactors):
    A = [[g.param(f"A{l}{p}", factors.A[l, i]) for i, p in enumerate(PROJECTIONS)] for l in range(factors.n_layers)]
    B = [[g.param(f"B{l}{p}", factors.B[l, i]) for i, p in enumerate(PROJECTIONS)] for l in range(factors.n_layers)]
    return A, B


def loss_and_grads(
    model: TargetModel, factors: LoraFactors, X: np.ndarray, y: np.ndarray, delta: Optional[np.ndarray] = None
) -> Tuple[float, LoraFactors]:
    """Mean cross-entropy and its gradient with respect to every factor."""
    g = ad.Graph()
    A, B = _factor_params(g, factors)
    logits = forward_graph(g, model, g.input(X), A, B, delta)
    loss = ad.cross_entropy(logits, y)
    grads = g.backward(loss)
    gA = np.empty_like(factors.A)
    gB = np.empty_like(factors.B)
    for l in range(factors.n_layers):
        for i, p in enumerate(PROJECTIONS):
            gA[l, i] = grads[f"A{l}{p}"]
            gB[l, i] = grads[f"B{l}{p}"]
    return float(loss.data), LoraFactors(gA, gB)


def _dense_forward(model, W, X):
    h = np.asarray(X, dtype=np.float64)
    for layer in range(model.n_layers):
        q = h @ W[layer, _Q].T
        k = h @ W[layer, _K].T
        s = (q * k).sum(axis=1, keepdims=True) / np.sqrt(model.d)
        gate = expit(s)
        o = (h @ W[layer, _V].T) @ W[layer, _O].T
        h = h + gate * o
    return h @ model.head


def predict_logits(
    model: TargetModel, X: np.ndarray, factors: Optional[LoraFactors] = None, delta: Optional[np.ndarray] = None
) -> np.ndarray:
    """Logits with effective weights ``base + delta + B @ A`` (numpy only)."""
    W = _weights(model, delta)
    if factors is not None:
        W = W + factors.effective()
    return _dense_forward(model, W, X)


def cross_entropy_np(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def local_train(
    model: TargetModel,
    factors: LoraFactors,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int = 1,
    lr: float = 1e-2,
    batch_size: int = 32,
    seed: int = 0,
    delta: Optional[np.ndarray] = None,
    loss_log: Optional[list] = None,
) -> LoraFactors:
    """Adam-train the adapter on one client shard; return the factor increment.

    The starting ``factors`` are not modified. ``loss_log`` (if given)
    receives every minibatch loss.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty client shard")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    rng = np.random.default_rng(seed)
    cur = factors.copy()
    opt = ad.Adam(lr=lr)
    params = {"A": cur.A, "B": cur.B}
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grads(model, cur, X[idx], y[idx], delta)
            if not np.isfinite(loss):
                raise ad.NonFiniteError("non-finite local training loss")
            if loss_log is not None:
                loss_log.append(loss)
            opt.step(params, {"A": grads.A, "B": grads.B})
    return cur - factors


# -------------------------------------------------------------- canvas packing


def canvas_rows(rank: int, n_layers: int, n_proj: int = 4) -> int:
    return 2 * rank * n_proj * n_layers


def pack(factors: LoraFactors) -> np.ndarray:
    """Stack ``A`` and ``B^T`` slabs into a ``(2*r*4*L, d)`` canvas.

    Slabs are layer-major, projections K, Q, V, O, and within each projection
    the A slab precedes the B^T slab.
    """
    L, _, r, d = factors.A.shape
    slabs = np.stack([factors.A, np.swapaxes(factors.B, 2, 3)], axis=2)  # (L, 4, 2, r, d)
    return slabs.reshape(canvas_rows(r, L), d)


def unpack(canvas: np.ndarray, rank: int, n_layers: int) -> LoraFactors:
    canvas = np.asarray(canvas, dtype=np.float64)
    rows = canvas_rows(rank, n_layers)
    if canvas.ndim != 2 or canvas.shape[0] != rows:
        raise ValueError(f"canvas has shape {canvas.shape}, expected ({rows}, d)")
    slabs = canvas.reshape(n_layers, 4, 2, rank, canvas.shape[1])
    return LoraFactors(slabs[:, :, 0].copy(), np.swapaxes(slabs[:, :, 1], 2, 3).copy())


def count_transmitted_params(d: int, r: int, n_layers: int, n_proj: int = 4) -> int:
    """Uncompressed adapter element count: ``d * r * 2 * n_proj * L``."""
    for v in (d, r, n_layers, n_proj):
        if v < 0:
            raise ValueError("arguments must be non-negative")
    return d * r * 2 * n_proj * n_layers


# ------------------------------------------------------------- aggregation


def aggregate(factor_list: Iterable[LoraFactors], mode: str = "sum") -> LoraFactors:
    """Elementwise sum (or mean) of A's and of B's, in list order.

    This is the LoRA-subspace aggregation: the result is ``(sum A_i, sum B_i)``,
    not a factorisation of ``sum B_i A_i``.
    """
    items = list(factor_list)
    if not items:
        raise ValueError("cannot aggregate an empty list")
    A = items[0].A.copy()
    B = items[0].B.copy()
    for f in items[1:]:
        if f.A.shape != A.shape or f.B.shape != B.shape:
            raise ValueError("factor shape mismatch in aggregate")
        A += f.A
        B += f.B
    if mode == "mean":
        A /= len(items)
        B /= len(items)
    elif mode != "sum":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return LoraFactors(A, B)


def apply_global_update(delta: np.ndarray, agg: LoraFactors, eta: float) -> np.ndarray:
    """Return the dense accumulator advanced by ``eta * B~ @ A~`` per projection."""
    delta = np.asarray(delta, dtype=np.float64)
    upd = agg.effective()
    if upd.shape != delta.shape:
        raise ValueError(f"aggregate update shape {upd.shape} != accumulator shape {delta.shape}")
    return delta + eta * upd
