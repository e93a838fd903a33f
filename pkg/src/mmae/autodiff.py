"""Minimal dense-tensor reverse-mode differentiation engine.

Supplies exactly the operations the masked-autoencoder model needs: matrix
multiplication, layer normalization, row softmax, exact GELU, multi-head
self-attention, mean-squared error, and the structural ops (concat, gather,
slice, tile) used to assemble token sequences.  Gradients are computed by
walking the implicit operation graph in reverse topological order; every
operation records a vector-Jacobian product closure at construction time.

Tensors are immutable after construction (optimizer updates mutate ``data``
in place deliberately).  A forward/backward pass over one graph is
single-threaded; independent graphs share no mutable state, so parameter
tensors may be read concurrently from many graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense array plus an optional position in an operation graph.

    ``data`` is a row-major numpy array.  Leaf tensors created with
    ``requires_grad=True`` are the differentiation targets; tensors produced
    by operations carry parent references and a VJP closure.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Sugar used throughout the model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


GradMap = dict  # Tensor -> np.ndarray, keyed by object identity.


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, keeping graph edges only when a parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(data, (a,), vjp)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def vjp(g):
        return (2.0 * a.data * g,)

    return _make(data, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(data), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.mean()

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(data), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``C[i,j] = sum_t A[i,t] B[t,j]``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(a: Tensor) -> Tensor:
    """Elementwise x * Phi(x) with the exact Gaussian CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _make(data, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply affine.

    Variance is the population variance over the last dimension; ``eps``
    guards constant rows.
    """
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def vjp(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbeta = g.sum(axis=axes) if axes else g
        return dx, dgamma.reshape(gamma.data.shape), dbeta.reshape(beta.data.shape)

    return _make(data, (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# Structural ops for sequence assembly
# ---------------------------------------------------------------------------

def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal width along the row axis."""
    parts = [t.data for t in tensors]
    data = np.concatenate(parts, axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(data, tuple(tensors), vjp)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of ``table`` by index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    data = table.data[idx]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (table,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[start:stop]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _make(data, (a,), vjp)


def tile_row(row: Tensor, n: int) -> Tensor:
    """Repeat a single (1, d) row n times; backward sums over copies."""
    if row.data.ndim != 2 or row.data.shape[0] != 1:
        raise ShapeError(f"tile_row expects a (1, d) tensor, got {row.shape}")
    data = np.repeat(row.data, n, axis=0)

    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)

    return _make(data, (row,), vjp)


# ---------------------------------------------------------------------------
# Attention and loss
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projection weights for one multi-head self-attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)


def multi_head_self_attention(x: Tensor, params: AttentionParams, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``x``.

    Heads act on disjoint slices of width d/n_heads; their outputs are
    concatenated and passed through the output projection.  Implemented as a
    single fused graph node with a hand-derived backward pass, which keeps
    per-token training cheap.
    """
    n, d = x.data.shape
    if d % n_heads != 0:
        raise ConfigError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    alpha = 1.0 / math.sqrt(dh)

    wq, bq, wk, bk, wv, bv, wo, bo = (p.data for p in params.tensors())
    q = x.data @ wq + bq
    k = x.data @ wk + bk
    v = x.data @ wv + bv

    def heads(m):
        return m.reshape(n, n_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = qh @ kh.transpose(0, 2, 1) * alpha
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = oh.transpose(1, 0, 2).reshape(n, d)
    data = o @ wo + bo

    def vjp(g):
        dwo = o.T @ g
        dbo = g.sum(axis=0)
        do = g @ wo.T
        doh = do.reshape(n, n_heads, dh).transpose(1, 0, 2)
        dattn = doh @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ doh
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh * alpha
        dkh = dscores.transpose(0, 2, 1) @ qh * alpha

        def flat(m):
            return m.transpose(1, 0, 2).reshape(n, d)

        dq, dk, dv = flat(dqh), flat(dkh), flat(dvh)
        dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
        return (
            dx,
            x.data.T @ dq, dq.sum(axis=0),
            x.data.T @ dk, dk.sum(axis=0),
            x.data.T @ dv, dv.sum(axis=0),
            dwo, dbo,
        )

    return _make(data, (x,) + params.tensors(), vjp)


def mse(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Squared-error loss; ``mean`` over all elements or plain ``sum``."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown mse reduction {reduction!r}")
    diff = pred.data - target.data
    if reduction == "mean":
        data = np.asarray((diff * diff).mean())
        factor = 2.0 / diff.size
    else:
        data = np.asarray((diff * diff).sum())
        factor = 2.0

    def vjp(g):
        d = factor * diff * g
        return d, -d

    return _make(data, (pred, target), vjp)


# ---------------------------------------------------------------------------
# Backward pass
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to requires_grad leaves.

    Returns a map keyed by tensor identity.  When ``wrt`` is given, every
    listed tensor appears in the map; leaves the loss does not depend on get
    zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: GradMap = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
    if wrt is not None:
        out: GradMap = {}
        for t in wrt:
            out[t] = leaves.get(t)
            if out[t] is None:
                out[t] = np.zeros_like(t.data)
        return out
    return leaves


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_check(fn, inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must be pure and return a scalar Tensor.  Every input with
    ``requires_grad`` is perturbed coordinate-by-coordinate; the result is the
    worst relative error across all coordinates of all differentiated inputs.
    Run with float64 inputs and the default step for meaningful bounds.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be > 0")
    loss = fn(*inputs)
    targets = [t for t in inputs if t.requires_grad]
    grads = backward(loss, wrt=targets)

    def eval_at(replaced: Tensor, data: np.ndarray) -> float:
        args = [Tensor(data) if t is replaced else Tensor(t.data) for t in inputs]
        return float(fn(*args).data)

    worst = 0.0
    for t in targets:
        numeric = np.zeros_like(t.data, dtype=np.float64)
        flat = numeric.reshape(-1)
        base = t.data.astype(np.float64)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += step
            hi = eval_at(t, bumped.reshape(base.shape))
            bumped[i] -= 2 * step
            lo = eval_at(t, bumped.reshape(base.shape))
            flat[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, max_relative_error(grads[t], numeric))
    return worst
