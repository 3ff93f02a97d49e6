"""Minimal dense-tensor reverse-mode autodiff.

A :class:`Tape` records every primitive applied to :class:`Tensor` values
(64-bit, numpy-backed).  Nodes are append-only, so reversed insertion order
is a valid topological order for the backward sweep.  Each primitive stores
an exact vector-Jacobian product closure; :func:`backward` replays them from
a scalar loss and returns per-parameter gradients.

A tape is single-writer: confine it to one thread for its lifetime.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries both."""


class AutodiffError(RuntimeError):
    pass


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    shape: tuple[int, ...]


@dataclass(frozen=True)
class Tensor:
    """Handle to a value recorded on a tape."""

    data: np.ndarray
    tape: "Tape"
    node: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, node={self.node})"


class Tape:
    """Append-only computation record.

    ``grad_enabled=False`` skips storing VJP closures, which is what the SLAM
    engine uses at inference time (forward values only).
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[_Node] = []
        self.param_nodes: dict[str, int] = {}

    # ------------------------------------------------------------------
    # leaves
    # ------------------------------------------------------------------
    def _record(self, data: np.ndarray, parents: tuple[int, ...], vjp) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise AutodiffError("non-finite value produced in forward pass")
        if not self.grad_enabled:
            parents, vjp = (), None
        self.nodes.append(_Node(parents, vjp, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def constant(self, value) -> Tensor:
        """A leaf that accumulates no gradient."""
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def leaf(self, value) -> Tensor:
        """A leaf whose gradient is tracked (used for parameters)."""
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def param(self, store, name: str) -> Tensor:
        """Leaf bound to a named parameter; repeat calls share one node."""
        if name in self.param_nodes:
            i = self.param_nodes[name]
            return Tensor(store[name], self, i)
        t = self.leaf(store[name])
        self.param_nodes[name] = t.node
        return t

    def _check(self, *tensors: Tensor):
        for t in tensors:
            if t.tape is not self:
                raise AutodiffError("tensor belongs to a different tape")


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ----------------------------------------------------------------------
# arithmetic
# ----------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a 1-D bias to each matrix row."""
    tape = a.tape
    tape._check(a, b)
    if a.data.shape == b.data.shape:
        return tape._record(a.data + b.data, (a.node, b.node), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return tape._record(
            a.data + b.data, (a.node, b.node), lambda g: (g, g.sum(axis=0))
        )
    raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    tape._check(a, b)
    _same_shape("sub", a, b)
    return tape._record(a.data - b.data, (a.node, b.node), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    tape._check(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return tape._record(ad * bd, (a.node, b.node), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return a.tape._record(a.data * s, (a.node,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return a.tape._record(a.data + s, (a.node,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    tape._check(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return tape._record(
        ad @ bd, (a.node, b.node), lambda g: (g @ bd.T, ad.T @ g)
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")
    return a.tape._record(a.data.T.copy(), (a.node,), lambda g: (g.T,))


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape._record(a.data * mask, (a.node,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape._record(out, (a.node,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return a.tape._record(out, (a.node,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    # zero the gradient where the output is exactly 0 (kink of sqrt)
    safe = np.where(out > 0, out, 1.0)
    return a.tape._record(out, (a.node,), lambda g: (np.where(out > 0, g / (2 * safe), 0.0),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape._record(ad * ad, (a.node,), lambda g: (2.0 * ad * g,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return a.tape._record(out, (a.node,), lambda g: (g * out * (1.0 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return a.tape._record(np.clip(a.data, lo, hi), (a.node,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return a.tape._record(out, (a.node,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    tape = a.tape
    tape._check(a, gain, bias)
    if gain.data.shape != (a.data.shape[-1],) or bias.data.shape != (a.data.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis of {a.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = a.data.shape[-1]
    gd = gain.data

    def vjp(g):
        gxhat = g * gd
        # d xhat / d x backprop for per-row normalization
        dx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    del n
    return tape._record(out, (a.node, gain.node, bias.node), vjp)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    tape = a.tape
    tape._check(a, b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat: shape mismatch {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return tape._record(
        out, (a.node, b.node), lambda g: (g[..., :na], g[..., na:])
    )


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the first axis (row stacking)."""
    tape = a.tape
    tape._check(a, b)
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_rows: shape mismatch {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return tape._record(out, (a.node, b.node), lambda g: (g[:na], g[na:]))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (first-axis entries) by index; repeats allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got {idx.shape}")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._record(a.data[idx], (a.node,), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {a.data.shape}")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[:, start:stop] = g
        return (out,)

    return a.tape._record(a.data[:, start:stop].copy(), (a.node,), vjp)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return a.tape._record(a.data.sum(), (a.node,), lambda g: (np.full(shape, g),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    return a.tape._record(a.data.mean(), (a.node,), lambda g: (np.full(shape, g / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis (drops one dimension)."""
    if a.data.ndim < 1:
        raise ShapeError("row_sum: scalar input")
    n = a.data.shape[-1]
    return a.tape._record(
        a.data.sum(axis=-1),
        (a.node,),
        lambda g: (np.repeat(g[..., None], n, axis=-1),),
    )


def mean_pool(a: Tensor) -> Tensor:
    """Mean over the first axis: (N, D) -> (D,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_pool: expected 2-D, got {a.data.shape}")
    n = a.data.shape[0]
    return a.tape._record(
        a.data.mean(axis=0), (a.node,), lambda g: (np.tile(g / n, (n, 1)),)
    )


def max_pool(a: Tensor) -> Tensor:
    """Max over the first axis: (N, D) -> (D,); gradient to the argmax rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"max_pool: expected 2-D, got {a.data.shape}")
    arg = a.data.argmax(axis=0)
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[arg, np.arange(shape[1])] = g
        return (out,)

    return a.tape._record(a.data.max(axis=0), (a.node,), vjp)


def segment_max(a: Tensor, lengths) -> Tensor:
    """Max-pool contiguous row segments: (sum(lengths), D) -> (len(lengths), D)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.sum() != a.data.shape[0]:
        raise ShapeError(
            f"segment_max: segment lengths sum to {lengths.sum()} but input has "
            f"{a.data.shape[0]} rows"
        )
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    d = a.data.shape[1]
    out = np.empty((len(lengths), d), dtype=np.float64)
    args = np.empty((len(lengths), d), dtype=np.int64)
    for s_i, (st, ln) in enumerate(zip(starts, lengths)):
        block = a.data[st : st + ln]
        local = block.argmax(axis=0)
        args[s_i] = st + local
        out[s_i] = block[local, np.arange(d)]
    shape = a.data.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=np.float64)
        np.add.at(grad, (args.ravel(), np.tile(np.arange(d), len(lengths))), g.ravel())
        return (grad,)

    return a.tape._record(out, (a.node,), vjp)


# ----------------------------------------------------------------------
# similarity
# ----------------------------------------------------------------------
def row_l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row to unit length."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_l2_normalize: expected 2-D, got {a.data.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    out = a.data / norms

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * inner) / norms,)

    return a.tape._record(out, (a.node,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine: (N, D), (N, D) -> (N,)."""
    _same_shape("cosine_similarity", a, b)
    an = row_l2_normalize(a)
    bn = row_l2_normalize(b)
    return row_sum(mul(an, bn))


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------
def backward(tape: Tape, loss: Tensor, store) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter in ``store`` order.

    Parameters the loss does not reach get zero gradients.
    """
    if not tape.grad_enabled:
        raise AutodiffError("backward on a gradient-disabled tape")
    if loss.data.shape != ():
        raise AutodiffError(f"loss must be a scalar, got shape {loss.data.shape}")
    param_ids = set(tape.param_nodes.values())
    grads: dict[int, np.ndarray] = {loss.node: np.asarray(1.0)}
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            if i in param_ids:
                grads[i] = g  # keep parameter grads
            continue
        parts = node.vjp(g)
        for p, pg in zip(node.parents, parts):
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = np.asarray(pg, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    for name in store.names():
        node_id = tape.param_nodes.get(name)
        if node_id is not None and node_id in grads:
            out[name] = np.asarray(grads[node_id], dtype=np.float64)
        else:
            out[name] = np.zeros_like(store[name])
    return out
