"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of ops the relation model needs. Each op records its
parents and a closure that pushes the output gradient back to them;
``backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: a._accumulate(g * c))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis of x."""
    out = x.value @ w.value
    if b is not None:
        out = out + b.value

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ w.value.T)
        fan_in, fan_out = w.shape
        if w.requires_grad:
            w._accumulate(x.value.reshape(-1, fan_in).T @ g.reshape(-1, fan_out))
        if b is not None:
            b._accumulate(g.reshape(-1, fan_out).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return Tensor(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return Tensor(out, tuple(xs), back)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor(x.value.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """x[b, index[b]] for x of shape (B, n, ...)."""
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (rows, index), g)
        x._accumulate(full)

    return Tensor(x.value[rows, index], (x,), back)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention, one query per batch row.

    q: (B, h, dh); k, v: (B, n, h, dh); mask: (B, n) bool, True = attend.
    """
    dh = q.shape[-1]
    inv = 1.0 / np.sqrt(dh)
    scores = np.einsum("bhd,bnhd->bhn", q.value, k.value) * inv
    scores = np.where(mask[:, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.einsum("bhn,bnhd->bhd", weights, v.value)

    def back(g):
        v._accumulate(np.einsum("bhn,bhd->bnhd", weights, g))
        dw = np.einsum("bhd,bnhd->bhn", g, v.value)
        ds = weights * (dw - (weights * dw).sum(axis=-1, keepdims=True)) * inv
        q._accumulate(np.einsum("bhn,bnhd->bhd", ds, k.value))
        k._accumulate(np.einsum("bhn,bhd->bnhd", ds, q.value))

    return Tensor(out, (q, k, v), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def back(g):
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (x,), back)


def slice_last(x: Tensor, n: int) -> Tensor:
    def back(g):
        full = np.zeros_like(x.value)
        full[..., :n] = g
        x._accumulate(full)

    return Tensor(x.value[..., :n], (x,), back)


def nll(logp: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_b weights[b] * -logp[b, labels[b]]."""
    rows = np.arange(logp.shape[0])
    picked = logp.value[rows, labels]

    def back(g):
        full = np.zeros_like(logp.value)
        np.add.at(full, (rows, labels), -weights * g)
        logp._accumulate(full)

    return Tensor(-(weights * picked).sum(), (logp,), back)


def kl_rows(teacher_logp: Tensor, student_logp: Tensor, weights: np.ndarray) -> Tensor:
    """sum_b weights[b] * KL(p_teacher[b] || p_student[b]) from log-probabilities."""
    p = np.exp(teacher_logp.value)
    diff = teacher_logp.value - student_logp.value
    per_row = (p * diff).sum(axis=-1)

    def back(g):
        w = (weights * g)[:, None]
        teacher_logp._accumulate(w * (p * diff + p))
        student_logp._accumulate(-w * p)

    return Tensor((weights * per_row).sum(), (teacher_logp, student_logp), back)
