"""Reverse-mode automatic differentiation on dense float64 tensors.

A tape-style graph: every op records its parents and a backward closure on
the output tensor.  Inputs marked ``requires_grad`` become differentiable
leaves, which is what lets downstream code take gradients of a scalar risk
score with respect to an input trajectory rather than only with respect to
parameters.

Broadcasting is deliberately restricted to bias-add over rows and the
per-row softmax family; everything else requires exact shape matches so
shape bugs surface immediately.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a graph recorded without tracking."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its body."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the compute graph: a float64 value plus gradient accumulator.

    Leaf tensors (parameters, marked inputs) carry ``requires_grad=True``.
    Interior nodes are produced by the ops below and hold a backward closure
    that scatters the output gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``seed`` defaults to ones and must match this tensor's shape.
        """
        if not self._tracked:
            raise GraphStateError(
                "backward() called on a tensor recorded with gradient tracking disabled"
            )
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"seed gradient shape {seed.shape} != output shape {self.data.shape}"
                )

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p._tracked for p in parents):
        out._prev = parents
        out._backward = backward
        out._tracked = True
    out.op = op
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts (rows, C) + (C,) as a bias add."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias_rows = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_rows and a.data.shape != b.data.shape:
        raise DimensionError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        if a._tracked:
            a._accumulate(g)
        if b._tracked:
            b._accumulate(g.sum(axis=0) if bias_rows else g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        if a._tracked:
            a._accumulate(g)
        if b._tracked:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        if a._tracked:
            a._accumulate(g * b.data)
        if b._tracked:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        if a._tracked:
            a._accumulate(g * s)

    return _make(a.data * s, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )

    def backward(g):
        if a._tracked:
            a._accumulate(g @ b.data.T)
        if b._tracked:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a._tracked:
            a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        if a._tracked:
            a._accumulate(g * (1.0 - t * t))

    return _make(t, (a,), backward, "tanh")


def pow_const(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    val = a.data**p

    def backward(g):
        if a._tracked:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(val, (a,), backward, f"pow{p}")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, returned as a shape-(1,) tensor."""
    a = _as_tensor(a)

    def backward(g):
        if a._tracked:
            a._accumulate(np.full_like(a.data, g.reshape(-1)[0]))

    return _make(np.array([a.data.sum()]), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        if a._tracked:
            a._accumulate(np.full_like(a.data, g.reshape(-1)[0] / n))

    return _make(np.array([a.data.mean()]), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)

    def backward(g):
        if a._tracked:
            a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along ``axis`` (0 or 1)."""
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors:
        if t.data.ndim != 2:
            raise DimensionError("concat expects 2-D tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t._tracked:
                t._accumulate(g[:, lo:hi] if axis == 1 else g[lo:hi, :])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def max_pool_groups(a: Tensor, group_size: int) -> Tensor:
    """Channel-wise max over consecutive row groups.

    Input (G*group_size, C) -> output (G, C).  The backward pass routes the
    gradient to the first argmax row in each group (ties broken by order),
    which is the exact subgradient used by shared-MLP point encoders.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] % group_size != 0:
        raise DimensionError(
            f"max_pool_groups: rows {a.data.shape} not divisible into groups of {group_size}"
        )
    g_count = a.data.shape[0] // group_size
    cols = a.data.shape[1]
    grouped = a.data.reshape(g_count, group_size, cols)
    argmax = grouped.argmax(axis=1)  # (G, C)
    pooled = np.take_along_axis(grouped, argmax[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        if a._tracked:
            full = np.zeros_like(grouped)
            np.put_along_axis(full, argmax[:, None, :], g[:, None, :], axis=1)
            a._accumulate(full.reshape(a.data.shape))

    return _make(pooled, (a,), backward, "max_pool_groups")


def row_softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis of a 2-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row_softmax expects a 2-D tensor")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a._tracked:
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accumulate(p * (g - dot))

    return _make(p, (a,), backward, "row_softmax")


def log_row_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("log_row_softmax expects a 2-D tensor")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)

    def backward(g):
        if a._tracked:
            a._accumulate(g - p * g.sum(axis=1, keepdims=True))

    return _make(logp, (a,), backward, "log_row_softmax")


def row_normalize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean, unit variance (no learned affine).

    Dedicated op rather than generic broadcasting; used by the encoder
    variant that re-introduces per-point normalization.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row_normalize expects a 2-D tensor")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def backward(g):
        if a._tracked:
            gm = g.mean(axis=1, keepdims=True)
            gy = (g * y).mean(axis=1, keepdims=True)
            a._accumulate(inv * (g - gm - y * gy))

    return _make(y, (a,), backward, "row_normalize")


def cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy between row-softmax(logits) and one-hot targets."""
    onehot = np.asarray(onehot, dtype=np.float64)
    if onehot.shape != logits.data.shape:
        raise DimensionError(
            f"cross_entropy: target shape {onehot.shape} != logits shape {logits.data.shape}"
        )
    logp = log_row_softmax(logits)
    picked = mul(logp, Tensor(onehot))
    return scale(tsum(picked), -1.0 / logits.data.shape[0])


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; the gradient oracle.

    ``f`` maps a flat float64 array to a float and must not mutate its input.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
