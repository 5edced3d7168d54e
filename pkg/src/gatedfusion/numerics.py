"""Dense float64 tensors with tape-style reverse-mode differentiation.

Values are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Node`
wraps one value together with its gradient and the backward rule of the
primitive that produced it. Calling :func:`backward` on a scalar node walks
the recorded graph in reverse topological order and accumulates gradients.

Only the primitives needed by the transformer model live here. Every
primitive broadcasts like numpy and reduces gradients back to the input
shapes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
MASK_VALUE = -1e30


class TargetIndexError(ContractError, IndexError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "_grad", "op", "parents", "_backward", "name")

    def __init__(self, value, op="leaf", parents=(), backward_fn=None, name=None):
        self.value = as_tensor(value)
        self._grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = as_tensor(g)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    out = Node(a.value + b.value, "add", (a, b))

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out._backward = backward_fn
    return out


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    out = Node(a.value - b.value, "sub", (a, b))

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    out._backward = backward_fn
    return out


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    out = Node(a.value * b.value, "mul", (a, b))

    def backward_fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    out._backward = backward_fn
    return out


def total(x: Node) -> Node:
    """Sum of every element, as a 0-d node."""
    out = Node(np.sum(x.value), "sum", (x,))
    out._backward = lambda g: (np.broadcast_to(g, x.shape),)
    return out


def mean(x: Node) -> Node:
    n = x.value.size
    out = Node(np.sum(x.value) / n, "mean", (x,))
    out._backward = lambda g: (np.broadcast_to(g / n, x.shape),)
    return out


# --- shape plumbing ---------------------------------------------------------


def reshape(x: Node, shape) -> Node:
    out = Node(x.value.reshape(shape), "reshape", (x,))
    out._backward = lambda g: (g.reshape(x.shape),)
    return out


def transpose(x: Node, axes) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Node(np.transpose(x.value, axes), "transpose", (x,))
    out._backward = lambda g: (np.transpose(g, inverse),)
    return out


def swap_last(x: Node) -> Node:
    axes = list(range(x.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def embedding(table: Node, ids) -> Node:
    """Rows of ``table`` gathered at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TargetIndexError(f"token id out of range for table of {vocab} rows")
    out = Node(table.value[ids], "embedding", (table,))

    def backward_fn(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    out._backward = backward_fn
    return out


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Node:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _node(a), _node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Node(np.matmul(a.value, b.value), "matmul", (a, b))

    def backward_fn(g):
        da = np.matmul(g, np.swapaxes(b.value, -1, -2))
        db = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    out._backward = backward_fn
    return out


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight + bias`` where ``x`` is ``[..., d_in]``.

    Leading axes are flattened so the product is one 2-D GEMM.
    """
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[-1],))


# --- nonlinearities ---------------------------------------------------------


def _softmax_values(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Node) -> Node:
    """Softmax over the last axis."""
    p = _softmax_values(x.value)
    out = Node(p, "softmax", (x,))

    def backward_fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    out._backward = backward_fn
    return out


def sigmoid(x: Node) -> Node:
    v = x.value
    # two branches so neither exp() can overflow
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Node(s, "sigmoid", (x,))
    out._backward = lambda g: (g * s * (1.0 - s),)
    return out


def gelu(x: Node) -> Node:
    v = x.value
    inner = _SQRT_2_OVER_PI * (v + GELU_COEF * v**3)
    t = np.tanh(inner)
    out = Node(0.5 * v * (1.0 + t), "gelu", (x,))

    def backward_fn(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    out._backward = backward_fn
    return out


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize each row over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    centered = x.value - x.value.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = Node(xhat * gain.value + bias.value, "layer_norm", (x, gain, bias))

    def backward_fn(g):
        dxhat = g * gain.value
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    out._backward = backward_fn
    return out


def dropout(x: Node, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Node(x.value * keep, "dropout", (x,))
    out._backward = lambda g: (g * keep,)
    return out


# --- losses -----------------------------------------------------------------


def _log_softmax_values(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def token_nll(logits: np.ndarray, targets, ignore: int | None = None) -> np.ndarray:
    """Per-position negative log-likelihood (no graph); ignored positions are 0."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TargetIndexError(f"target id out of range for vocabulary of {vocab}")
    logp = _log_softmax_values(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if ignore is not None:
        nll = np.where(targets == ignore, 0.0, nll)
    return nll


def cross_entropy_mean(logits: Node, targets, ignore: int | None = None) -> Node:
    """Mean next-token NLL over positions whose target is not ``ignore``."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    nll = token_nll(logits.value, targets, ignore)
    keep = np.ones(targets.shape) if ignore is None else (targets != ignore).astype(np.float64)
    n = keep.sum()
    if n == 0:
        raise ContractError("no supervised positions")
    out = Node(nll.sum() / n, "cross_entropy", (logits,))

    def backward_fn(g):
        p = _softmax_values(logits.value)
        flat = p.reshape(-1, p.shape[-1])
        flat[np.arange(flat.shape[0]), targets.reshape(-1)] -= 1.0
        return (g * p * (keep / n)[..., None],)

    out._backward = backward_fn
    return out


# --- reverse sweep ----------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(_topological(loss)):
        if node._backward is None or node._grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node._grad)):
            parent._accumulate(g)
        if node.parents:
            # interior gradients are not needed once propagated
            node._backward = None


# --- gradient oracle --------------------------------------------------------


def finite_diff_check(f, theta, step: float = 1e-6) -> float:
    """Compare the analytic gradient of ``f`` at ``theta`` with central differences.

    ``f`` maps a leaf :class:`Node` to a scalar node. Returns the max over
    coordinates of ``|a - n| / max(1, |a|, |n|)``.
    """
    theta = as_tensor(theta)
    leaf = Node(theta.copy())
    backward(f(leaf))
    analytic = leaf.grad.reshape(-1)

    base = theta.reshape(-1)
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        hi = bumped[i] = base[i] + step
        up = float(f(Node(bumped.reshape(theta.shape))).value)
        lo = bumped[i] = base[i] - step
        down = float(f(Node(bumped.reshape(theta.shape))).value)
        # divide by the representable step, not the requested one
        numeric = (up - down) / (hi - lo)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
