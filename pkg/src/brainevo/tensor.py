"""Dense 2-D reverse-mode autodiff and the Adam optimizer.

Every value is a 2-D ``float64`` numpy array wrapped in a :class:`Node`.
Operations record their parents and a closure that maps the upstream
gradient to one gradient per parent.  :func:`backward` walks the graph in
reverse topological order from a 1x1 output.

The engine is deliberately small: it supports exactly the operations needed
to build and train the graph GAN in :mod:`brainevo.ggan`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from brainevo.errors import ContractError, DimensionError, DomainError, TrainingError

BN_EPS = 1e-10

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    Attributes:
        value: 2-D float64 array.
        parents: input nodes this value was computed from.
        backward_fn: maps d(output)/d(self) to gradients for each parent.
        requires_grad: whether gradients should flow into this node.
        op: name of the operation that produced the node.
    """

    __array_priority__ = 1000  # make ndarray <op> Node defer to Node

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward_fn: Optional[GradFn] = None,
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2 or value.shape[0] < 1 or value.shape[1] < 1:
            raise DimensionError(f"node values must be non-empty 2-D matrices, got shape {value.shape}")
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.stats: Optional[tuple[np.ndarray, np.ndarray]] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Node":
        return Node(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    """Wrap a value as a node that never receives gradients."""
    return value if isinstance(value, Node) else Node(value)


def parameter(value) -> Node:
    """Wrap a value as a trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if np.isscalar(x):
        return Node(np.array([[float(x)]]))
    return Node(x)


def _make(value: np.ndarray, parents: tuple, backward_fn: GradFn, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, True, op)
    return Node(value, op=op)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: shapes {a} and {b} do not conform")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), grad_fn, "mul")


def scale(a, c: float) -> Node:
    a = _as_node(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Node:
    a = _as_node(a)
    return _make(a.value + c, (a,), lambda g: (g,), "add_scalar")


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), grad_fn, "matmul")


def transpose(a) -> Node:
    a = _as_node(a)
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_cols(*nodes) -> Node:
    """Concatenate along columns (all operands share the same row count)."""
    nodes = tuple(_as_node(n) for n in nodes)
    if not nodes:
        raise ContractError("concat_cols needs at least one operand")
    rows = nodes[0].shape[0]
    for n in nodes[1:]:
        if n.shape[0] != rows:
            raise DimensionError(f"concat_cols: shapes {nodes[0].shape} and {n.shape} do not conform")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes, grad_fn, "concat_cols")


def mean_rows(a) -> Node:
    """Average over rows, giving a 1 x cols node."""
    a = _as_node(a)
    r = a.shape[0]
    return _make(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g / r, a.shape),), "mean_rows")


def mean_all(a) -> Node:
    a = _as_node(a)
    size = a.value.size
    return _make(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / size),), "mean_all")


def sum_all(a) -> Node:
    a = _as_node(a)
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum_all")


# ---------------------------------------------------------------------------
# non-linearities


def relu(a) -> Node:
    a = _as_node(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a) -> Node:
    a = _as_node(a)
    x = a.value
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a) -> Node:
    a = _as_node(a)
    sgn = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sgn,), "abs")


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log of non-positive value (min {a.value.min():.6g})")
    x = a.value
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo: float, hi: float) -> Node:
    a = _as_node(a)
    inside = (a.value > lo) & (a.value < hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def l1_distance(a, b) -> Node:
    """Mean absolute element-wise difference, as a 1x1 node."""
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_distance: shapes {a.shape} and {b.shape} do not conform")
    diff = a.value - b.value
    size = diff.size
    sgn = np.sign(diff)

    def grad_fn(g):
        ga = sgn * (g[0, 0] / size)
        return ga, -ga

    return _make(np.array([[np.abs(diff).mean()]]), (a, b), grad_fn, "l1_distance")


# ---------------------------------------------------------------------------
# regularisers


def batch_norm(x, gamma, beta, eps: float = BN_EPS, mean=None, var=None) -> Node:
    """Normalise each column over the rows, then apply ``gamma * xhat + beta``.

    With ``mean``/``var`` given the statistics are treated as constants
    (evaluation mode).  Otherwise the batch statistics are used and stored on
    the returned node as ``node.stats = (mean, var)``.
    """
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    cols = x.shape[1]
    if gamma.shape != (1, cols) or beta.shape != (1, cols):
        raise DimensionError(f"batch_norm: input {x.shape} with affine shapes {gamma.shape}, {beta.shape}")
    xv, gv = x.value, gamma.value
    frozen = mean is not None
    if frozen:
        mu = np.asarray(mean, dtype=np.float64).reshape(1, cols)
        sig2 = np.asarray(var, dtype=np.float64).reshape(1, cols)
    else:
        mu = xv.mean(axis=0, keepdims=True)
        sig2 = xv.var(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(sig2 + eps)
    xhat = (xv - mu) * inv_std
    out = gv * xhat + beta.value
    if not np.all(np.isfinite(out)):
        raise DomainError("batch_norm produced non-finite values")
    rows = xv.shape[0]

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        dxhat = g * gv
        if frozen:
            dx = dxhat * inv_std
        else:
            dx = (inv_std / rows) * (
                rows * dxhat - dxhat.sum(axis=0, keepdims=True) - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
            )
        return dx, dgamma, dbeta

    node = _make(out, (x, gamma, beta), grad_fn, "batch_norm")
    if not frozen:
        node.stats = (mu, sig2)
    return node


def dropout_mask(shape: tuple, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/keep_prob."""
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep probability must lie in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep_prob) / keep_prob


def dropout(x, mask: np.ndarray) -> Node:
    x = _as_node(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: input {x.shape} with mask {mask.shape}")
    return _make(x.value * mask, (x,), lambda g: (g * mask,), "dropout")


OPS: dict[str, Callable[..., Node]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "add_scalar": add_scalar,
    "concat_cols": concat_cols,
    "mean_rows": mean_rows,
    "mean_all": mean_all,
    "sum_all": sum_all,
    "transpose": transpose,
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": abs_,
    "l1_distance": l1_distance,
    "log": log,
    "clamp": clamp,
    "batch_norm": batch_norm,
    "dropout": dropout,
}


def forward(kind: str, inputs: Sequence, **attrs) -> Node:
    """Apply the operation registered under ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Node, wrt: Optional[Iterable[Node]] = None) -> dict[Node, np.ndarray]:
    """Gradients of a scalar node.

    Args:
        output: a 1x1 node.
        wrt: nodes to report gradients for.  Nodes that do not influence
            ``output`` get a zero gradient.  Defaults to every trainable leaf
            reached from ``output``.

    Returns:
        Mapping from node to a gradient array of the node's shape.
    """
    if output.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    order = _topological(output) if output.requires_grad else [output]
    leaves = []
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if not node.parents:
            leaves.append(node)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    if wrt is None:
        return {n: grads[id(n)] for n in leaves if n.requires_grad}
    return {n: grads.get(id(n), np.zeros(n.shape)) for n in wrt}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ContractError(f"eps must be positive, got {self.eps}")


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update.

    ``state`` is updated in place; the new parameter array is returned.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise DimensionError(f"adam_step: parameter {param.shape} with gradient {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient at Adam step {state.step + 1}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    elif state.m.shape != param.shape:
        raise DimensionError(f"adam_step: state {state.m.shape} with parameter {param.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a list of trainable nodes, one :class:`AdamState` each."""

    params: list
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(default_factory=list)

    def __post_init__(self):
        self.states = [AdamState(self.lr, self.beta1, self.beta2, self.eps) for _ in self.params]

    def step(self, grads: dict) -> None:
        for i, p in enumerate(self.params):
            if not np.all(np.isfinite(grads[p])):
                raise TrainingError(f"non-finite gradient for parameter {i} at Adam step {self.states[i].step + 1}")
        for p, s in zip(self.params, self.states):
            p.value = adam_step(p.value, grads[p], s)
