"""
Differentiation Core
====================
Dense float64 matrices with tape-based reverse-mode differentiation, plus the
AdamW optimizer with a cosine-annealed learning rate.

Every value is a 2-D ``numpy.ndarray`` (a ``DenseMatrix``). Operations build
``Node`` objects that remember their parents and a backward closure; ``backward``
walks the graph in reverse topological order and returns gradients for the
requested parameters.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils.exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

DenseMatrix = np.ndarray


def as_matrix(value) -> DenseMatrix:
    """Coerce scalars, vectors and matrices to a 2-D float64 array."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"Expected at most 2 dimensions, got shape {array.shape}", array.shape)
    return array


class Node:
    """
    A computation-graph node (value, gradient, parents, operation tag).

    Leaf nodes are created with ``Node.leaf``; every other node is produced by
    one of the module-level operations.
    """

    __slots__ = ('op', 'parents', 'value', 'grad', 'name', '_backward')

    def __init__(
        self,
        value: DenseMatrix,
        parents: Tuple['Node', ...] = (),
        op: str = 'leaf',
        name: Optional[str] = None,
    ):
        self.value = value
        self.parents = parents
        self.op = op
        self.name = name
        self.grad: Optional[DenseMatrix] = None
        self._backward: Callable[[], None] = _noop

    @classmethod
    def leaf(cls, value, name: str = None) -> 'Node':
        return cls(as_matrix(value), (), 'leaf', name)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def _accumulate(self, delta: DenseMatrix) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += delta

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, name={self.name!r})"


def _noop() -> None:
    return None


def constant(value) -> Node:
    """Wrap a fixed input matrix."""
    return Node(as_matrix(value), (), 'const')


# =============================================================================
# OPERATIONS
# =============================================================================

def matmul(a: Node, b: Node) -> Node:
    """Standard matrix product ``a @ b``."""
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.value.shape} x {b.value.shape}",
            a.value.shape,
            b.value.shape,
        )
    out = Node(a.value @ b.value, (a, b), 'matmul')

    def _backward():
        a._accumulate(out.grad @ b.value.T)
        b._accumulate(a.value.T @ out.grad)
    out._backward = _backward
    return out


def _unbroadcast(grad: DenseMatrix, shape: Tuple[int, int]) -> DenseMatrix:
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for left, right in zip(a.value.shape, b.value.shape):
        if left != right and left != 1 and right != 1:
            raise ShapeError(
                f"{op} operands cannot broadcast: {a.value.shape} and {b.value.shape}",
                a.value.shape,
                b.value.shape,
            )


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; a 1-row or 1-column operand broadcasts."""
    _check_broadcast(a, b, 'add')
    out = Node(a.value + b.value, (a, b), 'add')

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.value.shape))
        b._accumulate(_unbroadcast(out.grad, b.value.shape))
    out._backward = _backward
    return out


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, 'sub')
    out = Node(a.value - b.value, (a, b), 'sub')

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.value.shape))
        b._accumulate(-_unbroadcast(out.grad, b.value.shape))
    out._backward = _backward
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product with broadcasting."""
    _check_broadcast(a, b, 'mul')
    out = Node(a.value * b.value, (a, b), 'mul')

    def _backward():
        a._accumulate(_unbroadcast(out.grad * b.value, a.value.shape))
        b._accumulate(_unbroadcast(out.grad * a.value, b.value.shape))
    out._backward = _backward
    return out


def scale(a: Node, factor: float) -> Node:
    out = Node(a.value * factor, (a,), 'scale')

    def _backward():
        a._accumulate(out.grad * factor)
    out._backward = _backward
    return out


def square(a: Node) -> Node:
    out = Node(a.value * a.value, (a,), 'square')

    def _backward():
        a._accumulate(2.0 * a.value * out.grad)
    out._backward = _backward
    return out


def relu(a: Node) -> Node:
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,), 'relu')

    def _backward():
        a._accumulate(out.grad * mask)
    out._backward = _backward
    return out


def transpose(a: Node) -> Node:
    out = Node(np.ascontiguousarray(a.value.T), (a,), 'transpose')

    def _backward():
        a._accumulate(out.grad.T)
    out._backward = _backward
    return out


def reshape(a: Node, rows: int, cols: int) -> Node:
    """Row-major reshape; element count must be preserved."""
    if rows * cols != a.value.size:
        raise ShapeError(
            f"cannot reshape {a.value.shape} into ({rows}, {cols})",
            a.value.shape,
            (rows, cols),
        )
    out = Node(a.value.reshape(rows, cols), (a,), 'reshape')

    def _backward():
        a._accumulate(out.grad.reshape(a.value.shape))
    out._backward = _backward
    return out


def slice_cols(a: Node, start: int, stop: int) -> Node:
    out = Node(a.value[:, start:stop].copy(), (a,), 'slice_cols')

    def _backward():
        delta = np.zeros_like(a.value)
        delta[:, start:stop] = out.grad
        a._accumulate(delta)
    out._backward = _backward
    return out


def concat_cols(nodes: Sequence[Node]) -> Node:
    rows = {node.value.shape[0] for node in nodes}
    if len(rows) != 1:
        raise ShapeError(
            f"concat_cols row counts differ: {[n.value.shape for n in nodes]}",
            nodes[0].value.shape,
            nodes[-1].value.shape,
        )
    widths = [node.value.shape[1] for node in nodes]
    out = Node(np.concatenate([node.value for node in nodes], axis=1), tuple(nodes), 'concat_cols')

    def _backward():
        offset = 0
        for node, width in zip(nodes, widths):
            node._accumulate(out.grad[:, offset:offset + width])
            offset += width
    out._backward = _backward
    return out


def sum_all(a: Node) -> Node:
    out = Node(np.array([[a.value.sum()]]), (a,), 'sum')

    def _backward():
        a._accumulate(np.full_like(a.value, out.grad[0, 0]))
    out._backward = _backward
    return out


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax with max subtraction."""
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    out = Node(probs, (a,), 'softmax_rows')

    def _backward():
        inner = (out.grad * probs).sum(axis=1, keepdims=True)
        a._accumulate(probs * (out.grad - inner))
    out._backward = _backward
    return out


def mse(pred: Node, target: Node) -> Node:
    """Mean of squared elementwise differences."""
    if pred.value.shape != target.value.shape:
        raise ShapeError(
            f"mse shapes differ: {pred.value.shape} vs {target.value.shape}",
            pred.value.shape,
            target.value.shape,
        )
    return mean_all(square(sub(pred, target)))


def group_dot(query: Node, keys: Node, group: int) -> Node:
    """
    Per-row dot products between ``query`` (B x h) and ``group`` consecutive
    rows of ``keys`` ((B*group) x h). Returns a B x group score matrix.
    """
    batch, width = query.value.shape
    if keys.value.shape != (batch * group, width):
        raise ShapeError(
            f"group_dot expects keys of shape {(batch * group, width)}, got {keys.value.shape}",
            query.value.shape,
            keys.value.shape,
        )
    keys3 = keys.value.reshape(batch, group, width)
    out = Node(np.einsum('bh,blh->bl', query.value, keys3), (query, keys), 'group_dot')

    def _backward():
        query._accumulate(np.einsum('bl,blh->bh', out.grad, keys3))
        keys._accumulate((out.grad[:, :, None] * query.value[:, None, :]).reshape(keys.value.shape))
    out._backward = _backward
    return out


def group_weighted_sum(weights: Node, values: Node) -> Node:
    """
    Weighted sum of ``group`` consecutive rows of ``values`` ((B*group) x h) with
    per-row weights (B x group). Returns B x h.
    """
    batch, group = weights.value.shape
    width = values.value.shape[1]
    if values.value.shape[0] != batch * group:
        raise ShapeError(
            f"group_weighted_sum expects {batch * group} value rows, got {values.value.shape[0]}",
            weights.value.shape,
            values.value.shape,
        )
    values3 = values.value.reshape(batch, group, width)
    out = Node(np.einsum('bl,blh->bh', weights.value, values3), (weights, values), 'group_weighted_sum')

    def _backward():
        weights._accumulate(np.einsum('bh,blh->bl', out.grad, values3))
        values._accumulate((weights.value[:, :, None] * out.grad[:, None, :]).reshape(values.value.shape))
    out._backward = _backward
    return out


# =============================================================================
# REVERSE PASS
# =============================================================================

def _topological_order(root: Node) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node, params: Mapping[str, Node]) -> Dict[str, DenseMatrix]:
    """
    Propagate d(loss)/d(node) through the graph.

    Returns a gradient for every entry of ``params``; parameters the loss does
    not reach receive zeros.
    """
    if loss.value.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.value.shape}",
            {'shape': loss.value.shape}
        )
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is not None:
            node._backward()

    reached = {id(node) for node in order}
    grads = {}
    for name, node in params.items():
        if id(node) in reached and node.grad is not None:
            grads[name] = node.grad
        else:
            grads[name] = np.zeros_like(node.value)
    return grads


# =============================================================================
# PARAMETERS & OPTIMIZER
# =============================================================================

@dataclass
class ParameterSet:
    """Named trainable matrices. ``no_decay`` lists names excluded from weight decay."""

    arrays: Dict[str, DenseMatrix]
    no_decay: frozenset = frozenset()

    def nodes(self) -> Dict[str, Node]:
        return {name: Node(value, (), 'param', name) for name, value in self.arrays.items()}

    def copy(self) -> 'ParameterSet':
        return ParameterSet({k: v.copy() for k, v in self.arrays.items()}, self.no_decay)

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def __getitem__(self, name: str) -> DenseMatrix:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> Iterable[str]:
        return sorted(self.arrays)


def cosine_learning_rate(base_rate: float, step: int, period: int) -> float:
    """Cosine annealing from ``base_rate`` at step 0 to 0 at ``period`` (and after)."""
    if period <= 0:
        return base_rate
    if step >= period:
        return 0.0
    return 0.5 * base_rate * (1.0 + math.cos(math.pi * step / period))


@dataclass
class OptimizerState:
    base_rate: float = 0.001
    weight_decay: float = 0.01
    schedule_period: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, DenseMatrix] = field(default_factory=dict)
    second_moment: Dict[str, DenseMatrix] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ContractError(f"base rate must be positive, got {self.base_rate}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def for_params(cls, params: ParameterSet, **kwargs) -> 'OptimizerState':
        state = cls(**kwargs)
        for name, value in params.arrays.items():
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state

    @property
    def learning_rate(self) -> float:
        return cosine_learning_rate(self.base_rate, self.step, self.schedule_period)


def optimizer_step(
    params: ParameterSet,
    grads: Mapping[str, DenseMatrix],
    state: OptimizerState,
) -> ParameterSet:
    """
    One AdamW update (decoupled weight decay) in place.

    The rate used is the cosine-annealed rate at the current step; the step
    counter advances afterwards.
    """
    rate = state.learning_rate
    t = state.step + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, value in params.arrays.items():
        grad = grads[name]
        if grad.shape != value.shape or state.first_moment[name].shape != value.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match parameter '{name}' {value.shape}",
                value.shape,
                grad.shape,
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        if name not in params.no_decay and state.weight_decay:
            value *= 1.0 - rate * state.weight_decay
        value -= rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

    state.step = t
    return params
