"""Reverse-mode differentiation over a dynamically recorded graph.

The differentiable primitives at the bottom of this module (``add``,
``forward``, ``prox``, ...) are polymorphic: called on plain arrays they run
eagerly and return arrays; as soon as one argument (or an operator weight or
penalty bias) is a :class:`Node` they record a node whose value is computed by
the very same eager function. Inference code written against these primitives
therefore runs unchanged in both modes, and recorded values match eager
results bit for bit.

A graph is confined to the thread that built it.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from ..core.errors import DeepCAError, DimensionError, NumericalError, UsageError
from ..models.operators import LinearOperator
from ..models.penalty import PenaltySpec
from ..models.tensor import as_tensor
from . import prox as prox_ops


class Op:
    tag = "op"

    def compute(self, *values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: np.ndarray, node: "Node", needs: Sequence[bool]) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Node:
    __slots__ = ("op", "parents", "value", "grad", "name", "requires_grad")
    __array_ufunc__ = None

    def __init__(self, value, op: Optional[Op] = None, parents: Sequence["Node"] = (),
                 requires_grad: bool = False, name: Optional[str] = None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def tag(self) -> str:
        return self.op.tag if self.op is not None else "leaf"

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __repr__(self):
        return f"Node(tag={self.tag}, shape={self.shape}, name={self.name})"


def leaf(value, name: Optional[str] = None, requires_grad: bool = True) -> Node:
    return Node(as_tensor(value), requires_grad=requires_grad, name=name)


def is_node(x: Any) -> bool:
    return isinstance(x, Node)


def value_of(x: Any):
    return x.value if isinstance(x, Node) else x


def record(op: Op, *inputs) -> Node:
    parents = [x if isinstance(x, Node) else Node(x) for x in inputs]
    value = op.compute(*[p.value for p in parents])
    return Node(value, op, parents, requires_grad=any(p.requires_grad for p in parents))


def topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    state: Dict[int, int] = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise DeepCAError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            if state.get(id(parent)) != 2:
                if state.get(id(parent)) == 1:
                    raise DeepCAError("cycle detected in computation graph")
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[Node, np.ndarray]:
    """Backpropagate from a scalar node; returns gradients of every grad-requiring leaf."""
    if not isinstance(loss, Node) or np.size(loss.value) != 1:
        raise UsageError("backward() needs a scalar loss node")
    order = topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g
        if node.is_leaf:
            continue
        needs = [p.requires_grad for p in node.parents]
        for parent, pg in zip(node.parents, node.op.vjp(g, node, needs)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {n: n.grad for n in order if n.is_leaf and n.requires_grad and n.grad is not None}


# ---------------------------------------------------------------- operations


class Add(Op):
    tag = "add"

    def compute(self, a, b):
        return np.add(a, b)

    def vjp(self, g, node, needs):
        return g, g


class Sub(Op):
    tag = "sub"

    def compute(self, a, b):
        return np.subtract(a, b)

    def vjp(self, g, node, needs):
        return g, -g


class Scale(Op):
    tag = "scale"

    def __init__(self, alpha: float):
        self.alpha = alpha

    def compute(self, a):
        return np.multiply(self.alpha, a)

    def vjp(self, g, node, needs):
        return (self.alpha * g,)


class Hadamard(Op):
    tag = "hadamard"

    def compute(self, a, b):
        return np.multiply(a, b)

    def vjp(self, g, node, needs):
        a, b = (p.value for p in node.parents)
        return g * b, g * a


class Forward(Op):
    tag = "matmul"

    def __init__(self, op: LinearOperator):
        self.op = op
        self.tag = "matmul" if op.kind == "dense" else "conv"

    def compute(self, weight, w):
        return self.op.forward_with(weight, w)

    def vjp(self, g, node, needs):
        weight, w = (p.value for p in node.parents)
        g_weight = self.op.forward_weight_grad(w, g) if needs[0] else None
        g_w = self.op.adjoint_with(weight, g) if needs[1] else None
        return g_weight, g_w


class Adjoint(Op):
    tag = "adjoint"

    def __init__(self, op: LinearOperator):
        self.op = op

    def compute(self, weight, v):
        return self.op.adjoint_with(weight, v)

    def vjp(self, g, node, needs):
        weight, v = (p.value for p in node.parents)
        g_weight = self.op.adjoint_weight_grad(v, g) if needs[0] else None
        g_v = self.op.forward_with(weight, g) if needs[1] else None
        return g_weight, g_v


class Prox(Op):
    def __init__(self, spec: PenaltySpec):
        self.spec = spec
        self.tag = f"prox-{spec.kind}"

    def compute(self, v, bias=None):
        spec = self.spec if bias is None else self.spec.with_bias(bias)
        return prox_ops.prox(spec, v)

    def vjp(self, g, node, needs):
        g_v, g_bias = prox_ops.prox_vjp(self.spec, node.value, g)
        return (g_v,) if len(node.parents) == 1 else (g_v, g_bias)


class GramSolver:
    """Cached Cholesky factorization of B^T B + rho I for one dense layer."""

    def __init__(self, op: LinearOperator, rho: float):
        if op.kind != "dense":
            raise DimensionError("exact w-update needs a dense layer")
        self.op = op
        self.rho = rho
        weight = value_of(op.weight)
        gram = weight.T @ weight + rho * np.eye(weight.shape[1])
        try:
            self.factor = scipy.linalg.cho_factor(gram, lower=False, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise NumericalError(f"factorization of B^T B + rho I failed: {e}") from e

    def solve(self, r: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.factor, r.T, check_finite=False).T


class GramSolve(Op):
    tag = "solve"

    def __init__(self, solver: GramSolver):
        self.solver = solver

    def compute(self, weight, r):
        return self.solver.solve(r)

    def vjp(self, g, node, needs):
        weight = node.parents[0].value
        g_r = self.solver.solve(g)
        g_weight = None
        if needs[0]:
            p = weight.shape[1]
            g_m = -(g_r.reshape(-1, p).T @ node.value.reshape(-1, p))
            g_weight = weight @ (g_m + g_m.T)
        return g_weight, g_r


class HalfSquaredNorm(Op):
    tag = "loss-half-sq"

    def compute(self, a):
        return np.asarray(0.5 * np.sum(a * a))

    def vjp(self, g, node, needs):
        return (g * node.parents[0].value,)


class Total(Op):
    tag = "sum"

    def compute(self, a):
        return np.asarray(np.sum(a))

    def vjp(self, g, node, needs):
        return (np.broadcast_to(g, node.parents[0].value.shape).copy(),)


class SoftmaxCrossEntropy(Op):
    tag = "loss-softmax-ce"

    def __init__(self, labels: np.ndarray):
        self.labels = labels

    def compute(self, scores):
        return _softmax_ce(scores, self.labels)

    def vjp(self, g, node, needs):
        scores = node.parents[0].value
        probs = softmax(scores, axis=-1)
        onehot = np.zeros_like(scores)
        np.put_along_axis(onehot, self.labels[..., None], 1.0, axis=-1)
        return (g * (probs - onehot),)


def _softmax_ce(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = np.take_along_axis(scores, labels[..., None], axis=-1)[..., 0]
    return np.asarray(np.sum(logsumexp(scores, axis=-1) - picked))


# ---------------------------------------------------- differentiable primitives


def _any_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def add(a, b):
    return record(Add(), a, b) if _any_node(a, b) else np.add(a, b)


def sub(a, b):
    return record(Sub(), a, b) if _any_node(a, b) else np.subtract(a, b)


def scale(alpha: float, a):
    return record(Scale(alpha), a) if _any_node(a) else np.multiply(alpha, a)


def hadamard(a, b):
    return record(Hadamard(), a, b) if _any_node(a, b) else np.multiply(a, b)


def forward(op: LinearOperator, w):
    """B w."""
    if _any_node(op.weight, w):
        return record(Forward(op), op.weight, w)
    return op.forward_with(op.weight, w)


def adjoint(op: LinearOperator, v):
    """B^T v."""
    if _any_node(op.weight, v):
        return record(Adjoint(op), op.weight, v)
    return op.adjoint_with(op.weight, v)


def prox(spec: PenaltySpec, v):
    if _any_node(spec.bias, v):
        if spec.kind == "nonneg_l1":
            return record(Prox(spec), v, spec.bias)
        return record(Prox(spec), v)
    return prox_ops.prox(spec, v)


def gram_solve(solver: GramSolver, r):
    """(B^T B + rho I)^{-1} r."""
    if _any_node(solver.op.weight, r):
        return record(GramSolve(solver), solver.op.weight, r)
    return solver.solve(r)


def half_squared_norm(a):
    return record(HalfSquaredNorm(), a) if _any_node(a) else HalfSquaredNorm().compute(a)


def total(a):
    return record(Total(), a) if _any_node(a) else Total().compute(a)


def softmax_cross_entropy(scores, labels):
    labels = np.asarray(labels, dtype=np.int64)
    k = np.shape(value_of(scores))[-1]
    if np.shape(value_of(scores))[:-1] != labels.shape:
        raise DimensionError(f"scores {np.shape(value_of(scores))} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"class index out of range [0, {k})")
    if _any_node(scores):
        return record(SoftmaxCrossEntropy(labels), scores)
    return _softmax_ce(scores, labels)
