"""Differentiable substrate for the routing controller.

Reverse-mode autodiff over the controller's small fixed graph: linear heads,
two-layer tanh FFNs, temperature softmax, reparameterized Gaussian noise,
and scalar log-Gamma. Values are float64 numpy arrays; each Node carries a
backward closure, and `backward` walks the DAG in reverse topological order,
flushing leaf gradients into their ParamTensor accumulators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma as _digamma


class ShapeMismatch(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


# -- parameters ---------------------------------------------------------------


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray


@dataclass(frozen=True)
class FfnSpec:
    in_dim: int
    hidden_dim: int
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("FFN dims must be >= 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class LinearParams:
    weight: ParamTensor  # (out_dim, in_dim)
    bias: ParamTensor  # (out_dim,)


@dataclass
class FfnParams:
    spec: FfnSpec
    first: LinearParams
    second: LinearParams


class ParamStore:
    """Named parameter registry with seeded initialization."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self.params: dict[str, ParamTensor] = {}

    def _register(self, name: str, values: np.ndarray) -> ParamTensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        pt = ParamTensor(name=name, values=values, grad=np.zeros_like(values))
        self.params[name] = pt
        return pt

    def glorot(self, name: str, out_dim: int, in_dim: int) -> ParamTensor:
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        return self._register(name, self._rng.uniform(-bound, bound, size=(out_dim, in_dim)))

    def zeros(self, name: str, shape) -> ParamTensor:
        return self._register(name, np.zeros(shape, dtype=np.float64))

    def linear(self, name: str, in_dim: int, out_dim: int) -> LinearParams:
        return LinearParams(
            weight=self.glorot(name + ".W", out_dim, in_dim),
            bias=self.zeros(name + ".b", (out_dim,)),
        )

    def ffn(self, name: str, spec: FfnSpec) -> FfnParams:
        return FfnParams(
            spec=spec,
            first=self.linear(name + ".l1", spec.in_dim, spec.hidden_dim),
            second=self.linear(name + ".l2", spec.hidden_dim, spec.out_dim),
        )

    def zero_grads(self) -> None:
        for pt in self.params.values():
            pt.grad[...] = 0.0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(pt.grad**2)) for pt in self.params.values()))


def sgd_step(store: ParamStore, alpha: float) -> None:
    """values <- values - alpha * grad, then zero grads.

    Aborts before touching any parameter if a gradient is non-finite.
    """
    for pt in store.params.values():
        if not np.all(np.isfinite(pt.grad)):
            raise NonFiniteGradient(pt.name)
    for pt in store.params.values():
        pt.values -= alpha * pt.grad
        pt.grad[...] = 0.0


# -- autodiff graph -----------------------------------------------------------


class Node:
    __slots__ = ("value", "grad", "_parents", "_backward", "param")

    def __init__(self, value, parents=(), backward=None, param: ParamTensor | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self._parents = parents
        self._backward = backward
        self.param = param


def constant(x) -> Node:
    return Node(x)


def leaf(pt: ParamTensor) -> Node:
    return Node(pt.values, param=pt)


def backward(root: Node, seed=1.0) -> None:
    """Accumulate d(root)/d(leaf) into every reachable ParamTensor's grad."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    root.grad = root.grad + np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        if node.param is not None:
            node.param.grad += node.grad


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"add: {a.value.shape} vs {b.value.shape}")

    def back(g):
        a.grad = a.grad + g
        b.grad = b.grad + g

    return Node(a.value + b.value, (a, b), back)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"mul: {a.value.shape} vs {b.value.shape}")

    def back(g):
        a.grad = a.grad + g * b.value
        b.grad = b.grad + g * a.value

    return Node(a.value * b.value, (a, b), back)


def scale(x: Node, c: float) -> Node:
    def back(g):
        x.grad = x.grad + g * c

    return Node(x.value * c, (x,), back)


def add_const(x: Node, c) -> Node:
    def back(g):
        x.grad = x.grad + g

    return Node(x.value + c, (x,), back)


def sum_nodes(nodes: list[Node]) -> Node:
    if not nodes:
        return constant(0.0)
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return total


def mean_nodes(nodes: list[Node]) -> Node:
    return scale(sum_nodes(nodes), 1.0 / len(nodes))


def concat(parts: list[Node]) -> Node:
    sizes = [p.value.shape[0] for p in parts]

    def back(g):
        offset = 0
        for p, size in zip(parts, sizes):
            p.grad = p.grad + g[offset : offset + size]
            offset += size

    return Node(np.concatenate([p.value for p in parts]), tuple(parts), back)


def dot(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"dot: {a.value.shape} vs {b.value.shape}")

    def back(g):
        a.grad = a.grad + g * b.value
        b.grad = b.grad + g * a.value

    return Node(float(a.value @ b.value), (a, b), back)


def pick(x: Node, index: int) -> Node:
    def back(g):
        bump = np.zeros_like(x.value)
        bump[index] = g
        x.grad = x.grad + bump

    return Node(float(x.value[index]), (x,), back)


def vector_of(scalars: list[Node]) -> Node:
    def back(g):
        for i, s in enumerate(scalars):
            s.grad = s.grad + g[i]

    return Node(np.array([float(s.value) for s in scalars]), tuple(scalars), back)


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)

    def back(g):
        x.grad = x.grad + g * (1.0 - t * t)

    return Node(t, (x,), back)


def sigmoid(x: Node) -> Node:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def back(g):
        x.grad = x.grad + g * s * (1.0 - s)

    return Node(s, (x,), back)


def softplus(x: Node) -> Node:
    v = np.logaddexp(0.0, x.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def back(g):
        x.grad = x.grad + g * sig

    return Node(v, (x,), back)


def log(x: Node) -> Node:
    def back(g):
        x.grad = x.grad + g / x.value

    return Node(np.log(x.value), (x,), back)


def linear(params: LinearParams, x: Node) -> Node:
    """W @ x + b with gradients to W, b, and x."""
    w = leaf(params.weight)
    b = leaf(params.bias)
    out_dim, in_dim = w.value.shape
    if x.value.shape != (in_dim,):
        raise ShapeMismatch(f"linear: x has shape {x.value.shape}, expected ({in_dim},)")

    def back(g):
        w.grad = w.grad + np.outer(g, x.value)
        b.grad = b.grad + g
        x.grad = x.grad + w.value.T @ g

    return Node(w.value @ x.value + b.value, (w, b, x), back)


def ffn(params: FfnParams, x: Node) -> Node:
    """linear -> tanh -> linear."""
    if x.value.shape != (params.spec.in_dim,):
        raise ShapeMismatch(
            f"ffn: x has shape {x.value.shape}, expected ({params.spec.in_dim},)"
        )
    return linear(params.second, tanh(linear(params.first, x)))


def softmax_t(logits, tau: float):
    """Temperature softmax p_i = exp(l_i / tau) / sum; max-shifted for
    stability. Accepts a Node (differentiable) or a plain array."""
    if tau <= 0:
        raise NonPositiveTemperature(f"tau = {tau}")
    if isinstance(logits, Node):
        p = _softmax_values(logits.value, tau)

        def back(g):
            inner = float(g @ p)
            logits.grad = logits.grad + (g * p - p * inner) / tau

        return Node(p, (logits,), back)
    return _softmax_values(np.asarray(logits, dtype=np.float64), tau)


def _softmax_values(logits: np.ndarray, tau: float) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise DomainError("non-finite logits")
    shifted = (logits - np.max(logits)) / tau
    e = np.exp(shifted)
    return e / np.sum(e)


def gaussian_sample(mu: Node, sigma: Node, eps: np.ndarray) -> Node:
    """Reparameterized draw mu + sigma * eps; eps is a fixed noise vector."""
    eps = np.asarray(eps, dtype=np.float64)
    if mu.value.shape != sigma.value.shape or mu.value.shape != eps.shape:
        raise ShapeMismatch(
            f"gaussian_sample: {mu.value.shape} / {sigma.value.shape} / {eps.shape}"
        )

    def back(g):
        mu.grad = mu.grad + g
        sigma.grad = sigma.grad + g * eps

    return Node(mu.value + sigma.value * eps, (mu, sigma), back)


def ln_gamma(x):
    """log Gamma(x) for x > 0. Node input gives a differentiable scalar
    (derivative is the digamma function)."""
    if isinstance(x, Node):
        xv = float(x.value)
        if xv <= 0:
            raise DomainError(f"ln_gamma domain: x = {xv}")
        d = float(_digamma(xv))

        def back(g):
            x.grad = x.grad + g * d

        return Node(math.lgamma(xv), (x,), back)
    xv = float(x)
    if xv <= 0:
        raise DomainError(f"ln_gamma domain: x = {xv}")
    return math.lgamma(xv)


def entropy(p: Node) -> Node:
    """-sum p log p of a probability vector node (entries assumed > 0)."""
    return scale(dot(p, log(p)), -1.0)
