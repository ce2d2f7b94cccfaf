"""Reverse-mode differentiation sized for the unfolded solver.

A Tape records nodes in construction order; backward walks them in reverse and
accumulates vector-Jacobian products. The primitive set is exactly what the
GNN-parameterized layers need: elementwise arithmetic with an epsilon-guarded
division, matrix products, relu/sigmoid/saturate/ln, reductions, and
broadcasting. Values are dense float64 arrays; every primitive accepts extra
leading batch axes, so one graph can evaluate a whole training batch.

Channel-derived quantities enter as constants and never receive gradients;
only parameter nodes appear in the GradientMap.

Subgradient conventions are fixed so tests can be exact: relu'(0) = 0, and the
saturate derivative is 0 at and beyond the clamp boundaries. Guarded division
computes x / max(y, 1e-12) in forward and backward alike, treating y as
constant wherever the guard is active.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._numeric import EPS_GUARD, sigmoid as _sigmoid_forward

__all__ = [
    "Tape", "Node", "constant", "parameter", "add", "sub", "mul", "div",
    "matvec", "matmat", "rowsum", "square", "relu", "sigmoid", "saturate",
    "ln", "sum_all", "dot", "broadcast_to", "backward", "finite_diff_check",
    "FiniteDiffReport",
]


class Tape:
    """Construction-ordered node list; one tape per forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_names: set[str] = set()

    def min_kink_gap(self) -> float:
        """Distance from the nearest relu/saturate kink over the whole graph."""
        gaps = [n.kink_gap for n in self.nodes if n.kink_gap is not None]
        return float(min(gaps)) if gaps else np.inf


class Node:
    __slots__ = ("tape", "idx", "value", "tag", "parents", "vjps", "param_name", "kink_gap")

    def __init__(self, tape: Tape, value, tag: str, parents=(), vjps=(), param_name=None):
        self.tape = tape
        self.idx = len(tape.nodes)
        self.value = np.asarray(value, dtype=float)
        self.tag = tag
        self.parents = parents
        self.vjps = vjps  # aligned with parents; None entries skip propagation
        self.param_name = param_name
        self.kink_gap = None
        tape.nodes.append(self)

    @property
    def needs_grad(self) -> bool:
        return self.tag == "parameter" or any(v is not None for v in self.vjps)

    # arithmetic sugar; non-Node operands are lifted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else constant(tape, x)


def _pair(a, b):
    if isinstance(a, Node):
        return a, _lift(a.tape, b)
    return _lift(b.tape, a), b


def _vjp_or_none(node: Node, fn: Optional[Callable]):
    # constants and parameter-free subgraphs take no gradient traffic
    return fn if node.needs_grad else None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def constant(tape: Tape, value) -> Node:
    return Node(tape, value, "constant")


def parameter(tape: Tape, name: str, value) -> Node:
    if name in tape._param_names:
        raise ValueError(f"duplicate parameter name {name!r}")
    tape._param_names.add(name)
    return Node(tape, value, "parameter", param_name=name)


def add(a, b) -> Node:
    a, b = _pair(a, b)
    va, vb = a.value, b.value
    return Node(
        a.tape, va + vb, "add", (a, b),
        (_vjp_or_none(a, lambda g: _unbroadcast(g, va.shape)),
         _vjp_or_none(b, lambda g: _unbroadcast(g, vb.shape))),
    )


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    va, vb = a.value, b.value
    return Node(
        a.tape, va - vb, "sub", (a, b),
        (_vjp_or_none(a, lambda g: _unbroadcast(g, va.shape)),
         _vjp_or_none(b, lambda g: _unbroadcast(-g, vb.shape))),
    )


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    va, vb = a.value, b.value
    return Node(
        a.tape, va * vb, "mul", (a, b),
        (_vjp_or_none(a, lambda g: _unbroadcast(g * vb, va.shape)),
         _vjp_or_none(b, lambda g: _unbroadcast(g * va, vb.shape))),
    )


def div(a, b) -> Node:
    """Guarded division a / max(b, eps); meant for nonnegative denominators.

    Where the guard is active (b <= eps) the denominator is treated as the
    constant eps in both directions, so forward and backward stay consistent.
    """
    a, b = _pair(a, b)
    va, vb = a.value, b.value
    safe = np.maximum(vb, EPS_GUARD)
    live = vb > EPS_GUARD
    out = va / safe
    return Node(
        a.tape, out, "div", (a, b),
        (_vjp_or_none(a, lambda g: _unbroadcast(g / safe, va.shape)),
         _vjp_or_none(b, lambda g: _unbroadcast(np.where(live, -g * va / safe ** 2, 0.0), vb.shape))),
    )


def matvec(A, x) -> Node:
    """(..., m, n) @ (..., n) -> (..., m)."""
    A, x = _pair(A, x)
    vA, vx = A.value, x.value
    out = np.matmul(vA, vx[..., :, None])[..., 0]

    def vjp_A(g):
        return _unbroadcast(g[..., :, None] * vx[..., None, :], vA.shape)

    def vjp_x(g):
        return _unbroadcast(np.matmul(np.swapaxes(vA, -1, -2), g[..., :, None])[..., 0], vx.shape)

    return Node(A.tape, out, "matvec", (A, x),
                (_vjp_or_none(A, vjp_A), _vjp_or_none(x, vjp_x)))


def matmat(A, B) -> Node:
    """(..., m, k) @ (..., k, n) -> (..., m, n)."""
    A, B = _pair(A, B)
    vA, vB = A.value, B.value
    out = np.matmul(vA, vB)

    def vjp_A(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(vB, -1, -2)), vA.shape)

    def vjp_B(g):
        return _unbroadcast(np.matmul(np.swapaxes(vA, -1, -2), g), vB.shape)

    return Node(A.tape, out, "matmat", (A, B),
                (_vjp_or_none(A, vjp_A), _vjp_or_none(B, vjp_B)))


def rowsum(A) -> Node:
    """Sum over the last axis: (..., m, n) -> (..., m)."""
    vA = A.value
    return Node(
        A.tape, vA.sum(axis=-1), "rowsum", (A,),
        (_vjp_or_none(A, lambda g: np.broadcast_to(g[..., None], vA.shape).copy()),),
    )


def square(x) -> Node:
    vx = x.value
    return Node(x.tape, vx ** 2, "elementwise-square", (x,),
                (_vjp_or_none(x, lambda g: 2.0 * vx * g),))


def relu(x) -> Node:
    vx = x.value
    node = Node(x.tape, np.maximum(vx, 0.0), "relu", (x,),
                (_vjp_or_none(x, lambda g: g * (vx > 0)),))
    node.kink_gap = float(np.min(np.abs(vx))) if vx.size else np.inf
    return node


def sigmoid(x) -> Node:
    out = _sigmoid_forward(x.value)  # shared with the numpy path, bit-identical
    return Node(x.tape, out, "sigmoid", (x,),
                (_vjp_or_none(x, lambda g: g * out * (1.0 - out)),))


def saturate(x, lo=None, hi=None) -> Node:
    """Clamp to [lo, hi]; derivative 1 strictly inside, 0 outside and at bounds."""
    vx = x.value
    out = vx
    inside = np.ones(vx.shape, dtype=bool)
    gap = np.inf
    if lo is not None:
        out = np.maximum(out, lo)
        inside &= vx > lo
        if vx.size:
            gap = min(gap, float(np.min(np.abs(vx - lo))))
    if hi is not None:
        out = np.minimum(out, hi)
        inside &= vx < hi
        if vx.size:
            gap = min(gap, float(np.min(np.abs(vx - hi))))
    node = Node(x.tape, out, f"saturate({lo},{hi})", (x,),
                (_vjp_or_none(x, lambda g: g * inside),))
    node.kink_gap = gap
    return node


def ln(x) -> Node:
    vx = x.value
    if np.any(vx <= 0):
        raise ValueError("ln needs strictly positive inputs")
    return Node(x.tape, np.log(vx), "ln", (x,),
                (_vjp_or_none(x, lambda g: g / vx),))


def sum_all(x) -> Node:
    vx = x.value
    return Node(x.tape, vx.sum(), "sum", (x,),
                (_vjp_or_none(x, lambda g: np.broadcast_to(g, vx.shape).copy()),))


def dot(x, y) -> Node:
    """Inner product over the last axis: (..., n) x (..., n) -> (...)."""
    x, y = _pair(x, y)
    vx, vy = x.value, y.value
    return Node(
        x.tape, np.sum(vx * vy, axis=-1), "dot", (x, y),
        (_vjp_or_none(x, lambda g: _unbroadcast(g[..., None] * vy, vx.shape)),
         _vjp_or_none(y, lambda g: _unbroadcast(g[..., None] * vx, vy.shape))),
    )


def broadcast_to(x, shape) -> Node:
    vx = x.value
    shape = tuple(shape)
    return Node(x.tape, np.broadcast_to(vx, shape).copy(), "broadcast", (x,),
                (_vjp_or_none(x, lambda g: _unbroadcast(g, vx.shape)),))


def backward(loss: Node) -> dict:
    """Reverse accumulation from a scalar loss; returns {param name: gradient}.

    Deterministic: identical graphs walk in identical order, so gradients are
    bit-identical across runs.
    """
    if loss.value.ndim != 0:
        raise ValueError("loss must be scalar")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.idx: np.ones(())}
    out: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = grads.pop(node.idx, None)
        if g is None:
            continue
        if node.tag == "parameter":
            out[node.param_name] = np.broadcast_to(g, node.value.shape).astype(float)
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if vjp is None:
                continue
            contribution = vjp(g)
            if parent.idx in grads:
                grads[parent.idx] = grads[parent.idx] + contribution
            else:
                grads[parent.idx] = np.asarray(contribution, dtype=float)
    return out


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    kink_ok: bool
    min_kink_gap: float
    evaluations: int

    def __float__(self):
        return self.max_rel_error


def finite_diff_check(f, theta: dict, h: float, n_directions: Optional[int] = None,
                      seed: int = 0) -> FiniteDiffReport:
    """Compare backward() against central differences of f around theta.

    f maps a {name: array} dict to a scalar Node on a fresh tape. With
    n_directions set, random unit directions in the stacked parameter space
    are probed; otherwise every coordinate is. The report's kink_ok flag says
    whether every evaluation stayed further than 1e3*h from any relu/saturate
    kink; a False flag marks the comparison inconclusive rather than failed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = {k: np.asarray(v, dtype=float) for k, v in theta.items()}
    loss = f(theta)
    analytic = backward(loss)
    gaps = [loss.tape.min_kink_gap()]
    evals = 1

    names = sorted(theta)
    # a parameter whose gradient path is dead (all relus off, say) simply has
    # zero gradient; backward omits it, the comparison should not
    analytic = {k: analytic.get(k, np.zeros_like(theta[k])) for k in names}

    def value_at(t):
        nonlocal evals
        node = f(t)
        gaps.append(node.tape.min_kink_gap())
        evals += 1
        return float(node.value)

    def perturbed(direction, scale):
        return {k: theta[k] + scale * direction[k] for k in names}

    max_rel = 0.0
    if n_directions is None:
        for k in names:
            flat = theta[k].reshape(-1)
            for i in range(flat.size):
                d = {n: np.zeros_like(theta[n]) for n in names}
                d[k].reshape(-1)[i] = 1.0
                fd = (value_at(perturbed(d, h)) - value_at(perturbed(d, -h))) / (2 * h)
                a = float(analytic[k].reshape(-1)[i])
                max_rel = max(max_rel, abs(a - fd) / max(abs(a), 1e-8))
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        for _ in range(n_directions):
            d = {k: rng.standard_normal(theta[k].shape) for k in names}
            norm = np.sqrt(sum(float(np.sum(v ** 2)) for v in d.values()))
            d = {k: v / norm for k, v in d.items()}
            a = sum(float(np.sum(analytic[k] * d[k])) for k in names)
            fd = (value_at(perturbed(d, h)) - value_at(perturbed(d, -h))) / (2 * h)
            max_rel = max(max_rel, abs(a - fd) / max(abs(a), 1e-8))

    min_gap = float(min(gaps))
    return FiniteDiffReport(
        max_rel_error=max_rel,
        kink_ok=bool(min_gap > 1e3 * h),
        min_kink_gap=min_gap,
        evaluations=evals,
    )
