"""A minimal reverse-mode differentiation tape.

Values live in an append-only list of nodes; every node stores its op kind, the
ids of the nodes it consumed, the forward value and a vector-Jacobian product.
Because ids only ever point backwards, replaying the list in reverse is a valid
topological order and each node is visited exactly once.

Only the handful of ops the spiking model needs are provided here; the layer
specific ops (LIF scan, convolution, attention, losses) register themselves
through :meth:`Tape.record` from their own modules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


class TapeError(RuntimeError):
    pass


def superspike_grad(u, v_threshold=1.0):
    """SuperSpike surrogate derivative ``(1 + |u - v|) ** -2``."""
    return 1.0 / (1.0 + np.abs(np.asarray(u, dtype=np.float64) - v_threshold)) ** 2


def fast_sigmoid(u, v_threshold=1.0):
    """Smooth spike stand-in whose exact derivative is :func:`superspike_grad`."""
    x = np.asarray(u, dtype=np.float64) - v_threshold
    return x / (1.0 + np.abs(x))


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None = None
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of a forward computation.

    ``Tape.visits`` counts node visits of the most recent backward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] | None = None
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, kind: str = "leaf") -> int:
        self.nodes.append(Node(kind, (), np.asarray(value, dtype=np.float64)))
        return len(self.nodes) - 1

    def const(self, value) -> int:
        return self.leaf(value, kind="const")

    def record(self, kind: str, inputs: Sequence[int], value, vjp: Callable,
               **saved) -> int:
        """Append an op node.

        ``vjp(grad_out)`` must return one gradient (or ``None``) per input.
        """
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise TapeError(f"{kind}: input id {i} does not reference an earlier node")
        self.nodes.append(Node(kind, tuple(inputs), value, vjp, saved))
        return n

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        if not self.nodes or not 0 <= loss < len(self.nodes):
            raise TapeError("backward called before any forward computation")
        out = self.nodes[loss].value
        if np.ndim(out) != 0 and np.size(out) != 1:
            raise TapeError("backward needs a scalar loss node")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(out, dtype=np.float64)}
        self.visits = 0
        for nid in range(loss, -1, -1):
            self.visits += 1
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjp is None:
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or self.nodes[i].kind == "const":
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        self.visits += len(self.nodes) - loss - 1  # nodes after the loss are visited but inert
        self.grads = grads
        return grads

    def grad(self, nid: int) -> np.ndarray:
        if self.grads is None:
            raise TapeError("no backward pass has run on this tape")
        g = self.grads.get(nid)
        return np.zeros_like(self.nodes[nid].value) if g is None else g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(tape: Tape, a: int, b: int) -> int:
    va, vb = tape.value(a), tape.value(b)
    return tape.record("add", (a, b), va + vb,
                       lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def mul(tape: Tape, a: int, b: int) -> int:
    va, vb = tape.value(a), tape.value(b)
    return tape.record("mul", (a, b), va * vb,
                       lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def scale(tape: Tape, a: int, factor: float) -> int:
    return tape.record("scale", (a,), tape.value(a) * factor, lambda g: (g * factor,))


def total(tape: Tape, a: int) -> int:
    va = tape.value(a)
    return tape.record("sum", (a,), np.asarray(va.sum()),
                       lambda g: (np.broadcast_to(g, va.shape).copy(),))


def matmul(tape: Tape, a: int, w: int) -> int:
    """``a @ w`` where ``a`` is ``(..., D)`` and ``w`` is ``(D, K)``."""
    va, vw = tape.value(a), tape.value(w)

    def vjp(g):
        ga = g @ vw.T
        gw = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return tape.record("matmul", (a, w), va @ vw, vjp)


def reshape(tape: Tape, a: int, shape) -> int:
    va = tape.value(a)
    return tape.record("reshape", (a,), va.reshape(shape), lambda g: (g.reshape(va.shape),))


def time_mean(tape: Tape, a: int) -> int:
    """Mean over axis 1 (the time axis of a ``(B, T, K)`` trace)."""
    va = tape.value(a)
    steps = va.shape[1]
    return tape.record("time_mean", (a,), va.mean(axis=1),
                       lambda g: (np.repeat(g[:, None, :] / steps, steps, axis=1),))


def log_softmax(tape: Tape, a: int) -> int:
    z = tape.value(a)
    shifted = z - z.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return tape.record("log_softmax", (a,), out,
                       lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def nll(tape: Tape, logp: int, labels) -> int:
    """Mean negative log-likelihood with probabilities floored at 1e-12."""
    lp = tape.value(logp)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(lp.shape[0])
    picked = lp[rows, labels]
    clamped = picked < LOG_PROB_FLOOR
    loss = -np.mean(np.maximum(picked, LOG_PROB_FLOOR))

    def vjp(g):
        out = np.zeros_like(lp)
        out[rows, labels] = np.where(clamped, 0.0, -g / lp.shape[0])
        return (out,)

    return tape.record("nll", (logp,), np.asarray(loss), vjp)
