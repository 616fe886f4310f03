"""Jaccard similarity on spike tensors and the attention layers built on it.

Two code paths exist. The sparse path works on sorted flat indices of the
non-zero spikes and never touches silent positions; it is what the benchmark
times. The dense path (``*_op`` functions) records onto a :class:`~spikegest.tape.Tape`
so the attention can be trained with surrogate gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp

DEFAULT_EPS = 1e-6


class AttentionShapeError(ValueError):
    pass


def _as_binary(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{name} must be binary")
    return x


def jaccard_minmax(x, y, eps: float = DEFAULT_EPS) -> float:
    """``sum(min(x, y)) / (sum(max(x, y)) + eps)`` evaluated elementwise."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise AttentionShapeError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.minimum(x, y).sum() / (np.maximum(x, y).sum() + eps))


def jaccard_indices(a: np.ndarray, b: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    """Jaccard of two sorted, duplicate-free index arrays: ``|A∩B| / (|A∪B| + eps)``."""
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / (a.size + b.size - inter + eps)


def merge_count(a, b) -> tuple[int, int, int]:
    """Two-pointer merge of sorted index lists.

    Returns ``(intersection, union, steps)`` where ``steps`` counts loop
    iterations; it is bounded by ``len(a) + len(b)`` regardless of the length
    of the vectors the indices came from.
    """
    i = j = inter = steps = 0
    na, nb = len(a), len(b)
    while i < na and j < nb:
        steps += 1
        if a[i] == b[j]:
            inter += 1
            i += 1
            j += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return inter, na + nb - inter, steps


def jaccard(x, y, eps: float = DEFAULT_EPS) -> float:
    """Jaccard similarity of two binary vectors via their non-zero positions."""
    x = _as_binary(x, "x").ravel()
    y = _as_binary(y, "y").ravel()
    if x.shape != y.shape:
        raise AttentionShapeError(f"length mismatch: {x.size} vs {y.size}")
    return jaccard_indices(np.flatnonzero(x), np.flatnonzero(y), eps)


@dataclass(frozen=True)
class AttentionTriplet:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if not (np.shape(self.Q) == np.shape(self.K) == np.shape(self.V)):
            raise AttentionShapeError("Q, K and V must share one shape")
        if np.ndim(self.Q) != 3:
            raise AttentionShapeError("Q, K, V must be (T, C, L)")
        for name in "QKV":
            _as_binary(getattr(self, name), name)


def sja_channelwise(triplet: AttentionTriplet, eps: float = DEFAULT_EPS,
                    per_channel: bool = False) -> np.ndarray:
    """Scale ``V`` by the Jaccard similarity of ``Q`` and ``K``.

    By default one scalar is computed from the flattened ``Q`` and ``K`` and
    applied to every channel. ``per_channel=True`` computes one scalar per
    channel instead.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (triplet.Q, triplet.K, triplet.V))
    if not per_channel:
        return jaccard(triplet.Q, triplet.K, eps) * v
    weights = np.array([jaccard(triplet.Q[:, c], triplet.K[:, c], eps)
                        for c in range(q.shape[1])])
    return weights[None, :, None] * v


def sja_elementwise(triplet: AttentionTriplet, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-position weights: Jaccard over the time axis of each ``(c, n)`` column."""
    q = np.asarray(triplet.Q, dtype=np.float64)
    k = np.asarray(triplet.K, dtype=np.float64)
    w = np.minimum(q, k).sum(axis=0) / (np.maximum(q, k).sum(axis=0) + eps)
    return w[None] * np.asarray(triplet.V, dtype=np.float64)


def dense_attention(Q, K, V) -> np.ndarray:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d)) V`` with row softmax."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.shape != Q.shape or V.shape[0] != K.shape[0]:
        raise AttentionShapeError(f"incompatible shapes {Q.shape}, {K.shape}, {V.shape}")
    d = Q.shape[1]
    if d == 0:
        raise AttentionShapeError("d must be positive")
    scores = Q @ K.T / np.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ V


def qkv_project(features, model) -> AttentionTriplet:
    """Run the model's three 1x1 ConvLIF projections on a ``(T, 2N, L)`` spike train."""
    from .snn import conv_lif_forward

    data = getattr(features, "data", features)
    out = [conv_lif_forward(data, model.params[f"{key}_w"], model.params[f"{key}_b"],
                            model.lif[name]).data
           for key, name in (("q", "query"), ("k", "key"), ("v", "value"))]
    return AttentionTriplet(*out)


# -- sparse event path -----------------------------------------------------

@dataclass(frozen=True)
class SparseSpikes:
    """Sorted flat (C-order) indices of the ones in a ``(T, C, L)`` spike tensor."""

    shape: tuple[int, int, int]
    indices: np.ndarray

    @classmethod
    def from_dense(cls, x) -> "SparseSpikes":
        x = np.asarray(x)
        return cls(tuple(x.shape), np.flatnonzero(x))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self, value=1.0) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)))
        out[self.indices] = value
        return out.reshape(self.shape)


def sparse_sja_channelwise(q: SparseSpikes, k: SparseSpikes, v: SparseSpikes,
                           eps: float = DEFAULT_EPS) -> tuple[np.ndarray, float]:
    """Sparse channel-wise SJA; returns ``(indices of V_new, shared weight)``."""
    return v.indices, jaccard_indices(q.indices, k.indices, eps)


def sparse_sja_elementwise(q: SparseSpikes, k: SparseSpikes, v: SparseSpikes,
                           eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Sparse element-wise SJA; returns ``(indices of V_new, per-nonzero weights)``."""
    cells = q.shape[1] * q.shape[2]
    inter = np.intersect1d(q.indices, k.indices, assume_unique=True)
    pos_v = v.indices % cells
    # per-position counts, read out at the positions V actually uses
    def count(idx):
        return np.bincount(idx % cells, minlength=cells)[pos_v]
    n_int = count(inter)
    union = count(q.indices) + count(k.indices) - n_int
    return v.indices, n_int / (union + eps)


# -- differentiable ops ----------------------------------------------------

def _tie_split(a: np.ndarray, b: np.ndarray):
    """d min(a,b)/da and d max(a,b)/da, splitting ties evenly."""
    lt = (a < b).astype(np.float64)
    eq = (a == b) * 0.5
    return lt + eq, (1.0 - lt - 2 * eq) + eq


def _jaccard_scale_op(tape: tp.Tape, q: int, k: int, v: int, eps: float, axes, kind: str) -> int:
    qv, kv, vv = tape.value(q), tape.value(k), tape.value(v)
    if not (qv.shape == kv.shape == vv.shape):
        raise AttentionShapeError("Q, K and V must share one shape")
    inter = np.minimum(qv, kv).sum(axis=axes, keepdims=True)
    denom = np.maximum(qv, kv).sum(axis=axes, keepdims=True) + eps
    w = inter / denom
    out = w * vv

    def vjp(g):
        gw = (g * vv).sum(axis=axes, keepdims=True)
        dmin_q, dmax_q = _tie_split(qv, kv)
        dmin_k, dmax_k = _tie_split(kv, qv)
        g_inter = gw / denom
        g_denom = -gw * inter / denom ** 2
        gq = g_inter * dmin_q + g_denom * dmax_q
        gk = g_inter * dmin_k + g_denom * dmax_k
        return gq, gk, w * g

    return tape.record(kind, (q, k, v), out, vjp, weights=np.squeeze(w, axis=axes))


def sja_channelwise_op(tape: tp.Tape, q: int, k: int, v: int, eps: float = DEFAULT_EPS,
                       per_channel: bool = False) -> int:
    """Channel-wise SJA on batched ``(B, T, C, L)`` tensors."""
    axes = (1, 3) if per_channel else (1, 2, 3)
    return _jaccard_scale_op(tape, q, k, v, eps, axes, "sja_channelwise")


def sja_elementwise_op(tape: tp.Tape, q: int, k: int, v: int, eps: float = DEFAULT_EPS) -> int:
    return _jaccard_scale_op(tape, q, k, v, eps, (1,), "sja_elementwise")


def dense_attention_op(tape: tp.Tape, q: int, k: int, v: int) -> int:
    """Softmax attention with time steps as tokens on ``(B, T, C, L)`` tensors."""
    qv, kv, vv = tape.value(q), tape.value(k), tape.value(v)
    shape = qv.shape
    b, t = shape[:2]
    qm, km, vm = (a.reshape(b, t, -1) for a in (qv, kv, vv))
    d = qm.shape[-1]
    scale = 1.0 / np.sqrt(d)
    scores = qm @ km.transpose(0, 2, 1) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    out = (att @ vm).reshape(shape)

    def vjp(g):
        gm = g.reshape(b, t, -1)
        gv = att.transpose(0, 2, 1) @ gm
        ga = gm @ vm.transpose(0, 2, 1)
        gs = att * (ga - (ga * att).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ km
        gk = gs.transpose(0, 2, 1) @ qm
        return gq.reshape(shape), gk.reshape(shape), gv.reshape(shape)

    return tape.record("dense_attention", (q, k, v), out, vjp, weights=att)
