"""Source-free domain adaptation driven by a membrane-potential memory.

Every adaptation epoch starts from a memory holding, for each unlabelled target
sample, its readout membrane trace plus scaled Gaussian noise together with the
class the model currently predicts for it. Each training sample then retrieves
its most Pearson-similar memory entries and draws a pseudo-label from their
cached predictions (the mode with probability ``1 - p``, a uniformly drawn
neighbour label with probability ``p``). The loss mixes the pseudo-label NLL
with a KL penalty that pulls the batch-mean prediction towards uniform.

:func:`adapt` takes no source dataset argument; the source data is unreachable
by construction.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape as tp
from .snn import JasnnModel, forward_batch, predict_batch
from .training import AdamState, adam_step, batches, infer


@dataclass(frozen=True)
class SsfdaConfig:
    k_neighbors: int = 5
    explore_prob: float = 0.1
    alpha: float = 0.3
    delta: float = 0.1
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    k_resample: bool = False
    exclude_self: bool = True

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not 0.0 <= self.explore_prob <= 1.0:
            raise ValueError("explore_prob must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class MemoryEntry:
    trace_vector: np.ndarray
    cached_argmax: int
    sample_id: int


@dataclass
class Memory:
    """Membrane-potential memory stored column-wise for vectorised retrieval."""

    vectors: np.ndarray        # (n, T * num_classes), noisy
    cached_argmax: np.ndarray  # (n,)
    sample_ids: np.ndarray     # (n,)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, i: int) -> MemoryEntry:
        return MemoryEntry(self.vectors[i], int(self.cached_argmax[i]), int(self.sample_ids[i]))

    def entries(self) -> list[MemoryEntry]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_entries(cls, entries) -> "Memory":
        entries = list(entries)
        return cls(np.stack([e.trace_vector for e in entries]),
                   np.array([e.cached_argmax for e in entries]),
                   np.array([e.sample_id for e in entries]))


def _noise_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(sample_id), 0x6D656D])


def memory_from_traces(traces: np.ndarray, sample_ids, delta: float, seed: int = 0,
                       epoch: int = 0) -> Memory:
    """Noisy flattened traces plus the argmax of each noiseless time-summed trace."""
    traces = np.asarray(traces, dtype=np.float64)
    flat = traces.reshape(traces.shape[0], -1)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if delta > 0:
        noise = np.stack([_noise_rng(seed, epoch, sid).standard_normal(flat.shape[1])
                          for sid in sample_ids])
        flat = flat + delta * noise
    else:
        flat = flat.copy()
    return Memory(flat, predict_batch(traces), sample_ids)


def build_memory(model: JasnnModel, target, delta: float = 0.1, seed: int = 0,
                 epoch: int = 0) -> Memory:
    if len(target) == 0:
        raise ValueError("cannot build a memory from an empty dataset")
    return memory_from_traces(infer(model, target.features), target.sample_ids, delta, seed, epoch)


def pearson(a, b) -> float:
    """Pearson correlation; zero-variance inputs give 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    return float(pearson_many(a, b[None])[0])


def pearson_many(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Pearson correlation of ``query`` against every row of ``rows``."""
    q = query - query.mean()
    r = rows - rows.mean(axis=1, keepdims=True)
    qn = math.sqrt(float(q @ q))
    rn = np.sqrt(np.einsum("ij,ij->i", r, r))
    denom = qn * rn
    num = r @ q
    out = np.zeros(rows.shape[0])
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def topk_indices(query_trace, memory: Memory, k: int, exclude_id: int | None = None) -> np.ndarray:
    """Row indices of the ``k`` most Pearson-similar entries, best first.

    Ties are broken by the smaller ``sample_id``.
    """
    scores = pearson_many(np.asarray(query_trace, dtype=np.float64).ravel(), memory.vectors)
    ids = memory.sample_ids
    if exclude_id is not None:
        keep = np.flatnonzero(ids != exclude_id)
    else:
        keep = np.arange(len(memory))
    if k > keep.size:
        raise ValueError(f"K={k} exceeds the {keep.size} available memory entries")
    order = np.lexsort((ids[keep], -scores[keep]))
    return keep[order[:k]]


def topk_neighbors(query_trace, memory: Memory, k: int,
                   exclude_id: int | None = None) -> list[MemoryEntry]:
    return [memory[i] for i in topk_indices(query_trace, memory, k, exclude_id)]


def plg_select(neighbor_labels, p: float, rng: np.random.Generator) -> int:
    """Probabilistic label generation over the neighbours' cached predictions."""
    labels = np.asarray([getattr(n, "cached_argmax", n) for n in neighbor_labels], dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no neighbours to draw a pseudo-label from")
    if rng.random() < p:
        return int(labels[rng.integers(labels.size)])
    return int(np.argmax(np.bincount(labels)))


def snll_kl_loss(batch_probs, pseudo_labels, alpha: float, num_classes: int | None = None) -> float:
    """Pseudo-label NLL weighted by ``1 - alpha`` plus ``alpha * KL(mean p || uniform)``.

    ``pseudo_labels`` may be ``(n,)`` or ``(n, R)``; in the latter case the NLL
    is averaged over the ``R`` draws of each sample.
    """
    probs = np.asarray(batch_probs, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n, c = probs.shape
    if num_classes is not None and num_classes != c:
        raise ValueError(f"probabilities have {c} classes, expected {num_classes}")
    labels = np.asarray(pseudo_labels, dtype=np.int64).reshape(n, -1)
    picked = np.clip(np.take_along_axis(probs, labels, axis=1), tp.PROB_FLOOR, 1.0)
    consistency = -np.mean(np.log(picked))
    p_bar = np.clip(probs.mean(axis=0), tp.PROB_FLOOR, None)
    kl = float(np.sum(p_bar * np.log(p_bar * c)))
    return (1.0 - alpha) * consistency + alpha * kl


def kl_to_uniform(probs) -> float:
    p_bar = np.clip(np.asarray(probs, dtype=np.float64).mean(axis=0), tp.PROB_FLOOR, None)
    return float(np.sum(p_bar * np.log(p_bar * p_bar.size)))


def snll_kl_op(tape: tp.Tape, logp: int, pseudo_labels, alpha: float) -> int:
    """Differentiable :func:`snll_kl_loss` on a log-probability node."""
    lp = tape.value(logp)
    n, c = lp.shape
    labels = np.asarray(pseudo_labels, dtype=np.int64).reshape(n, -1)
    draws = labels.shape[1]
    picked = np.take_along_axis(lp, labels, axis=1)
    clamped = picked < tp.LOG_PROB_FLOOR
    consistency = -np.mean(np.maximum(picked, tp.LOG_PROB_FLOOR))
    p = np.exp(lp)
    p_bar = np.clip(p.mean(axis=0), tp.PROB_FLOOR, None)
    log_ratio = np.log(p_bar * c)
    loss = (1.0 - alpha) * consistency + alpha * float(np.sum(p_bar * log_ratio))

    def vjp(g):
        out = np.zeros_like(lp)
        rows = np.repeat(np.arange(n), draws)
        contrib = np.where(clamped, 0.0, -(1.0 - alpha) / (n * draws)).ravel()
        np.add.at(out, (rows, labels.ravel()), contrib)
        out += alpha * p * (log_ratio + 1.0)[None, :] / n
        return (g * out,)

    return tape.record("snll_kl", (logp,), np.asarray(loss), vjp)


@dataclass
class AdaptRecord:
    epoch: int
    pseudo_label_agreement: float
    target_accuracy: float
    loss: float
    wall_seconds: float


def adapt(model: JasnnModel, target, config: SsfdaConfig = SsfdaConfig(),
          eval_labels=None, callback: Callable[[AdaptRecord], None] | None = None):
    """Adapt ``model`` to the unlabelled ``target`` dataset.

    ``eval_labels`` (optional) are used only to report pseudo-label agreement
    and accuracy; they never reach the loss. Returns ``(model, history,
    rebuild_count)``.
    """
    n = len(target)
    if n == 0:
        raise ValueError("empty target dataset")
    needed = config.k_neighbors + (1 if config.exclude_self else 0)
    if needed > n:
        raise ValueError(f"K={config.k_neighbors} exceeds the target dataset size")
    model = model.copy()
    state = AdamState(lr=config.lr)
    features = target.features
    ids = target.sample_ids
    draws = config.k_neighbors if config.k_resample else 1
    memory = build_memory(model, target, config.delta, config.seed, epoch=0)
    rebuilds = 0
    history: list[AdaptRecord] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([int(config.seed), epoch, 0x616461])
        total, agree = 0.0, 0
        for idx in batches(n, config.batch_size, rng):
            res = forward_batch(model, features[idx])
            queries = res.trace_value.reshape(idx.size, -1)
            pseudo = np.empty((idx.size, draws), dtype=np.int64)
            for row, (q, sid) in enumerate(zip(queries, ids[idx])):
                nb = topk_indices(q, memory, config.k_neighbors,
                                  int(sid) if config.exclude_self else None)
                labels = memory.cached_argmax[nb]
                for d in range(draws):
                    pseudo[row, d] = plg_select(labels, config.explore_prob, rng)
            tape = res.tape
            loss = snll_kl_op(tape, tp.log_softmax(tape, res.logits), pseudo, config.alpha)
            tape.backward(loss)
            grads = {name: tape.grad(nid) for name, nid in res.param_ids.items()}
            adam_step(model.params, grads, state)
            total += float(tape.value(loss)) * idx.size
            if eval_labels is not None:
                agree += int(np.sum(pseudo[:, 0] == np.asarray(eval_labels)[idx]))
        memory = build_memory(model, target, config.delta, config.seed, epoch=epoch + 1)
        rebuilds += 1
        acc = float("nan")
        agreement = float("nan")
        if eval_labels is not None:
            acc = float(np.mean(memory.cached_argmax == np.asarray(eval_labels)))
            agreement = agree / n
        rec = AdaptRecord(epoch, agreement, acc, total / n, time.perf_counter() - start)
        history.append(rec)
        if callback:
            callback(rec)
    return model, history, rebuilds
