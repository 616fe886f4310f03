"""Supervised surrogate-gradient training: readout, loss, Adam and the epoch loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as tp
from .snn import JasnnModel, PARAM_NAMES, forward_batch, predict_batch


def softmax_readout(scores) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(scores, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(probabilities, label: int) -> float:
    """``-log p[label]`` with ``p`` clamped to ``[1e-12, 1]``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} outside [0, {p.shape[-1]})")
    return float(-np.log(np.clip(p[label], tp.PROB_FLOOR, 1.0)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(p)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    return params, state


def batch_loss_and_grads(model: JasnnModel, features, labels, smooth: bool = False):
    """Forward a batch, apply softmax + NLL, backpropagate; returns ``(loss, grads, logits)``."""
    res = forward_batch(model, features, smooth=smooth)
    tape = res.tape
    loss = tp.nll(tape, tp.log_softmax(tape, res.logits), labels)
    tape.backward(loss)
    grads = {name: tape.grad(nid) for name, nid in res.param_ids.items()}
    return float(tape.value(loss)), grads, tape.value(res.logits)


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model: JasnnModel, dataset, state: AdamState, batch_size: int = 32,
                seed: int = 0, epoch: int = 0) -> tuple[JasnnModel, float, float]:
    """One pass over ``dataset``; returns ``(model, mean loss, training accuracy)``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([int(seed), int(epoch), 0x747261])
    total_loss = 0.0
    correct = 0
    for idx in batches(n, batch_size, rng):
        y = dataset.labels[idx]
        loss, grads, logits = batch_loss_and_grads(model, dataset.features[idx], y)
        adam_step(model.params, grads, state)
        total_loss += loss * idx.size
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return model, total_loss / n, correct / n


def infer(model: JasnnModel, features, batch_size: int = 64) -> np.ndarray:
    """Readout traces ``(n, T, num_classes)`` for a stack of feature windows."""
    out = []
    for i in range(0, len(features), batch_size):
        out.append(forward_batch(model, features[i:i + batch_size]).trace_value)
    return np.concatenate(out)


def evaluate(model: JasnnModel, dataset, batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Returns ``(accuracy, predictions)``."""
    preds = predict_batch(infer(model, dataset.features, batch_size))
    return float(np.mean(preds == dataset.labels)), preds


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    wall_seconds: float


def fit(model: JasnnModel, train, epochs: int = 200, lr: float = 1e-3, batch_size: int = 32,
        seed: int = 0, test=None, patience: int = 10, min_improvement: float = 0.002,
        callback: Callable[[EpochRecord], None] | None = None):
    """Train until ``epochs`` or until training accuracy gains less than
    ``min_improvement`` over ``patience`` epochs.

    Returns ``(model, history)``; ``model`` is a trained copy of the input.
    """
    model = model.copy()
    state = AdamState(lr=lr)
    history: list[EpochRecord] = []
    train_acc = []
    start = time.perf_counter()
    for epoch in range(epochs):
        model, loss, acc = train_epoch(model, train, state, batch_size, seed, epoch)
        rec = EpochRecord(epoch, "train", loss, acc, time.perf_counter() - start)
        history.append(rec)
        if callback:
            callback(rec)
        if test is not None:
            test_acc, _ = evaluate(model, test)
            rec = EpochRecord(epoch, "test", float("nan"), test_acc, time.perf_counter() - start)
            history.append(rec)
            if callback:
                callback(rec)
        train_acc.append(acc)
        if len(train_acc) > patience and train_acc[-1] - max(train_acc[:-patience]) < min_improvement:
            break
    return model, history


__all__ = ["AdamState", "adam_step", "softmax_readout", "nll_loss", "train_epoch", "fit",
           "evaluate", "infer", "batch_loss_and_grads", "EpochRecord", "PARAM_NAMES"]
