"""Static report figures (PNG) rendered with the non-interactive Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes identical across reruns.
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training(history, path) -> None:
    """Loss and accuracy per epoch, train and test splits."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split, style in (("train", "-"), ("test", "--")):
        rows = [r for r in history if r.split == split]
        if not rows:
            continue
        epochs = [r.epoch for r in rows]
        losses = [r.loss for r in rows]
        if not np.all(np.isnan(losses)):
            ax_loss.plot(epochs, losses, style, label=split)
        ax_acc.plot(epochs, [r.accuracy for r in rows], style, label=split)
    ax_loss.set(xlabel="epoch", ylabel="loss", title="Training loss")
    ax_acc.set(xlabel="epoch", ylabel="accuracy", title="Accuracy", ylim=(-0.02, 1.02))
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
        ax.legend()
    _save(fig, path)


def plot_adaptation(history, path, baseline: float | None = None) -> None:
    """Target accuracy, pseudo-label agreement and loss per adaptation epoch."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [r.epoch for r in history]
    ax_acc.plot(epochs, [r.target_accuracy for r in history], "-o", ms=3, label="target accuracy")
    ax_acc.plot(epochs, [r.pseudo_label_agreement for r in history], "--", label="pseudo-label agreement")
    if baseline is not None:
        ax_acc.axhline(baseline, color="grey", lw=1, ls=":", label="before adaptation")
    ax_acc.set(xlabel="epoch", ylabel="rate", ylim=(-0.02, 1.02), title="Adaptation")
    ax_acc.legend()
    ax_loss.plot(epochs, [r.loss for r in history], "-")
    ax_loss.set(xlabel="epoch", ylabel="SNLL + KL loss", title="Adaptation loss")
    for ax in (ax_acc, ax_loss):
        ax.grid(alpha=0.3)
    _save(fig, path)


def plot_scaling(records, path, slopes: dict | None = None) -> None:
    """Median runtime against sequence length on log-log axes, one line per impl/density."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    groups: dict[tuple[str, float], list] = {}
    for r in records:
        groups.setdefault((r.impl_id, r.density), []).append(r)
    for (impl, density), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.seq_len)
        label = f"{impl} @ {density:g}"
        if slopes and (impl, density) in slopes:
            label += f" (slope {slopes[(impl, density)]:.2f})"
        ax.errorbar([r.seq_len for r in rows], [r.median_ns / 1e6 for r in rows],
                    yerr=[[max(r.median_ns - r.p10_ns, 0) / 1e6 for r in rows],
                          [max(r.p90_ns - r.median_ns, 0) / 1e6 for r in rows]],
                    marker="o", ms=3, capsize=2, label=label,
                    ls="--" if impl == "dense" else "-")
    ax.set(xscale="log", yscale="log", xlabel="sequence length", ylabel="median time (ms)",
           title="Attention runtime scaling")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=7)
    _save(fig, path)
