"""Report rendering: delimited tables, matplotlib figures, lattice inspection."""

from __future__ import annotations

import itertools
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .lattice import (
    Lattice,
    Tagset,
    backward_scores,
    forward_scores,
    kbest_viterbi,
    log_partition,
    posteriors,
    sequence_log_prob,
)

MAX_ENUMERATED_SEQUENCES = 1024


def write_tsv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def save_training_curves(path, history: Sequence[dict]) -> None:
    """Loss and dev-metric trajectories, with the annealing schedule overlaid."""
    history = [h for h in history if "epoch" in h]
    if not history:
        return
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [h["train_loss"] for h in history], label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1t = ax1.twinx()
    ax1t.plot(epochs, [h["lambda"] for h in history], color="tab:red", ls="--",
              label="lambda")
    ax1t.set_ylabel("lambda", color="tab:red")
    ax1.legend(loc="upper right", fontsize=8)
    langs = sorted(history[0]["dev_metric_per_language"]) if history else []
    for lang in langs:
        ax2.plot(epochs, [h["dev_metric_per_language"][lang] for h in history],
                 label=lang, alpha=0.7)
    ax2.plot(epochs, [h["dev_macro"] for h in history], color="black", lw=2,
             label="macro")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("dev metric")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_k_sweep(path, ks: Sequence[int], metrics: dict[str, Sequence[float]]) -> None:
    """Metric-versus-k curves, one line per distillation method."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, vals in metrics.items():
        ax.plot(ks, [100 * v for v in vals], marker="s", label=name)
    ax.set_xlabel("k value")
    ax.set_ylabel("dev metric (%)")
    ax.set_xticks(list(ks))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_posterior_heatmap(path, q: np.ndarray, labels: Sequence[str]) -> None:
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * q.shape[0], 1.2 + 0.5 * q.shape[1]))
    im = ax.imshow(q.T, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("token position")
    ax.set_yticks(range(len(labels)), labels)
    for i in range(q.shape[0]):
        for j in range(q.shape[1]):
            ax.text(i, j, f"{q[i, j]:.2f}", ha="center", va="center",
                    color="white" if q[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="q(y_k | x)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def lattice_report(lattice: Lattice, tagset: Tagset, k: int = 2) -> str:
    """Text report of all structural quantities of one lattice.

    Sequence probabilities are printed to 3 decimals and the alpha/beta/q rows
    and top-k weights to 2, matching the usual presentation of such tables.
    """
    n, v = lattice.n, lattice.num_labels
    names = tagset.labels
    lines = []
    logz = log_partition(lattice)
    lines.append(f"tokens: {n}   labels: {', '.join(names)}")
    lines.append(f"log partition: {logz:.4f}   (Z = {np.exp(logz):.4f})")
    lines.append("")

    total = v ** n
    if total <= MAX_ENUMERATED_SEQUENCES:
        lines.append("label sequence probabilities:")
        for path in itertools.product(range(v), repeat=n):
            p = np.exp(sequence_log_prob(lattice, path))
            lines.append("  " + " ".join(names[j] for j in path) + f"   {p:.3f}")
        lines.append("")

    kb = kbest_viterbi(lattice, k)
    lines.append(f"top-{len(kb)} sequences and renormalized weights:")
    for entry in kb:
        lines.append("  " + " ".join(names[j] for j in entry.labels)
                     + f"   weight {entry.normalized_weight:.2f}")
    lines.append("")

    la = np.exp(forward_scores(lattice))
    lb = np.exp(backward_scores(lattice))
    q = posteriors(lattice)
    for title, mat, fmt in (("alpha", la, "{:.2f}"), ("beta", lb, "{:.2f}"),
                            ("q", q, "{:.2f}")):
        for j, name in enumerate(names):
            row = "  ".join(fmt.format(mat[i, j]) for i in range(n))
            lines.append(f"{title}({name}):  {row}")
        lines.append("")
    return "\n".join(lines)
