"""Figures written next to the JSON/TSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import risk_coverage  # noqa: E402
from .report import MODE_ORDER, MODE_TITLES  # noqa: E402

_COLORS = {"both": "#1b6ca8", "image": "#d1495b", "tabular": "#66a182"}

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
})


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    # Fixed metadata keeps PNG bytes reproducible across runs.
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training(records: Sequence, path: str | Path, labels: Sequence[str] | None = None) -> None:
    """Epoch loss (left) and validation AUROC per mode (right), one line per run."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3.2))
    for i, rec in enumerate(records):
        tag = labels[i] if labels else f"fold {i}"
        epochs = np.arange(1, len(rec.epoch_loss) + 1)
        ax_l.plot(epochs, rec.epoch_loss, lw=1, label=tag)
        for mode in MODE_ORDER:
            vals = [np.nan if v is None else v for v in rec.val_auroc[mode]]
            ax_a.plot(epochs, vals, lw=0.8, color=_COLORS[mode], alpha=0.35 + 0.65 / (1 + i))
        if rec.best_epoch >= 0:
            ax_a.axvline(rec.best_epoch + 1, color="0.6", lw=0.5, ls=":")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_l.legend(frameon=False, fontsize=7)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("validation AUROC")
    for mode in MODE_ORDER:
        ax_a.plot([], [], color=_COLORS[mode], label=MODE_TITLES[mode])
    ax_a.legend(frameon=False, fontsize=7)
    _save(fig, path)


def _roc(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.concatenate([[0.0], tp / max(y.sum(), 1)])
    fpr = np.concatenate([[0.0], fp / max(len(y) - y.sum(), 1)])
    return fpr, tpr


def plot_eval_curves(scores_by_mode: dict[str, np.ndarray], labels: np.ndarray, path: str | Path) -> None:
    """ROC and risk-coverage curves for each inference mode."""
    fig, (ax_r, ax_c) = plt.subplots(1, 2, figsize=(8, 3.4))
    labels = np.asarray(labels, dtype=np.float64)
    for mode in MODE_ORDER:
        if mode not in scores_by_mode:
            continue
        s = np.asarray(scores_by_mode[mode])
        fpr, tpr = _roc(s, labels)
        ax_r.plot(fpr, tpr, color=_COLORS[mode], lw=1.2, label=MODE_TITLES[mode])
        cov, risk = risk_coverage(s, labels)
        ax_c.plot(cov, risk, color=_COLORS[mode], lw=1.2, label=MODE_TITLES[mode])
    ax_r.plot([0, 1], [0, 1], color="0.7", lw=0.6, ls="--")
    ax_r.set_xlabel("false positive rate")
    ax_r.set_ylabel("true positive rate")
    ax_r.legend(frameon=False, fontsize=7, loc="lower right")
    ax_c.set_xlabel("coverage")
    ax_c.set_ylabel("selective risk")
    _save(fig, path)


def plot_ablation(rows, path: str | Path) -> None:
    """Grouped bars of cross-validated AUROC per configuration and inference mode."""
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows) + 2), 3.4))
    x = np.arange(len(rows))
    width = 0.26
    for k, mode in enumerate(MODE_ORDER):
        vals = [np.nan if r.auroc.get(mode) is None else r.auroc[mode] for r in rows]
        ax.bar(x + (k - 1) * width, vals, width, color=_COLORS[mode], label=MODE_TITLES[mode])
    ax.set_xticks(x)
    ax.set_xticklabels([r.label for r in rows], rotation=25, ha="right", fontsize=7)
    finite = [r.auroc[m] for r in rows for m in MODE_ORDER if r.auroc.get(m) is not None]
    if finite:
        ax.set_ylim(max(0.0, min(finite) - 0.05), min(1.0, max(finite) + 0.03))
    ax.set_ylabel("AUROC (CV mean)")
    ax.legend(frameon=False, fontsize=7, ncol=3)
    _save(fig, path)
