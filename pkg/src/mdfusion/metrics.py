"""Binary classification metrics: AUROC, AP, AURC, MCC, F1.

Ties are handled explicitly so that results do not depend on sort
stability of the platform: average ranks for AUROC, tied groups for AP,
stable input order for AURC.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InputError, UndefinedMetricError

THRESHOLD = 0.5
METRIC_NAMES = ("auroc", "ap", "aurc", "mcc", "f_score")


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InputError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise InputError("empty scored set")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; a tie counts one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    r = average_ranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall step curve, tied scores entering together.

    The sum is accumulated in exact rational arithmetic and rounded once,
    so the result does not depend on summation order.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each tied group
    ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
    tp = np.cumsum(y_sorted)[ends]
    new_tp = np.diff(tp, prepend=0)
    # sum over groups of (new positives / n_pos) * precision
    total = sum((Fraction(int(d) * int(t), int(e) + 1) for d, t, e in zip(new_tp, tp, ends) if d),
                Fraction(0))
    return float(total / n_pos)


def _errors(s: np.ndarray, y: np.ndarray, threshold: float) -> np.ndarray:
    return ((s >= threshold).astype(np.int64) != y).astype(np.float64)


def risk_coverage(scores, labels, threshold: float = THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Coverage k/n and selective risk of the k most confident predictions."""
    s, y = _check(scores, labels)
    conf = np.maximum(s, 1.0 - s)
    order = np.argsort(-conf, kind="stable")
    err = _errors(s, y, threshold)[order]
    k = np.arange(1, len(s) + 1)
    return k / len(s), np.cumsum(err) / k


def aurc(scores, labels, threshold: float = THRESHOLD) -> float:
    """Mean selective risk over coverages 1/n, 2/n, ..., 1."""
    _, risk = risk_coverage(scores, labels, threshold)
    return float(risk.mean())


def confusion(scores, labels, threshold: float = THRESHOLD) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) with prediction = score >= threshold."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return (int(np.sum(pred & pos)), int(np.sum(~pred & ~pos)),
            int(np.sum(pred & ~pos)), int(np.sum(~pred & pos)))


def mcc(scores, labels, threshold: float = THRESHOLD) -> float:
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    factors = (tp + fp, tp + fn, tn + fp, tn + fn)
    if 0 in factors:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(math.prod(float(f) for f in factors))


def f_score(scores, labels, threshold: float = THRESHOLD) -> float:
    tp, _, fp, fn = confusion(scores, labels, threshold)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def metric_bundle(scores, labels, threshold: float = THRESHOLD) -> dict[str, float | None]:
    """All five metrics; undefined ones become None."""
    out: dict[str, float | None] = {}
    for name, fn in (("auroc", auroc), ("ap", average_precision)):
        try:
            out[name] = fn(scores, labels)
        except UndefinedMetricError:
            out[name] = None
    out["aurc"] = aurc(scores, labels, threshold)
    out["mcc"] = mcc(scores, labels, threshold)
    out["f_score"] = f_score(scores, labels, threshold)
    return out


@dataclass
class EvalReport:
    modes: dict[str, dict[str, float | None]]
    n: int
    threshold: float = THRESHOLD
    config_hash: str = ""
    seed: int = 0
    fold_id: int | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "modes": self.modes,
            "n": self.n,
            "threshold": self.threshold,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "fold_id": self.fold_id,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(d["modes"], d["n"], d.get("threshold", THRESHOLD), d.get("config_hash", ""),
                   d.get("seed", 0), d.get("fold_id"), d.get("provenance", {}))


def mean_reports(reports: Sequence[EvalReport]) -> dict[str, dict[str, float | None]]:
    """Per-mode, per-metric arithmetic mean; None if any fold is None."""
    modes: dict[str, dict[str, float | None]] = {}
    for mode in reports[0].modes:
        modes[mode] = {}
        for name in METRIC_NAMES:
            vals = [r.modes[mode][name] for r in reports]
            modes[mode][name] = None if any(v is None for v in vals) else math.fsum(vals) / len(vals)
    return modes
