"""Perplexity and the AUROC family, plus the evaluation report container.

Binary AUROC is the Mann-Whitney statistic computed from midranks in
O(n log n); multiclass is macro one-vs-rest; multilabel is the macro over
labels that have both outcomes (single-outcome labels are skipped and
counted). Scores with no valid comparison report NaN rather than raising,
so callers can decide how to surface it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal

import numpy as np

__all__ = [
    "perplexity",
    "auroc_binary",
    "auroc_multiclass",
    "auroc_multilabel",
    "macro_average",
    "EvalReport",
]


def perplexity(total_nll: float, token_count: int) -> float:
    """exp(mean negative log-likelihood per token)."""
    if token_count < 1:
        raise ValueError("perplexity needs at least one token")
    return float(math.exp(total_nll / token_count))


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative),
    ties counted half. Single-class input is undefined and reported as NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = _midranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_multiclass(probabilities, labels) -> float:
    """Macro one-vs-rest AUROC over [n, k] class probabilities.

    Classes absent from ``labels`` are skipped; at least two classes must
    be present for anything to be defined.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError("probabilities must be [n, k] with k >= 2")
    if len(labels) != p.shape[0]:
        raise ValueError("labels length must match probabilities")
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("multiclass AUROC needs at least two classes present")
    scores = [auroc_binary(p[:, c], (labels == c).astype(int)) for c in present]
    return float(np.mean(scores))


def auroc_multilabel(probabilities, label_matrix) -> tuple[float, int]:
    """(macro-over-labels AUROC, number of labels skipped).

    Labels whose column has a single outcome in the evaluation set cannot
    be ranked and are skipped; it is an error if that leaves nothing.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(label_matrix)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError("probabilities and label matrix must share an [n, k] shape")
    scores = []
    skipped = 0
    for c in range(p.shape[1]):
        col = y[:, c].astype(int)
        if col.min() == col.max():
            skipped += 1
            continue
        scores.append(auroc_binary(p[:, c], col))
    if not scores:
        raise ValueError("no label has both outcomes; multilabel AUROC undefined")
    return float(np.mean(scores)), skipped


def macro_average(task_scores) -> float:
    """Unweighted mean of task scores (percents), reported to 2 decimals.

    The reported value truncates (never rounds up) the exact mean, the
    convention used by the reference score tables this reproduces; summing
    in sorted order keeps the result permutation-invariant.
    """
    scores = [float(s) for s in task_scores]
    if not scores:
        raise ValueError("macro_average of an empty score list")
    mean = sum(sorted(scores)) / len(scores)
    return float(Decimal(repr(mean)).quantize(Decimal("0.01"), rounding=ROUND_DOWN))


@dataclass
class EvalReport:
    """Per-task AUROC percentages and/or language-model perplexity."""

    task_scores: dict[str, float] = field(default_factory=dict)  # percents
    macro_avg: float | None = None
    ppl: float | None = None
    skipped_labels: dict[str, int] = field(default_factory=dict)

    def finalize(self) -> "EvalReport":
        if len(self.task_scores) > 1:
            self.macro_avg = macro_average(list(self.task_scores.values()))
        return self

    def to_dict(self) -> dict:
        out: dict = dict(self.task_scores)
        if self.macro_avg is not None:
            out["macro_avg"] = self.macro_avg
        if self.ppl is not None:
            out["perplexity"] = self.ppl
        if self.skipped_labels:
            out["skipped_labels"] = dict(self.skipped_labels)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            task_scores={k: v for k, v in d.items()
                         if k not in ("macro_avg", "perplexity", "skipped_labels")},
            macro_avg=d.get("macro_avg"),
            ppl=d.get("perplexity"),
            skipped_labels=d.get("skipped_labels", {}),
        )
