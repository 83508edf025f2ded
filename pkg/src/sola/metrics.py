"""Frame-level evaluation metrics and reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic, with tie correction.

    Average ranks give ties half credit, so the result is invariant under
    strictly monotone transforms of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative label")
    ranks = stats.rankdata(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy_at_half(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    return float(((scores >= 0.5).astype(int) == labels).mean())


@dataclass
class EvalReport:
    """Per-image scores/labels plus the summary metrics."""

    scores: list[float]
    labels: list[int]
    auc: float
    accuracy: float
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, metadata: dict | None = None) -> "EvalReport":
        scores = [float(s) for s in np.asarray(scores).ravel()]
        labels = [int(l) for l in np.asarray(labels).ravel()]
        return cls(
            scores=scores,
            labels=labels,
            auc=roc_auc(scores, labels),
            accuracy=accuracy_at_half(scores, labels),
            metadata=metadata or {},
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "auc": self.auc,
                "accuracy": self.accuracy,
                "n": len(self.scores),
                "metadata": self.metadata,
                "scores": self.scores,
                "labels": self.labels,
            }
        )
