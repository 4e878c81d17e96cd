"""OOD metrics. Convention throughout: higher score = more in-distribution, ID is the positive class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=float).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=float).ravel()

    def check(self):
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise ValueError("AUROC/FPR need at least one ID and one OOD score")


def _scores(scores, ood_scores=None) -> ScoreSet:
    s = scores if isinstance(scores, ScoreSet) else ScoreSet(scores, ood_scores)
    s.check()
    return s


def auroc(scores, ood_scores=None) -> float:
    """P(ID score > OOD score) + 0.5 P(tie), counted over all pairs via sorting."""
    s = _scores(scores, ood_scores)
    ood = np.sort(s.ood_scores)
    below = np.searchsorted(ood, s.id_scores, side="left")
    ties = np.searchsorted(ood, s.id_scores, side="right") - below
    numerator = below.sum() + 0.5 * ties.sum()
    return float(numerator / (s.id_scores.size * s.ood_scores.size))


def fpr_at_tpr(scores, ood_scores=None, tpr_level: float = 0.95) -> float:
    """Fraction of OOD scores >= s*, where s* is the largest threshold keeping TPR >= tpr_level."""
    s = _scores(scores, ood_scores)
    n = s.id_scores.size
    ranked = np.sort(s.id_scores)[::-1]
    k = next(k for k in range(1, n + 1) if k / n >= tpr_level)
    threshold = ranked[k - 1]
    return float(np.count_nonzero(s.ood_scores >= threshold) / s.ood_scores.size)


def quantiles(rounds, qs=(0.25, 0.5, 0.75)) -> list[float]:
    """Quantiles with linear interpolation between the closest ranks."""
    values = np.asarray(rounds, dtype=float)
    if values.size == 0:
        raise ValueError("no values")
    return [float(v) for v in np.quantile(values, qs)]


def msp_score(spec: nn.NetworkSpec, pretrained: nn.ParameterVector, x) -> np.ndarray | float:
    probs = nn.predict_proba(spec, pretrained, x)
    top = probs.max(axis=1)
    return float(top[0]) if np.ndim(x) == 1 else top
