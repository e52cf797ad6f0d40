"""Event and subject scores, ROC curves, AUC and the equal-error threshold."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ScoreMode(str, enum.Enum):
    CI1 = "ci1"
    CI2 = "ci2"
    MAX = "max_of_both"


def _nonempty(values, what):
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{what} must not be empty")
    return a


def p_hat(frame_probs) -> float:
    """Mean per-frame positive probability of one event."""
    return float(_nonempty(frame_probs, "frame_probs").mean())


def indicator(p: float, gamma_ee: float) -> int:
    return int(p >= gamma_ee)


def ci1(event_indicators) -> float:
    """Fraction of a subject's events classified positive."""
    return float(_nonempty(event_indicators, "event_indicators").mean())


def ci2(all_frame_probs) -> float:
    """Mean positive probability over every frame of every event."""
    return float(_nonempty(all_frame_probs, "all_frame_probs").mean())


@dataclass(frozen=True)
class SubjectScore:
    """Per-event frame probabilities for one subject."""

    events: tuple

    def __init__(self, events):
        evs = tuple(np.asarray(e, dtype=np.float64).ravel() for e in events)
        if not evs or any(e.size == 0 for e in evs):
            raise ValueError("a subject needs at least one event with at least one frame")
        object.__setattr__(self, "events", evs)

    @property
    def K(self) -> tuple:
        return tuple(len(e) for e in self.events)

    @property
    def N1(self) -> int:
        return len(self.events)

    @property
    def N2(self) -> int:
        return sum(self.K)


def subject_score(subject: SubjectScore, gamma_ee: float, mode=ScoreMode.MAX) -> float:
    mode = ScoreMode(mode)
    score1 = ci1([indicator(p_hat(e), gamma_ee) for e in subject.events])
    if mode is ScoreMode.CI1:
        return score1
    score2 = ci2(np.concatenate(subject.events))
    if mode is ScoreMode.CI2:
        return score2
    return max(score1, score2)


# --------------------------------------------------------------------------
# ROC

@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    @property
    def fnr(self):
        return 1.0 - self.tpr


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if y.min(initial=1) == y.max(initial=0) or len(y) == 0:
        raise ValueError("ROC needs both classes present")
    return s, y


def roc(scores, labels) -> RocCurve:
    """ROC with one operating point per distinct score.

    Thresholds run from ``+inf`` (nothing positive) down through each
    distinct score in descending order to ``-inf``; a sample is called
    positive when ``score >= threshold``.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s) != 0)
    last = np.concatenate([distinct, [len(s) - 1]])
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    thresholds = np.concatenate([[np.inf], s[last], [-np.inf]])
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    return RocCurve(thresholds, fpr, tpr, n_pos, n_neg)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> float:
    return auc(roc(scores, labels))


def rates_at(scores, labels, threshold):
    """(FPR, FNR) when calling ``score >= threshold`` positive."""
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    fpr = float(np.mean(pred[y == 0]))
    fnr = float(np.mean(~pred[y == 1]))
    return fpr, fnr


def eer_threshold(curve: RocCurve) -> float:
    """Threshold at which false-positive and false-negative rates balance.

    The operating point minimising ``|FPR - FNR|`` wins, ties going to the
    lower threshold (higher sensitivity). Every threshold in the half-open
    interval between the winning score and the next lower distinct score
    gives the same rates, so the returned value is placed inside it: at the
    linearly interpolated zero crossing of ``FPR - FNR`` when the sign flips
    before the next point, and at the midpoint otherwise.
    """
    th = curve.thresholds
    d = curve.fpr - curve.fnr
    gap = np.abs(d)
    i = int(np.flatnonzero(gap == gap.min())[-1])
    finite = th[np.isfinite(th)]
    if th[i] == -np.inf:
        return float(finite.min())
    if th[i] == np.inf:
        return float(np.nextafter(finite.max(), np.inf))
    if th[i + 1] == -np.inf:
        return float(th[i])
    # |d[i]| <= |d[i+1]|, so the crossing weight never exceeds one half
    if d[i] != 0 and np.sign(d[i]) != np.sign(d[i + 1]):
        w = abs(d[i]) / (abs(d[i]) + abs(d[i + 1]))
    else:
        w = 0.5
    t = th[i] + w * (th[i + 1] - th[i])
    return float(t if t > th[i + 1] else th[i])
