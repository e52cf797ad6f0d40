import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vocalscreen.scoring import (
    ScoreMode,
    SubjectScore,
    auc,
    ci1,
    ci2,
    eer_threshold,
    indicator,
    p_hat,
    rates_at,
    roc,
    roc_auc,
    subject_score,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (
        len(pos) * len(neg))


def sweep(scores, labels):
    """Quadratic-time ROC: direct counting at every candidate threshold."""
    pts = []
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    for t in [np.inf] + sorted(set(scores), reverse=True) + [-np.inf]:
        tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= t)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        pts.append((t, fp / n_neg, tp / n_pos))
    return pts


def test_p_hat_examples():
    assert p_hat([0.2, 0.4, 0.9]) == pytest.approx(0.5)
    assert p_hat([0.3]) == 0.3
    with pytest.raises(ValueError):
        p_hat([])


def test_indicator_is_inclusive():
    assert indicator(0.5, 0.5) == 1
    assert indicator(0.49, 0.5) == 0
    assert indicator(1.0, 0.0) == 1


def test_ci_examples():
    assert ci1([1, 0, 1]) == pytest.approx(2 / 3)
    assert ci1([1, 1, 1]) == 1
    assert ci2(np.concatenate([[1.0], [0.0, 0.0, 0.0]])) == 0.25
    with pytest.raises(ValueError):
        ci1([])


def test_ci2_is_frame_weighted():
    s = SubjectScore([[1.0], [0.0, 0.0, 0.0]])
    assert s.K == (1, 3) and s.N1 == 2 and s.N2 == 4
    assert subject_score(s, 0.5, ScoreMode.CI2) == 0.25
    assert subject_score(s, 0.5, ScoreMode.CI1) == 0.5


def test_subject_score_modes():
    s = SubjectScore([[0.9, 0.5], [0.2], [0.3, 0.1, 0.2]])
    # p_hats 0.7, 0.2, 0.2 -> ci1 = 1/3 at 0.5; ci2 = 2.2/6
    assert subject_score(s, 0.5, "ci1") == pytest.approx(1 / 3)
    assert subject_score(s, 0.5, "ci2") == pytest.approx(2.2 / 6)
    assert subject_score(s, 0.5, "max_of_both") == pytest.approx(2.2 / 6)
    # one event, one frame: ci2 is the frame probability, ci1 its thresholded indicator
    single = SubjectScore([[0.7]])
    assert subject_score(single, 0.5, "ci2") == 0.7
    assert subject_score(single, 0.5, "ci1") == 1.0
    assert subject_score(single, 0.8, "max_of_both") == 0.7
    for p in (0.0, 1.0):
        one = SubjectScore([[p]])
        assert {subject_score(one, 0.5, m) for m in ScoreMode} == {p}


@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=6), min_size=1, max_size=6),
       st.floats(0, 1))
def test_subject_score_matches_direct_recomputation(events, gamma):
    s = SubjectScore(events)
    inds = [1 if sum(e) / len(e) >= gamma else 0 for e in events]
    c1 = sum(inds) / len(inds)
    frames = [p for e in events for p in e]
    c2 = sum(frames) / len(frames)
    assert subject_score(s, gamma, "ci1") == pytest.approx(c1, abs=1e-12)
    assert subject_score(s, gamma, "ci2") == pytest.approx(c2, abs=1e-12)
    assert subject_score(s, gamma, "max_of_both") == pytest.approx(max(c1, c2), abs=1e-12)
    assert 0 <= c1 <= 1 and -1e-12 <= c2 <= 1 + 1e-12


def test_roc_perfect_and_tied():
    c = roc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert (0.0, 1.0) in zip(c.fpr.tolist(), c.tpr.tolist())
    assert auc(c) == 1.0
    flat = roc([0.5] * 6, [1, 0, 1, 0, 1, 1])
    assert list(zip(flat.fpr, flat.tpr)) == [(0, 0), (1, 1), (1, 1)]
    assert auc(flat) == 0.5


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        roc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]) | st.floats(0, 1),
                          st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_matches_sweep_and_auc_matches_pairs(data):
    scores = [s for s, _ in data]
    labels = [y for _, y in data]
    if len(set(labels)) < 2:
        return
    c = roc(scores, labels)
    assert c.points == sweep(scores, labels)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert auc(c) == pytest.approx(pairwise_auc(scores, labels), abs=1e-9)


def test_eer_separable_symmetric():
    c = roc([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1])
    g = eer_threshold(c)
    assert 0.4 < g < 0.6
    assert rates_at([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1], g) == (0.0, 0.0)


def test_eer_fully_overlapping_classes():
    s, y = [0.2, 0.4, 0.2, 0.4], [0, 0, 1, 1]
    g = eer_threshold(roc(s, y))
    fpr, fnr = rates_at(s, y, g)
    assert fpr == fnr


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_eer_minimises_gap_over_every_threshold(data):
    scores = [s for s, _ in data]
    labels = [y for _, y in data]
    if len(set(labels)) < 2:
        return
    g = eer_threshold(roc(scores, labels))
    fpr, fnr = rates_at(scores, labels, g)
    cands = sorted(set(scores)) + [np.nextafter(max(scores), 2)]
    best = min(abs(a - b) for a, b in (rates_at(scores, labels, t) for t in cands))
    assert abs(fpr - fnr) <= best + 1e-12


def test_eer_prefers_higher_sensitivity_on_ties():
    # gaps: at t=0.8 |0.5 - 0.5| = 0 and at t=0.3 |... | = 0 too; the lower threshold wins
    scores = [0.9, 0.8, 0.3, 0.1]
    labels = [1, 0, 1, 0]
    g = eer_threshold(roc(scores, labels))
    assert rates_at(scores, labels, g) == (0.5, 0.5)
    assert g <= 0.8


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_indicator_monotone(a, b, gamma):
    lo, hi = sorted((a, b))
    assert indicator(lo, gamma) <= indicator(hi, gamma)


def test_roc_auc_wrapper():
    rng = np.random.default_rng(0)
    s, y = rng.random(50), rng.integers(0, 2, 50)
    assert roc_auc(s, y) == pytest.approx(pairwise_auc(s.tolist(), y.tolist()), abs=1e-12)
