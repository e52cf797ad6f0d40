"""Nested subject-grouped cross-validation, grid search, SFS and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .scoring import ScoreMode, SubjectScore, eer_threshold, p_hat, roc, roc_auc, subject_score

log = logging.getLogger(__name__)

N_OUTER = 5
N_INNER = 4


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    """One scored unit (a recording or a segmented cough within one)."""

    event_id: str
    subject_id: str
    label: int


@dataclass(frozen=True)
class CVPlan:
    outer: tuple            # N_OUTER tuples of test subject ids
    inner: tuple            # per outer fold, N_INNER tuples of dev subject ids
    seed: int

    def outer_train(self, k: int) -> tuple:
        test = set(self.outer[k])
        return tuple(s for fold in self.outer for s in fold if s not in test)

    def inner_train(self, k: int, j: int) -> tuple:
        dev = set(self.inner[k][j])
        return tuple(s for s in self.outer_train(k) if s not in dev)

    def subjects(self) -> tuple:
        return tuple(s for fold in self.outer for s in fold)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "outer": [list(f) for f in self.outer],
                "inner": [[list(f) for f in fs] for fs in self.inner]}


def subject_labels(source) -> dict:
    """Map subject id -> 0/1 from a Manifest or an iterable of Events."""
    from .audio_io import CovidClass, Manifest

    out: dict = {}
    if isinstance(source, Manifest):
        items = []
        for e in source:
            if not isinstance(e.label, CovidClass):
                raise PlanError(f"{e.source_path}: label {e.label} is not a COVID label")
            items.append((e.subject_id, int(e.label is CovidClass.POSITIVE)))
    elif isinstance(source, dict):
        items = list(source.items())
    else:
        items = [(e.subject_id, e.label) for e in source]
    for s, y in items:
        if out.setdefault(s, y) != y:
            raise PlanError(f"subject {s} carries both labels")
    return out


def _deal(ids_by_class, n_folds, rng):
    folds = [[] for _ in range(n_folds)]
    pos = 0
    for ids in ids_by_class:
        ids = list(ids)
        rng.shuffle(ids)
        for s in ids:
            folds[pos % n_folds].append(s)
            pos += 1
    return [tuple(sorted(f)) for f in folds]


def make_cv_plan(source, seed: int, n_outer: int = N_OUTER, n_inner: int = N_INNER) -> CVPlan:
    """Stratified, subject-disjoint ``n_outer`` x ``n_inner`` nested folds."""
    labels = subject_labels(source)
    if len(labels) < 10:
        raise PlanError(f"need at least 10 subjects, got {len(labels)}")
    by_class = [sorted(s for s, y in labels.items() if y == c) for c in (0, 1)]
    if min(len(c) for c in by_class) < n_outer:
        raise PlanError(f"need at least {n_outer} subjects per class, got "
                        f"{len(by_class[0])} negative / {len(by_class[1])} positive")
    rng = np.random.default_rng(seed)
    outer = _deal(by_class, n_outer, rng)
    inner = []
    for k in range(n_outer):
        test = set(outer[k])
        train = [[s for s in c if s not in test] for c in by_class]
        inner.append(tuple(_deal(train, n_inner, rng)))
    return CVPlan(tuple(outer), tuple(inner), seed)


def check_plan(plan: CVPlan) -> None:
    """Raise if any fold leaks subjects between train, dev and test."""
    everyone = plan.subjects()
    if len(everyone) != len(set(everyone)):
        raise PlanError("a subject appears in more than one outer fold")
    for k in range(len(plan.outer)):
        test = set(plan.outer[k])
        train = set(plan.outer_train(k))
        devs = [set(d) for d in plan.inner[k]]
        if set().union(*devs) != train:
            raise PlanError(f"inner folds of outer fold {k} do not partition its training set")
        for j, dev in enumerate(devs):
            inner_train = set(plan.inner_train(k, j))
            if dev & test or inner_train & test or dev & inner_train:
                raise PlanError(f"fold ({k}, {j}) leaks subjects")


def permute_subject_labels(events: Sequence[Event], seed: int) -> list:
    """Shuffle labels between subjects (class counts kept, grouping intact)."""
    labels = subject_labels(events)
    ids = sorted(labels)
    shuffled = np.random.default_rng(seed).permutation([labels[s] for s in ids])
    new = dict(zip(ids, shuffled.tolist()))
    return [Event(e.event_id, e.subject_id, int(new[e.subject_id])) for e in events]


# --------------------------------------------------------------------------
# Trials and pipelines

@dataclass(frozen=True)
class TrialConfig:
    params: tuple = ()
    mode: ScoreMode = ScoreMode.MAX

    @classmethod
    def make(cls, mode=ScoreMode.MAX, **params):
        return cls(tuple(sorted(params.items())), ScoreMode(mode))

    def get(self, name, default=None):
        return dict(self.params).get(name, default)

    @property
    def fit_key(self) -> tuple:
        return self.params

    def to_dict(self) -> dict:
        return {"params": {k: _jsonable(v) for k, v in self.params}, "mode": self.mode.value}


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {"type": type(v).__name__, **{k: _jsonable(x) for k, x in
                                            dataclasses.asdict(v).items()}}
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def with_modes(configs, modes=tuple(ScoreMode)):
    return [TrialConfig(c.params, ScoreMode(m)) for c in configs for m in modes]


class Pipeline(Protocol):
    name: str

    def fit(self, config: TrialConfig, events: Sequence[Event], seed: int): ...

    def event_probs(self, model, events: Sequence[Event]) -> list: ...


def _events_of(events, subjects):
    keep = set(subjects)
    return [e for e in events if e.subject_id in keep]


def _subject_scores(events, probs, gamma, mode):
    by_subject: dict = {}
    labels = {}
    for e, p in zip(events, probs):
        by_subject.setdefault(e.subject_id, []).append(p)
        labels[e.subject_id] = e.label
    ids = sorted(by_subject)
    scores = np.array([subject_score(SubjectScore(by_subject[s]), gamma, mode) for s in ids])
    return ids, scores, np.array([labels[s] for s in ids])


def _event_level(events, probs):
    return np.array([p_hat(p) for p in probs]), np.array([e.label for e in events])


@dataclass
class InnerResult:
    config: TrialConfig
    fold_aucs: list
    dev_event_scores: np.ndarray
    dev_event_labels: np.ndarray

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_aucs))


def grid_search(plan: CVPlan, k: int, grid: Sequence[TrialConfig], pipeline: Pipeline,
                events: Sequence[Event], seed: int = 0):
    """Evaluate every config on the inner folds of outer fold ``k``.

    Per inner fold: fit on the inner-training subjects, score dev events,
    set the fold's equal-error threshold from the event-level dev ROC and
    compute the subject-level dev AUC under the config's score mode. The
    config with the highest mean AUC wins; ties keep the earliest config.
    Returns ``(best, results)``.
    """
    if not grid:
        raise ValueError("empty grid")
    fitted: dict = {}
    results = []
    for config in grid:
        aucs, dev_scores, dev_labels = [], [], []
        for j in range(len(plan.inner[k])):
            dev_events = _events_of(events, plan.inner[k][j])
            key = (config.fit_key, j)
            if key not in fitted:
                train_events = _events_of(events, plan.inner_train(k, j))
                model = pipeline.fit(config, train_events, seed=_fold_seed(seed, k, j))
                fitted[key] = pipeline.event_probs(model, dev_events)
            probs = fitted[key]
            ev_scores, ev_labels = _event_level(dev_events, probs)
            gamma = eer_threshold(roc(ev_scores, ev_labels))
            _, s_scores, s_labels = _subject_scores(dev_events, probs, gamma, config.mode)
            aucs.append(roc_auc(s_scores, s_labels))
            dev_scores.append(ev_scores)
            dev_labels.append(ev_labels)
        results.append(InnerResult(config, aucs, np.concatenate(dev_scores),
                                   np.concatenate(dev_labels)))
        log.debug("outer %d %s inner AUC %.4f", k, config, results[-1].mean_auc)
    best = max(range(len(results)), key=lambda i: (results[i].mean_auc, -i))
    return results[best], results


def _fold_seed(seed, k, j):
    return int(seed) * 1000 + 10 * k + (j + 1)


@dataclass
class FoldResult:
    fold: int
    auc: float
    specificity: float
    sensitivity: float
    accuracy: float
    gamma_ee: float
    best_config: TrialConfig
    inner_auc: float
    subject_ids: list
    subject_scores: np.ndarray
    subject_labels: np.ndarray

    def row(self) -> dict:
        return {"fold": self.fold, "auc": self.auc, "specificity": self.specificity,
                "sensitivity": self.sensitivity, "accuracy": self.accuracy,
                "gamma_ee": self.gamma_ee, "inner_auc": self.inner_auc,
                "n_test_subjects": len(self.subject_ids),
                "best_config": self.best_config.to_dict()}


@dataclass
class EvaluationReport:
    pipeline: str
    seed: int
    folds: list = field(default_factory=list)

    @property
    def aucs(self) -> np.ndarray:
        return np.array([f.auc for f in self.folds])

    @property
    def mean_auc(self) -> float:
        return float(self.aucs.mean())

    @property
    def sigma_auc(self) -> float:
        """Population standard deviation of the outer-fold AUCs."""
        return float(self.aucs.std(ddof=0))

    def summary(self) -> dict:
        keys = ("specificity", "sensitivity", "accuracy")
        out = {"mean_auc": self.mean_auc, "sigma_auc": self.sigma_auc}
        out.update({f"mean_{k}": float(np.mean([getattr(f, k) for f in self.folds])) for k in keys})
        return out

    def to_json(self) -> str:
        doc = {"pipeline": self.pipeline, "seed": self.seed, "summary": self.summary(),
               "folds": [f.row() for f in self.folds]}
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "auc", "specificity", "sensitivity", "accuracy", "gamma_ee",
                    "inner_auc", "n_test_subjects", "best_config"])
        for f in self.folds:
            r = f.row()
            w.writerow([r["fold"], repr(r["auc"]), repr(r["specificity"]), repr(r["sensitivity"]),
                        repr(r["accuracy"]), repr(r["gamma_ee"]), repr(r["inner_auc"]),
                        r["n_test_subjects"], json.dumps(r["best_config"], sort_keys=True)])
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "threshold", "fpr", "tpr"])
        for f in self.folds:
            for t, fp, tp in roc(f.subject_scores, f.subject_labels).points:
                w.writerow([f.fold, repr(t), repr(fp), repr(tp)])
        return buf.getvalue()


def evaluate(events: Sequence[Event], pipeline: Pipeline, plan: CVPlan,
             grid: Sequence[TrialConfig], seed: int | None = None) -> EvaluationReport:
    """Nested cross-validation of ``pipeline`` over ``grid``.

    For each outer fold: inner grid search, refit of the winner on the whole
    outer-training set, equal-error threshold from the winner's pooled
    inner-dev event scores, then subject-level scoring of the outer test
    subjects.
    """
    check_plan(plan)
    seed = plan.seed if seed is None else seed
    report = EvaluationReport(pipeline.name, seed)
    for k in range(len(plan.outer)):
        best, _ = grid_search(plan, k, grid, pipeline, events, seed)
        gamma = eer_threshold(roc(best.dev_event_scores, best.dev_event_labels))
        model = pipeline.fit(best.config, _events_of(events, plan.outer_train(k)),
                             seed=_fold_seed(seed, k, -1))
        test_events = _events_of(events, plan.outer[k])
        probs = pipeline.event_probs(model, test_events)
        ids, scores, labels = _subject_scores(test_events, probs, gamma, best.config.mode)
        pred = scores >= gamma
        pos, neg = labels == 1, labels == 0
        report.folds.append(FoldResult(
            fold=k, auc=roc_auc(scores, labels),
            specificity=float(np.mean(~pred[neg])), sensitivity=float(np.mean(pred[pos])),
            accuracy=float(np.mean(pred == (labels == 1))), gamma_ee=float(gamma),
            best_config=best.config, inner_auc=best.mean_auc, subject_ids=ids,
            subject_scores=scores, subject_labels=labels))
        log.info("%s outer fold %d: AUC %.4f (inner %.4f) %s", pipeline.name, k,
                 report.folds[-1].auc, best.mean_auc, best.config.to_dict())
    return report


# --------------------------------------------------------------------------
# Sequential forward selection

@dataclass
class SFSResult:
    order: list
    aucs: list


def sfs(groups: dict, labels, folds, fit_predict, max_k: int) -> SFSResult:
    """Greedy forward selection of named feature groups by mean dev AUC.

    ``groups`` maps a name to an ``(n, d_g)`` array; ``folds`` is a list of
    ``(train_idx, dev_idx)``; ``fit_predict(X_train, y_train, X_dev)`` returns
    dev probabilities. Stops at ``max_k`` groups or when no remaining group
    raises the AUC. Candidates are tried in ``groups`` order and ties keep
    the earlier one.
    """
    if not groups:
        raise ValueError("no candidate groups")
    y = np.asarray(labels)
    names = list(groups)
    blocks = {n: np.asarray(groups[n], dtype=np.float64).reshape(len(y), -1) for n in names}
    chosen: list = []
    aucs: list = []
    current = -np.inf
    while len(chosen) < max_k:
        best_name, best_auc = None, current
        for name in names:
            if name in chosen:
                continue
            X = np.hstack([blocks[n] for n in chosen + [name]])
            fold_aucs = [roc_auc(fit_predict(X[tr], y[tr], X[dv]), y[dv]) for tr, dv in folds]
            score = float(np.mean(fold_aucs))
            if score > best_auc:
                best_name, best_auc = name, score
        if best_name is None:
            break
        chosen.append(best_name)
        aucs.append(best_auc)
        current = best_auc
    return SFSResult(chosen, aucs)


def subject_folds(subject_ids, plan_folds):
    """Index pairs ``(train, dev)`` for sample-level arrays from subject folds."""
    sid = np.asarray(subject_ids)
    out = []
    for dev_subjects in plan_folds:
        dev = np.isin(sid, list(dev_subjects))
        out.append((np.flatnonzero(~dev), np.flatnonzero(dev)))
    return out
