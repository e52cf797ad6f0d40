"""Classifier pipelines that plug into :func:`crossval.evaluate`.

Each pipeline knows how to fit on a list of training events and how to
return, for each test event, the per-frame positive probabilities that the
scoring equations consume (one value per event for recording-level models).
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from . import shallow
from .audio_io import AudioClip, CovidClass, load_wav, resample, trim_silence
from .balance import balance_classes
from .crossval import Event, TrialConfig, with_modes
from .dsp_features import extract_features
from .nn_core import TrainConfig, train
from .scoring import ScoreMode
from .transfer import (
    FINETUNE_HIDDEN,
    ArchitectureOptions,
    PretrainedBackbone,
    attach_finetune_head,
    build_architecture,
    extract_bottleneck,
    finetune,
    fit_input_scaling,
    head_network,
    positive_probability,
)


def _labels(events):
    return np.array([e.label for e in events], dtype=np.int64)


class TransferPipeline:
    """Frozen backbone plus a freshly trained ``dense(h) -> softmax(2)`` head.

    Bottleneck vectors are computed once for every event: the backbone never
    changes, so the head can be trained on them directly.
    """

    name = "transfer"

    def __init__(self, backbone: PretrainedBackbone, features: dict, train_cfg: TrainConfig,
                 hidden_grid=(FINETUNE_HIDDEN,)):
        self.backbone = backbone
        self.train_cfg = train_cfg
        self.hidden_grid = tuple(hidden_grid)
        ids = sorted(features)
        Z = extract_bottleneck(backbone, np.stack([np.asarray(features[i]) for i in ids]))
        self.vectors = dict(zip(ids, Z))

    def grid(self, modes=tuple(ScoreMode)):
        return with_modes([TrialConfig.make(hidden=h) for h in self.hidden_grid], modes)

    def fit(self, config: TrialConfig, events, seed: int):
        headed = attach_finetune_head(self.backbone, config.get("hidden", FINETUNE_HIDDEN),
                                      seed=seed)
        Z = np.stack([self.vectors[e.event_id] for e in events])
        cfg = dataclasses.replace(self.train_cfg, seed=seed)
        headed, _ = finetune(headed, Z, _labels(events), cfg, smote_seed=seed,
                             bottleneck_inputs=True)
        return head_network(headed)

    def event_probs(self, head, events):
        Z = np.stack([self.vectors[e.event_id] for e in events])
        return [np.array([p]) for p in positive_probability(head, Z.astype(head.dtype))]


class DirectPipeline:
    """The same deep architecture trained from scratch on the binary task."""

    name = "direct"

    def __init__(self, kind, features: dict, train_cfg: TrainConfig,
                 opts: ArchitectureOptions | None = None, hidden=FINETUNE_HIDDEN):
        self.kind = kind
        self.features = features
        self.train_cfg = train_cfg
        opts = opts or ArchitectureOptions()
        # backbone layers, then the 512-d bottleneck and the fine-tune head shape
        self.opts = dataclasses.replace(opts, head=(opts.head[0], hidden, 2))

    def grid(self, modes=tuple(ScoreMode)):
        return with_modes([TrialConfig.make()], modes)

    def _stack(self, events):
        return np.stack([np.asarray(self.features[e.event_id], dtype=np.float32) for e in events])

    def fit(self, config: TrialConfig, events, seed: int):
        X = self._stack(events)
        net = build_architecture(self.kind, X.shape[1:], self.opts, seed=seed)
        fit_input_scaling(net, X)
        Xb, yb = balance_classes(X, _labels(events), seed=seed)
        net, _ = train(net, Xb, yb, dataclasses.replace(self.train_cfg, seed=seed))
        return net

    def event_probs(self, net, events):
        return [np.array([p]) for p in positive_probability(net, self._stack(events))]


INPUT_MODES = ("frames", "flat", "bottleneck")


class ShallowPipeline:
    """LR, SVM, KNN or MLP on frame columns, flattened matrices or bottlenecks.

    ``features`` maps a feature-set name to ``{event_id: array}``: a
    ``(rows, S)`` matrix for the ``frames`` and ``flat`` modes, a vector for
    ``bottleneck``. In ``frames`` mode every column is a training sample
    carrying its event's label and the event's score averages its columns;
    ``max_frames`` keeps a fixed, evenly spaced subset of columns per
    training event to bound the training-set size. SMOTE runs on the
    training vectors only.
    """

    def __init__(self, specs, features: dict, input_mode: str = "bottleneck",
                 max_frames: int | None = None):
        if input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if not specs:
            raise ValueError("no classifier specs")
        self.specs = list(specs)
        if features and not isinstance(next(iter(features.values())), dict):
            features = {"default": features}
        self.features = features
        self.input_mode = input_mode
        self.max_frames = max_frames
        variants = sorted({s.variant for s in self.specs})
        self.name = f"{'+'.join(variants)}-{input_mode}"

    def grid(self, modes=tuple(ScoreMode)):
        if self.input_mode != "frames":
            modes = (ScoreMode.MAX,) if ScoreMode.MAX in modes else modes[:1]
        base = [TrialConfig.make(features=f, spec=s) for f in self.features for s in self.specs]
        return with_modes(base, modes)

    def _vectors(self, fset, event, training):
        a = np.asarray(self.features[fset][event.event_id], dtype=np.float64)
        if self.input_mode == "frames":
            cols = a.T
            if training and self.max_frames and len(cols) > self.max_frames:
                keep = np.linspace(0, len(cols) - 1, self.max_frames).round().astype(int)
                cols = cols[keep]
            return cols
        return a.reshape(1, -1)

    def fit(self, config: TrialConfig, events, seed: int):
        fset = config.get("features")
        blocks = [self._vectors(fset, e, True) for e in events]
        X = np.concatenate(blocks)
        y = np.concatenate([np.full(len(b), e.label) for b, e in zip(blocks, events)])
        Xb, yb = balance_classes(X, y, seed=seed)
        spec = config.get("spec")
        if isinstance(spec, shallow.MLPSpec):
            spec = dataclasses.replace(spec, seed=seed)
        return fset, shallow.train_shallow(spec, Xb, yb)

    def event_probs(self, fitted, events):
        fset, model = fitted
        blocks = [self._vectors(fset, e, False) for e in events]
        probs = model.predict_proba(np.concatenate(blocks))
        return np.split(probs, np.cumsum([len(b) for b in blocks])[:-1])


def events_from_entries(entries, boundaries: dict | None = None) -> list[Event]:
    """One event per manifest entry unless ``boundaries`` lists several.

    ``boundaries`` maps a source path to ``[(start_s, end_s), ...]``; event
    ids are ``path`` or ``path#i``.
    """
    out = []
    for e in entries:
        y = int(e.label is CovidClass.POSITIVE)
        spans = (boundaries or {}).get(e.source_path)
        if not spans:
            out.append(Event(e.source_path, e.subject_id, y))
        else:
            out.extend(Event(f"{e.source_path}#{i}", e.subject_id, y) for i in range(len(spans)))
    return out


def load_boundaries(path) -> dict:
    """Read an event-boundary CSV with header ``path,start_s,end_s``."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != \
                ["path", "start_s", "end_s"]:
            raise ValueError(f"{path}: header must be path,start_s,end_s")
        for row_no, row in enumerate(reader, start=2):
            try:
                start, end = float(row["start_s"]), float(row["end_s"])
            except ValueError:
                raise ValueError(f"{path}:{row_no}: start_s/end_s must be numbers") from None
            if not 0 <= start < end:
                raise ValueError(f"{path}:{row_no}: need 0 <= start_s < end_s")
            out.setdefault(row["path"], []).append((start, end))
    return {k: sorted(v) for k, v in out.items()}


def prepare_clip(clip, sample_rate: int, trim: dict | None = None):
    """Resample to ``sample_rate`` and trim silence (``trim`` = keyword overrides)."""
    clip = resample(clip, sample_rate)
    return trim_silence(clip, **(trim or {}))


def iter_manifest_features(manifest, cfg, trim: dict | None = None,
                           boundaries: dict | None = None):
    """Yield ``(event_id, entry, FeatureMatrix)`` for every event of ``manifest``.

    Event ids follow :func:`events_from_entries`. With boundaries, each span
    is cut from the resampled recording before trimming.
    """
    for e in manifest:
        clip = load_wav(manifest.resolve(e), e.subject_id, e.label, e.audio_type)
        spans = (boundaries or {}).get(e.source_path)
        if not spans:
            yield e.source_path, e, extract_features(prepare_clip(clip, cfg.sample_rate, trim),
                                                     cfg)
            continue
        clip = resample(clip, cfg.sample_rate)
        for i, (a, b) in enumerate(spans):
            part = clip.samples[int(a * clip.sample_rate):int(b * clip.sample_rate)]
            if len(part) == 0:
                raise ValueError(f"{e.source_path}: event {i} lies outside the recording")
            seg = AudioClip(part, clip.sample_rate, e.subject_id, e.label, e.audio_type,
                            e.source_path)
            yield f"{e.source_path}#{i}", e, extract_features(
                prepare_clip(seg, cfg.sample_rate, trim), cfg)


def manifest_features(manifest, cfg, trim: dict | None = None,
                      boundaries: dict | None = None) -> dict:
    """``{event_id: (rows, S) matrix}`` for every event of ``manifest``."""
    return {k: fm.values for k, _, fm in iter_manifest_features(manifest, cfg, trim, boundaries)}
