import numpy as np
import pytest

from vocalscreen import shallow
from vocalscreen.audio_io import CovidClass, PretrainClass, load_manifest
from vocalscreen.crossval import Event, make_cv_plan, evaluate
from vocalscreen.dsp_features import FeatureConfig, FeatureKind
from vocalscreen.nn_core import TrainConfig
from vocalscreen.pipelines import (
    DirectPipeline,
    ShallowPipeline,
    TransferPipeline,
    events_from_entries,
    load_boundaries,
    manifest_features,
)
from vocalscreen.scoring import ScoreMode
from vocalscreen.synth import SynthConfig, covid_clip, generate, pretrain_clip
from vocalscreen.transfer import ArchitectureOptions, pretrain

FEAT = FeatureConfig(FeatureKind.MFCC, M=13, F=1024, S=70)
SMALL = ArchitectureOptions(conv_filters=(8, 8), resnet_depth=10, resnet_width=4)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(seed=1, clips_per_class=6, n_positive=7, n_negative=7, clips_per_subject=2)
    pre, cov = generate(out, cfg)
    return load_manifest(pre), load_manifest(cov)


def test_generate_layout(corpus):
    pre, cov = corpus
    assert len(pre) == 24 and {e.label for e in pre} == set(PretrainClass)
    assert len(cov) == 28 and sum(e.label is CovidClass.POSITIVE for e in cov) == 14
    assert all(pre.resolve(e).is_file() for e in pre)
    subjects = {}
    for e in cov:
        subjects.setdefault(e.subject_id, set()).add(e.label)
    assert len(subjects) == 14 and all(len(v) == 1 for v in subjects.values())


def test_clips_are_deterministic_and_bounded():
    cfg = SynthConfig()
    for cls in PretrainClass:
        a = pretrain_clip(cls, np.random.default_rng(3), cfg)
        b = pretrain_clip(cls, np.random.default_rng(3), cfg)
        np.testing.assert_array_equal(a, b)
        assert np.abs(a).max() <= 1.0
        assert a[0] == 0.0 and a[-1] == 0.0     # padded with digital silence
    for cue in ("pair", "band"):
        c = covid_clip(True, 1.0, SynthConfig(cue=cue), np.random.default_rng(0))
        assert c.ndim == 1 and np.abs(c).max() <= 1.0
    with pytest.raises(ValueError):
        covid_clip(True, 1.0, SynthConfig(cue="smell"), np.random.default_rng(0))


def test_pair_cue_has_matched_class_spectra():
    cfg = SynthConfig()
    spec = {}
    for positive in (False, True):
        rng = np.random.default_rng(5)
        acc = np.zeros(257)
        for _ in range(40):
            x = covid_clip(positive, 1.0, cfg, rng)
            x = x / (np.sqrt(np.mean(x ** 2)) + 1e-12)
            frames = np.lib.stride_tricks.sliding_window_view(x, 512)[::256]
            acc += (np.abs(np.fft.rfft(frames, axis=1)) ** 2).mean(0)
        spec[positive] = acc / acc.sum()
    # same bands carry the energy in both classes
    assert np.abs(spec[True] - spec[False]).sum() < 0.35


def test_events_and_boundaries(tmp_path, corpus):
    _, cov = corpus
    p = tmp_path / "b.csv"
    first = cov.entries[0].source_path
    p.write_text(f"path,start_s,end_s\n{first},0.5,0.9\n{first},0.0,0.4\n")
    bounds = load_boundaries(p)
    assert bounds[first] == [(0.0, 0.4), (0.5, 0.9)]
    ev = events_from_entries(cov, bounds)
    assert len(ev) == len(cov) + 1
    assert ev[0].event_id == f"{first}#0" and ev[1].event_id == f"{first}#1"
    feats = manifest_features(type(cov)(cov.entries[:1], cov.root), FEAT, boundaries=bounds)
    assert sorted(feats) == [f"{first}#0", f"{first}#1"]
    assert all(v.shape == (41, 70) for v in feats.values())
    for bad in ("path,start,end\n", "path,start_s,end_s\nx,1,0.5\n", "path,start_s,end_s\nx,a,1\n"):
        p.write_text(bad)
        with pytest.raises(ValueError):
            load_boundaries(p)


@pytest.fixture(scope="module")
def covid_features(corpus):
    return manifest_features(corpus[1], FEAT)


@pytest.fixture(scope="module")
def pretrained(corpus):
    pre = corpus[0]
    feats = manifest_features(pre, FEAT)
    order = list(PretrainClass)
    X = np.stack([feats[e.source_path] for e in pre]).astype(np.float32)
    y = np.array([order.index(e.label) for e in pre])
    return pretrain("cnn", X, y, TrainConfig(batch_size=8, epochs=3, seed=0), SMALL)[0]


def test_transfer_pipeline_contract(corpus, covid_features, pretrained):
    ev = events_from_entries(corpus[1])
    pipe = TransferPipeline(pretrained, covid_features, TrainConfig(batch_size=8, epochs=3))
    assert set(pipe.vectors) == set(covid_features)
    assert all(v.shape == (512,) for v in pipe.vectors.values())
    grid = pipe.grid()
    assert len(grid) == 3
    head = pipe.fit(grid[0], ev[:20], seed=3)
    probs = pipe.event_probs(head, ev[20:])
    assert len(probs) == 8 and all(p.shape == (1,) and 0 <= p[0] <= 1 for p in probs)
    again = pipe.event_probs(pipe.fit(grid[0], ev[:20], seed=3), ev[20:])
    np.testing.assert_array_equal(np.concatenate(probs), np.concatenate(again))


def test_direct_pipeline_contract(corpus, covid_features):
    ev = events_from_entries(corpus[1])
    pipe = DirectPipeline("cnn", covid_features, TrainConfig(batch_size=8, epochs=2), SMALL)
    assert len(pipe.grid()) == 3
    net = pipe.fit(pipe.grid()[0], ev[:20], seed=0)
    assert net.output_shape == (2,)
    probs = pipe.event_probs(net, ev[20:])
    assert len(probs) == 8


@pytest.mark.parametrize("mode", ["frames", "flat", "bottleneck"])
def test_shallow_pipeline_modes(corpus, covid_features, pretrained, mode):
    ev = events_from_entries(corpus[1])
    if mode == "bottleneck":
        from vocalscreen.transfer import extract_bottleneck

        feats = {k: extract_bottleneck(pretrained, v) for k, v in covid_features.items()}
    else:
        feats = covid_features
    specs = [shallow.SVMSpec(1.0, 1e-3), shallow.LRSpec(1.0, 0.0, 1.0)]
    pipe = ShallowPipeline(specs, feats, mode, max_frames=10)
    assert pipe.name == f"lr+svm-{mode}"
    grid = pipe.grid()
    assert len(grid) == (6 if mode == "frames" else 2)
    if mode != "frames":
        assert {c.mode for c in grid} == {ScoreMode.MAX}
    fitted = pipe.fit(grid[0], ev[:20], seed=1)
    probs = pipe.event_probs(fitted, ev[20:])
    assert len(probs) == 8
    want = 70 if mode == "frames" else 1
    assert all(len(p) == want for p in probs)


def test_shallow_pipeline_rejects_bad_args():
    with pytest.raises(ValueError):
        ShallowPipeline([shallow.SVMSpec(1.0, 1e-3)], {}, "pixels")
    with pytest.raises(ValueError):
        ShallowPipeline([], {}, "flat")


def test_nested_cv_on_separable_bottlenecks():
    # shallow pipeline end to end through evaluate(), on planted vectors
    rng = np.random.default_rng(0)
    ev, feats = [], {}
    for i in range(24):
        y = int(i >= 12)
        for j in range(2):
            eid = f"s{i}/{j}"
            ev.append(Event(eid, f"s{i}", y))
            feats[eid] = rng.normal(size=8) + 2.5 * y
    pipe = ShallowPipeline([shallow.LRSpec(1.0, 0.0, 1.0)], feats, "bottleneck")
    rep = evaluate(ev, pipe, make_cv_plan(ev, 0), pipe.grid(), seed=0)
    assert rep.mean_auc > 0.95 and len(rep.folds) == 5
