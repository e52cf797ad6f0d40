from pathlib import Path

import pytest

from vocalscreen.config import ConfigError, load_config
from vocalscreen.dsp_features import FeatureKind
from vocalscreen.shallow import LRSpec, SVMSpec
from vocalscreen.transfer import ArchitectureKind


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        load_config(write(tmp_path, "[run]\nout = o\n"))
    with pytest.raises(ConfigError, match="seed"):
        load_config(None, {})
    assert load_config(None, {"run.seed": 4}).seed == 4


def test_defaults(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nseed = 1\n"))
    assert cfg.features.kind is FeatureKind.MFCC and cfg.features.shape == (119, 150)
    assert cfg.arch is ArchitectureKind.RESNET and cfg.arch_options.resnet_depth == 50
    assert cfg.pretrain_train.seed == cfg.finetune_train.seed == cfg.synth.seed == 1
    assert cfg.cv.pipeline == "transfer" and cfg.cv.modes == ("ci1", "ci2", "max_of_both")


def test_flags_override_file_and_paths_resolve(tmp_path):
    p = write(tmp_path, "[run]\nseed = 1\nout = results\n[data]\ncovid_manifest = c.csv\n"
                        "[architecture]\nkind = cnn\n")
    cfg = load_config(p, {"run.seed": 9, "architecture.kind": "lstm", "features.kind": "fbank"})
    assert cfg.seed == 9 and cfg.arch is ArchitectureKind.LSTM
    assert cfg.features.kind is FeatureKind.LINEAR_FBANK
    assert cfg.out == tmp_path / "results"
    assert cfg.covid_manifest == tmp_path / "c.csv"
    assert cfg.backbone == tmp_path / "results" / "backbone.vsnn"
    absolute = load_config(p, {"run.out": "/x/y"})
    assert absolute.out == Path("/x/y")


@pytest.mark.parametrize("body, where", [
    ("[bogus]\n", "unknown section"),
    ("[features]\nkind = wavelet\n", r"\[features\]"),
    ("[features]\nM = 40\n", r"\[features\]"),
    ("[cv]\npipeline = magic\n", r"\[cv\]"),
    ("[cv]\nmodes = ci1,median\n", r"\[cv\]"),
    ("[cv]\npipeline = shallow\nclassifier = svm\nsvm_alpha1 = 7\n", r"\[cv\]"),
    ("[trim]\nframe_ms = 0\n", r"\[trim\]"),
    ("[architecture]\nkind = transformer\n", r"\[architecture\]"),
    ("[pretrain]\nepochs = many\n", r"\[pretrain\]"),
    ("[synth]\ncue = smell\n", r"\[synth\]"),
])
def test_errors_name_the_section(tmp_path, body, where):
    with pytest.raises(ConfigError, match=where):
        load_config(write(tmp_path, "[run]\nseed = 0\n" + body))


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        load_config("/nonexistent/run.ini")


def test_shallow_grids(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nseed = 0\n[cv]\npipeline = shallow\n"
                                      "classifier = svm\nsvm_alpha1 = 1,100\n"
                                      "svm_alpha4 = 1e-5,1e-3\n"))
    assert len(cfg.cv.specs) == 4 and all(isinstance(s, SVMSpec) for s in cfg.cv.specs)
    lr = load_config(write(tmp_path, "[run]\nseed = 0\n[cv]\npipeline = shallow\n"
                                     "classifier = lr\nlr_alpha2 = 0,0.5\n", "lr.ini"))
    assert [s.alpha2 for s in lr.cv.specs] == [0.0, 0.5]
    assert all(isinstance(s, LRSpec) for s in lr.cv.specs)
    fg = load_config(write(tmp_path, "[run]\nseed = 0\n[cv]\nfeature_grid = mfcc:13:1024:70,"
                                     "fbank:60:2048:150\n", "fg.ini"))
    assert [f.shape for f in fg.cv.feature_grid] == [(41, 70), (182, 150)]


def test_off_grid_allowed_when_asked(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nseed = 0\n[features]\nM = 20\n"
                                      "allow_off_grid = true\n"))
    assert cfg.features.M == 20


def test_to_dict_is_json_ready(tmp_path):
    import json

    cfg = load_config(write(tmp_path, "[run]\nseed = 0\n[cv]\npipeline = shallow\n"
                                      "classifier = knn\n"))
    doc = json.loads(json.dumps(cfg.to_dict()))
    assert doc["seed"] == 0 and doc["cv"]["specs"][0]["type"] == "KNNSpec"
