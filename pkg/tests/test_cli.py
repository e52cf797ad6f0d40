import json
import subprocess
import sys

import pytest

from vocalscreen.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main

TINY = """\
[run]
seed = 0
out = out
[data]
pretrain_manifest = out/pretrain.csv
covid_manifest = out/covid.csv
[synth]
clips_per_class = 6
n_positive = 10
n_negative = 10
clips_per_subject = 2
[features]
kind = mfcc
M = 13
F = 1024
S = 70
[architecture]
kind = resnet
resnet_depth = 10
resnet_width = 4
[pretrain]
epochs = 2
batch_size = 8
[finetune]
epochs = 3
batch_size = 8
"""


def _strip(meta):
    meta = dict(meta)
    meta.pop("created")
    return meta


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(TINY)
    ini = str(d / "run.ini")
    for cmd in ("synth", "features", "pretrain", "finetune", "bottleneck", "cv"):
        assert main([cmd, "--config", ini]) == EXIT_OK, cmd
    return d


def test_artifacts_and_sidecars(workdir):
    out = workdir / "out"
    for name in ("pretrain.csv", "covid.csv", "backbone.vsnn", "finetuned.vsnn",
                 "finetune_report.json"):
        assert (out / name).is_file(), name
    assert len(list((out / "features" / "covid").rglob("*.vsfm"))) == 40
    assert len(list((out / "bottleneck" / "covid").rglob("*.npy"))) == 40
    for name in ("report.json", "report.csv", "roc.csv", "plan.json"):
        meta = json.loads((out / "cv" / (name + ".meta.json")).read_text())
        assert meta["command"] == "cv" and meta["config"]["seed"] == 0
        assert meta["backend"] in ("compiled", "python")
    rep = json.loads((out / "cv" / "report.json").read_text())
    assert len(rep["folds"]) == 5
    ft = json.loads((out / "finetune_report.json").read_text())
    assert ft["trainable_parameters"] == 16482


def test_cv_is_deterministic(workdir):
    out = workdir / "out"
    first = {n: (out / "cv" / n).read_text() for n in ("report.json", "report.csv", "roc.csv")}
    meta = _strip(json.loads((out / "cv" / "report.json.meta.json").read_text()))
    assert main(["cv", "--config", str(workdir / "run.ini")]) == EXIT_OK
    for n, text in first.items():
        assert (out / "cv" / n).read_text() == text, n
    assert _strip(json.loads((out / "cv" / "report.json.meta.json").read_text())) == meta


def test_seed_flag_overrides(workdir, tmp_path):
    out = tmp_path / "o2"
    assert main(["cv", "--config", str(workdir / "run.ini"), "--seed", "1", "--out", str(out),
                 ]) == EXIT_VALIDATION    # no backbone in the new output dir
    assert main(["synth", "--config", str(workdir / "run.ini"), "--seed", "1",
                 "--out", str(out)]) == EXIT_OK
    meta = json.loads((out / "covid.csv.meta.json").read_text())
    assert meta["config"]["seed"] == 1 and meta["config"]["synth"]["seed"] == 1


def test_validation_exit_codes(workdir, tmp_path, capsys):
    ini = tmp_path / "noseed.ini"
    ini.write_text(TINY.replace("seed = 0\n", ""))
    assert main(["features", "--config", str(ini)]) == EXIT_VALIDATION
    assert "seed" in capsys.readouterr().err

    bad = tmp_path / "bad.csv"
    bad.write_text("path,subject_id,label,audio_type,dataset\nx.wav,s1,flu,cough,d\n")
    ini = tmp_path / "badlabel.ini"
    ini.write_text(TINY.replace("covid_manifest = out/covid.csv", f"covid_manifest = {bad}")
                   .replace("pretrain_manifest = out/pretrain.csv\n", ""))
    assert main(["features", "--config", str(ini)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "flu" in err or "label" in err

    ini = tmp_path / "nobackbone.ini"
    ini.write_text(TINY.replace("out = out", f"out = {tmp_path / 'empty'}")
                   .replace("out/covid.csv", str(workdir / "out" / "covid.csv")))
    assert main(["finetune", "--config", str(ini)]) == EXIT_VALIDATION
    assert "backbone" in capsys.readouterr().err


def test_wrong_backbone_shape(workdir, tmp_path, capsys):
    ini = tmp_path / "shape.ini"
    ini.write_text(TINY.replace("S = 70", "S = 150")
                   .replace("out = out", f"out = {tmp_path / 'o'}")
                   .replace("out/covid.csv", str(workdir / "out" / "covid.csv"))
                   + f"backbone = {workdir / 'out' / 'backbone.vsnn'}\n")
    assert main(["finetune", "--config", str(ini)]) == EXIT_VALIDATION
    assert "expects (41, 70)" in capsys.readouterr().err


def test_runtime_failure_exit_code(workdir, tmp_path):
    bogus = tmp_path / "bogus.vsnn"
    bogus.write_bytes(b"not a model")
    ini = tmp_path / "rt.ini"
    ini.write_text(TINY.replace("out = out", f"out = {tmp_path / 'o'}")
                   .replace("out/covid.csv", str(workdir / "out" / "covid.csv"))
                   + f"backbone = {bogus}\n")
    assert main(["finetune", "--config", str(ini)]) == EXIT_RUNTIME


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "vocalscreen.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
    for cmd in ("features", "pretrain", "finetune", "bottleneck", "cv", "synth"):
        assert cmd in r.stdout
