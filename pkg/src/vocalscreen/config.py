"""Run configuration: an INI file with sections, overridable from the command line.

Precedence, lowest to highest: built-in defaults, the config file, flags.
Relative paths in the file resolve against the file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp_features import FeatureConfig, FeatureKind
from .nn_core import TrainConfig
from .scoring import ScoreMode
from .shallow import KNNSpec, LRSpec, MLPSpec, SVMSpec
from .synth import SynthConfig
from .transfer import ArchitectureKind, ArchitectureOptions


class ConfigError(ValueError):
    """Invalid configuration; reported with section/field context."""


SECTIONS = ("run", "data", "features", "trim", "architecture", "pretrain", "finetune",
            "bottleneck", "cv", "synth")

FEATURE_ALIASES = {"mfcc": FeatureKind.MFCC, "fbank": FeatureKind.LINEAR_FBANK,
                   "linear_fbank": FeatureKind.LINEAR_FBANK}


def _list(text, cast):
    return tuple(cast(t.strip()) for t in str(text).split(",") if t.strip())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class CVSettings:
    pipeline: str = "transfer"          # transfer | direct | shallow
    classifier: str = "svm"             # lr | svm | knn | mlp (shallow only)
    input: str = "bottleneck"           # bottleneck | frames | flat (shallow only)
    modes: tuple = tuple(m.value for m in ScoreMode)
    hidden_grid: tuple = (32,)
    specs: tuple = ()
    feature_grid: tuple = ()            # extra FeatureConfigs for primary-feature shallow runs
    max_frames: int | None = None
    permute_labels: bool = False
    plan_seed: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: Path
    threads: int | None = None
    pretrain_manifest: Path | None = None
    covid_manifest: Path | None = None
    boundaries: Path | None = None
    features: FeatureConfig = FeatureConfig()
    feature_format: str = "binary"
    trim: dict = field(default_factory=lambda: {"margin_ms": 50.0, "frame_ms": 10.0,
                                                "threshold_ratio": 0.1})
    arch: ArchitectureKind = ArchitectureKind.RESNET
    arch_options: ArchitectureOptions = ArchitectureOptions()
    pretrain_train: TrainConfig = TrainConfig()
    finetune_train: TrainConfig = TrainConfig()
    finetune_hidden: int = 32
    backbone: Path | None = None
    bottleneck_model: Path | None = None
    cv: CVSettings = CVSettings()
    synth: SynthConfig = SynthConfig()

    def to_dict(self) -> dict:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, Path):
                return str(v)
            if hasattr(v, "value"):
                return v.value
            return v
        d = conv(self)
        d["cv"]["specs"] = [{"type": type(s).__name__, **conv(s)} for s in self.cv.specs]
        return d


def _shallow_specs(sec, classifier, allow_off):
    def grid(key, cast, default):
        return _list(sec.get(key), cast) if sec.get(key) else default

    if classifier == "lr":
        return [LRSpec(a1, a2, a3, allow_off_grid=allow_off)
                for a1 in grid("lr_alpha1", float, (1.0,))
                for a2 in grid("lr_alpha2", float, (0.0,))
                for a3 in grid("lr_alpha3", float, (1.0,))]
    if classifier == "svm":
        return [SVMSpec(a1, a4, allow_off_grid=allow_off)
                for a1 in grid("svm_alpha1", float, (1.0,))
                for a4 in grid("svm_alpha4", float, (1e-3,))]
    if classifier == "knn":
        return [KNNSpec(a5, a6, allow_off_grid=allow_off)
                for a5 in grid("knn_alpha5", int, (10,))
                for a6 in grid("knn_alpha6", int, (30,))]
    if classifier == "mlp":
        return [MLPSpec(a7, a3, b6, allow_off_grid=allow_off)
                for a7 in grid("mlp_alpha7", int, (50,))
                for a3 in grid("mlp_alpha3", float, (0.0,))
                for b6 in grid("mlp_beta6", float, (1e-3,))]
    raise ValueError(f"classifier must be lr, svm, knn or mlp, got {classifier!r}")


def _feature_cfg(text, sample_rate, allow_off):
    """``kind:size:F:S`` -> FeatureConfig (size is M for mfcc, B for fbank)."""
    parts = [p.strip() for p in text.split(":")]
    if len(parts) != 4:
        raise ValueError(f"feature grid entry {text!r} must be kind:size:F:S")
    kind = FEATURE_ALIASES[parts[0]]
    size, F, S = (int(p) for p in parts[1:])
    extra = {"M": size} if kind is FeatureKind.MFCC else {"B": size}
    return FeatureConfig(kind, F=F, S=S, sample_rate=sample_rate, allow_off_grid=allow_off,
                         **extra)


def _train_cfg(sec, seed, base: TrainConfig):
    return TrainConfig(batch_size=sec.getint("batch_size", base.batch_size),
                       epochs=sec.getint("epochs", base.epochs),
                       learning_rate=sec.getfloat("learning_rate", base.learning_rate),
                       optimizer=sec.get("optimizer", base.optimizer), seed=seed)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from an INI file plus flag ``overrides``.

    ``overrides`` uses ``"section.key"`` names, e.g. ``{"run.seed": "3"}``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cp.read(path)
        base_dir = path.resolve().parent
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {', '.join(SECTIONS)}")
    for sec in SECTIONS:
        if not cp.has_section(sec):
            cp.add_section(sec)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        sec, opt = key.split(".", 1)
        cp.set(sec, opt, str(value))

    where = "?"

    def resolve(p):
        if not p:
            return None
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    try:
        where = "[run] seed"
        if not cp.get("run", "seed", fallback="").strip():
            raise ValueError("seed is mandatory (set [run] seed or pass --seed)")
        seed = cp.getint("run", "seed")
        where = "[run] out"
        out = resolve(cp.get("run", "out", fallback="")) or Path("out")
        where = "[run] threads"
        threads = cp.getint("run", "threads") if cp.get("run", "threads", fallback="") else None

        where = "[data]"
        d = cp["data"]
        data = {k: resolve(d.get(k)) for k in ("pretrain_manifest", "covid_manifest",
                                               "boundaries")}

        where = "[features]"
        f = cp["features"]
        allow_off = _bool(f.get("allow_off_grid", "false"))
        kind_text = f.get("kind", "mfcc").strip()
        if kind_text not in FEATURE_ALIASES:
            raise ValueError(f"kind must be mfcc or fbank, got {kind_text!r}")
        sample_rate = f.getint("sample_rate", 16000)
        features = FeatureConfig(FEATURE_ALIASES[kind_text], M=f.getint("M", 39),
                                 B=f.getint("B", 60), F=f.getint("F", 1024),
                                 S=f.getint("S", 150), sample_rate=sample_rate,
                                 allow_off_grid=allow_off)
        fmt = f.get("format", "binary")
        if fmt not in ("binary", "csv"):
            raise ValueError(f"format must be binary or csv, got {fmt!r}")

        where = "[trim]"
        t = cp["trim"]
        trim = {"margin_ms": t.getfloat("margin_ms", 50.0), "frame_ms": t.getfloat("frame_ms", 10.0),
                "threshold_ratio": t.getfloat("threshold_ratio", 0.1)}
        if trim["frame_ms"] <= 0 or trim["margin_ms"] < 0 or trim["threshold_ratio"] < 0:
            raise ValueError("frame_ms must be > 0, margin_ms and threshold_ratio >= 0")

        where = "[architecture]"
        a = cp["architecture"]
        arch = ArchitectureKind(a.get("kind", "resnet"))
        dflt = ArchitectureOptions()
        opts = ArchitectureOptions(
            conv_filters=_list(a.get("conv_filters"), int) if a.get("conv_filters")
            else dflt.conv_filters,
            conv_kernel=a.getint("conv_kernel", dflt.conv_kernel),
            dropout=a.getfloat("dropout", dflt.dropout),
            lstm_units=_list(a.get("lstm_units"), int) if a.get("lstm_units") else dflt.lstm_units,
            resnet_depth=a.getint("resnet_depth", dflt.resnet_depth),
            resnet_width=a.getint("resnet_width", dflt.resnet_width))

        where = "[pretrain]"
        pre_train = _train_cfg(cp["pretrain"], seed, TrainConfig())
        where = "[finetune]"
        ft = cp["finetune"]
        ft_train = _train_cfg(ft, seed, TrainConfig())
        hidden = ft.getint("hidden", 32)
        backbone = resolve(ft.get("backbone")) or out / "backbone.vsnn"
        where = "[bottleneck]"
        bn_model = resolve(cp["bottleneck"].get("model"))

        where = "[cv]"
        c = cp["cv"]
        pipeline = c.get("pipeline", "transfer")
        if pipeline not in ("transfer", "direct", "shallow"):
            raise ValueError(f"pipeline must be transfer, direct or shallow, got {pipeline!r}")
        classifier = c.get("classifier", "svm")
        cv_input = c.get("input", "bottleneck")
        if cv_input not in ("bottleneck", "frames", "flat"):
            raise ValueError(f"input must be bottleneck, frames or flat, got {cv_input!r}")
        modes = tuple(ScoreMode(m).value for m in _list(c.get("modes", "ci1,ci2,max_of_both"),
                                                         str))
        if not modes:
            raise ValueError("modes must list at least one score mode")
        off = _bool(c.get("allow_off_grid", "false"))
        specs = tuple(_shallow_specs(c, classifier, off)) if pipeline == "shallow" else ()
        fgrid = tuple(_feature_cfg(x, sample_rate, allow_off)
                      for x in _list(c.get("feature_grid", ""), str))
        cv = CVSettings(pipeline=pipeline, classifier=classifier, input=cv_input, modes=modes,
                        hidden_grid=_list(c.get("hidden_grid", "32"), int), specs=specs,
                        feature_grid=fgrid,
                        max_frames=c.getint("max_frames") if c.get("max_frames") else None,
                        permute_labels=_bool(c.get("permute_labels", "false")),
                        plan_seed=c.getint("plan_seed") if c.get("plan_seed") else None)

        where = "[synth]"
        s = cp["synth"]
        sdef = SynthConfig()
        synth = SynthConfig(seed=seed,
                            clips_per_class=s.getint("clips_per_class", sdef.clips_per_class),
                            n_positive=s.getint("n_positive", sdef.n_positive),
                            n_negative=s.getint("n_negative", sdef.n_negative),
                            clips_per_subject=s.getint("clips_per_subject",
                                                       sdef.clips_per_subject),
                            cue=s.get("cue", sdef.cue))
        if synth.cue not in ("pair", "band"):
            raise ValueError(f"cue must be pair or band, got {synth.cue!r}")
    except (ValueError, KeyError) as exc:
        msg = exc.args[0] if exc.args else exc
        raise ConfigError(f"{where}: {msg}") from None

    return RunConfig(seed=seed, out=out, threads=threads, features=features,
                     feature_format=fmt, trim=trim, arch=arch, arch_options=opts,
                     pretrain_train=pre_train, finetune_train=ft_train, finetune_hidden=hidden,
                     backbone=backbone, bottleneck_model=bn_model, cv=cv, synth=synth, **data)
