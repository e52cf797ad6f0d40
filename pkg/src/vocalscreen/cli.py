"""Command-line entry point: ``vocalscreen <command> [flags]``.

Commands: features, pretrain, finetune, bottleneck, cv, synth. Settings
come from ``--config`` (INI); flags override the file. Exit status is 0 on
success, 2 on validation errors and 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels, synth
from .audio_io import CovidClass, Manifest, ManifestError, PretrainClass, load_manifest
from .config import ConfigError, RunConfig, load_config
from .crossval import PlanError, check_plan, evaluate, make_cv_plan, permute_subject_labels
from .dsp_features import save_feature_csv, save_feature_file
from .nn_core import Network, load_checkpoint, read_container, save_checkpoint, truncate
from .pipelines import (
    DirectPipeline,
    ShallowPipeline,
    TransferPipeline,
    events_from_entries,
    iter_manifest_features,
    load_boundaries,
    manifest_features,
)
from .scoring import roc_auc
from .transfer import (
    BOTTLENECK_DIM,
    PRETRAIN_CLASSES,
    PretrainedBackbone,
    attach_finetune_head,
    extract_bottleneck,
    finetune,
    positive_probability,
    pretrain,
)

log = logging.getLogger("vocalscreen")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class ValidationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Helpers

def write_sidecar(artifact: Path, cfg: RunConfig, command: str, **extra) -> Path:
    """``<artifact>.meta.json`` echoing the full configuration."""
    meta = {"artifact": artifact.name, "command": command, "version": __version__,
            "backend": kernels.BACKEND, "config": cfg.to_dict(),
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    meta.update(extra)
    path = artifact.with_name(artifact.name + ".meta.json")
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _manifest(path, what, vocabulary) -> Manifest:
    if path is None:
        raise ValidationError(f"[data] {what} is required for this command")
    if not Path(path).is_file():
        raise ValidationError(f"[data] {what}: {path} does not exist")
    m = load_manifest(path)
    for row, e in enumerate(m, start=2):
        if not isinstance(e.label, vocabulary):
            raise ValidationError(f"{path}:{row}: label {e.label.value!r} is not valid in a "
                                  f"{what} (expected {', '.join(v.value for v in vocabulary)})")
        if not m.resolve(e).is_file():
            raise ValidationError(f"{path}:{row}: audio file {e.source_path} does not exist")
    return m


def _boundaries(cfg):
    if cfg.boundaries is None:
        return None
    if not cfg.boundaries.is_file():
        raise ValidationError(f"[data] boundaries: {cfg.boundaries} does not exist")
    try:
        return load_boundaries(cfg.boundaries)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ValidationError(f"{what}: {path} does not exist")


def _pretrain_arrays(manifest, cfg):
    feats = manifest_features(manifest, cfg.features, cfg.trim)
    order = list(PretrainClass)
    X = np.stack([feats[e.source_path] for e in manifest]).astype(np.float32)
    y = np.array([order.index(e.label) for e in manifest], dtype=np.int64)
    return X, y


def _check_backbone_shape(backbone, cfg):
    if tuple(backbone.input_shape) != cfg.features.shape:
        raise ValidationError(f"backbone expects {backbone.input_shape} features but [features] "
                              f"gives {cfg.features.shape}")


def load_backbone(path) -> PretrainedBackbone:
    """A saved backbone, or the frozen prefix of a fine-tuned checkpoint."""
    desc, _ = read_container(path)
    if "provenance" in json.loads(desc):
        return PretrainedBackbone.load(path)
    net = load_checkpoint(path)
    if net.frozen_prefix == 0:
        raise ValidationError(f"{path} is neither a backbone nor a fine-tuned network")
    return PretrainedBackbone(truncate(net, net.frozen_prefix), {"source": str(path)})


def _stem_dir(root: Path, manifest_path: Path) -> Path:
    return root / Path(manifest_path).stem


def _artifact_name(event_id: str, suffix: str) -> str:
    base, _, idx = event_id.partition("#")
    return str(Path(base).with_suffix("")) + (f".{idx}" if idx else "") + suffix


# --------------------------------------------------------------------------
# Commands

def cmd_synth(cfg: RunConfig) -> dict:
    pre, cov = synth.generate(cfg.out, cfg.synth)
    for p in (pre, cov):
        write_sidecar(p, cfg, "synth")
    log.info("wrote %s and %s", pre, cov)
    return {"pretrain_manifest": pre, "covid_manifest": cov}


def cmd_features(cfg: RunConfig) -> dict:
    todo = []
    if cfg.pretrain_manifest is not None:
        todo.append((cfg.pretrain_manifest, _manifest(cfg.pretrain_manifest, "pretrain_manifest",
                                                      PretrainClass), None))
    if cfg.covid_manifest is not None:
        todo.append((cfg.covid_manifest, _manifest(cfg.covid_manifest, "covid_manifest",
                                                   CovidClass), _boundaries(cfg)))
    if not todo:
        raise ValidationError("[data] needs pretrain_manifest and/or covid_manifest")
    suffix = ".vsfm" if cfg.feature_format == "binary" else ".csv"
    written = []
    for path, manifest, bounds in todo:
        root = _stem_dir(cfg.out / "features", path)
        for event_id, entry, fm in iter_manifest_features(manifest, cfg.features, cfg.trim,
                                                          bounds):
            dest = root / _artifact_name(event_id, suffix)
            dest.parent.mkdir(parents=True, exist_ok=True)
            (save_feature_file if suffix == ".vsfm" else save_feature_csv)(dest, fm)
            write_sidecar(dest, cfg, "features", event_id=event_id, subject_id=entry.subject_id,
                          shape=list(fm.shape))
            written.append(dest)
    log.info("wrote %d feature files", len(written))
    return {"files": written}


def cmd_pretrain(cfg: RunConfig) -> dict:
    manifest = _manifest(cfg.pretrain_manifest, "pretrain_manifest", PretrainClass)
    present = {e.label for e in manifest}
    missing = [c.value for c in PretrainClass if c not in present]
    if missing:
        raise ValidationError(f"{cfg.pretrain_manifest}: no recordings for class(es) "
                              f"{', '.join(missing)}")
    X, y = _pretrain_arrays(manifest, cfg)
    backbone, full, history = pretrain(
        cfg.arch, X, y, cfg.pretrain_train, cfg.arch_options, smote_seed=cfg.seed,
        log=lambda epoch, loss: log.info("pretrain epoch %d loss %.5f", epoch, loss))
    out = cfg.out / "backbone.vsnn"
    out.parent.mkdir(parents=True, exist_ok=True)
    backbone.save(out)
    accuracy = float(np.mean(full.predict(X).argmax(axis=1) == y))
    write_sidecar(out, cfg, "pretrain", history=history, train_accuracy=accuracy,
                  classes=list(PRETRAIN_CLASSES), provenance=backbone.provenance)
    log.info("backbone written to %s (training accuracy %.3f)", out, accuracy)
    return {"backbone": out, "history": history, "train_accuracy": accuracy}


def cmd_finetune(cfg: RunConfig) -> dict:
    manifest = _manifest(cfg.covid_manifest, "covid_manifest", CovidClass)
    bounds = _boundaries(cfg)
    _require_file(cfg.backbone, "[finetune] backbone")
    backbone = load_backbone(cfg.backbone)
    _check_backbone_shape(backbone, cfg)
    feats = manifest_features(manifest, cfg.features, cfg.trim, bounds)
    events = events_from_entries(manifest, bounds)
    X = np.stack([feats[e.event_id] for e in events])
    y = np.array([e.label for e in events])
    if len(np.unique(y)) < 2:
        raise ValidationError(f"{cfg.covid_manifest}: fine-tuning needs both classes")
    headed = attach_finetune_head(backbone, cfg.finetune_hidden, seed=cfg.seed)
    headed, history = finetune(headed, X, y, cfg.finetune_train, smote_seed=cfg.seed)
    out = cfg.out / "finetuned.vsnn"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(headed, out)
    probs = positive_probability(headed, X.astype(headed.dtype))
    report = {"history": history, "n_events": len(events),
              "trainable_parameters": headed.n_params(trainable_only=True),
              "train_auc": roc_auc(probs, y)}
    rpath = cfg.out / "finetune_report.json"
    rpath.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_sidecar(out, cfg, "finetune")
    write_sidecar(rpath, cfg, "finetune")
    log.info("fine-tuned network written to %s (training AUC %.3f)", out, report["train_auc"])
    return {"model": out, "report": report}


def cmd_bottleneck(cfg: RunConfig) -> dict:
    model = cfg.bottleneck_model or cfg.backbone
    _require_file(model, "[bottleneck] model")
    todo = []
    if cfg.pretrain_manifest is not None:
        todo.append((cfg.pretrain_manifest, _manifest(cfg.pretrain_manifest, "pretrain_manifest",
                                                      PretrainClass), None))
    if cfg.covid_manifest is not None:
        todo.append((cfg.covid_manifest, _manifest(cfg.covid_manifest, "covid_manifest",
                                                   CovidClass), _boundaries(cfg)))
    if not todo:
        raise ValidationError("[data] needs pretrain_manifest and/or covid_manifest")
    backbone = load_backbone(model)
    _check_backbone_shape(backbone, cfg)
    written = []
    for path, manifest, bounds in todo:
        root = _stem_dir(cfg.out / "bottleneck", path)
        for event_id, entry, fm in iter_manifest_features(manifest, cfg.features, cfg.trim,
                                                          bounds):
            v = extract_bottleneck(backbone, fm).astype(np.float32)
            dest = root / _artifact_name(event_id, ".npy")
            dest.parent.mkdir(parents=True, exist_ok=True)
            np.save(dest, v)
            write_sidecar(dest, cfg, "bottleneck", event_id=event_id,
                          subject_id=entry.subject_id, dim=int(v.shape[0]), model=str(model))
            written.append(dest)
    log.info("wrote %d bottleneck vectors of dimension %d", len(written), BOTTLENECK_DIM)
    return {"files": written}


def build_pipeline(cfg: RunConfig, manifest, bounds):
    """The configured pipeline plus its trial grid."""
    cv = cfg.cv
    modes = tuple(cv.modes)
    if cv.pipeline in ("transfer",) or (cv.pipeline == "shallow" and cv.input == "bottleneck"):
        _require_file(cfg.backbone, "[finetune] backbone")
        backbone = load_backbone(cfg.backbone)
        _check_backbone_shape(backbone, cfg)
    feats = manifest_features(manifest, cfg.features, cfg.trim, bounds)
    if cv.pipeline == "transfer":
        p = TransferPipeline(backbone, feats, cfg.finetune_train, cv.hidden_grid)
    elif cv.pipeline == "direct":
        p = DirectPipeline(cfg.arch, feats, cfg.pretrain_train, cfg.arch_options,
                           hidden=cfg.finetune_hidden)
    elif cv.input == "bottleneck":
        vectors = dict(zip(sorted(feats), extract_bottleneck(
            backbone, np.stack([feats[k] for k in sorted(feats)]))))
        p = ShallowPipeline(cv.specs, vectors, "bottleneck")
    else:
        sets = {cfg.features.key(): feats}
        for fc in cv.feature_grid:
            if fc.key() not in sets:
                sets[fc.key()] = manifest_features(manifest, fc, cfg.trim, bounds)
        p = ShallowPipeline(cv.specs, sets, cv.input, cv.max_frames)
    return p, p.grid(modes)


def cmd_cv(cfg: RunConfig) -> dict:
    manifest = _manifest(cfg.covid_manifest, "covid_manifest", CovidClass)
    bounds = _boundaries(cfg)
    events = events_from_entries(manifest, bounds)
    plan_seed = cfg.seed if cfg.cv.plan_seed is None else cfg.cv.plan_seed
    try:
        plan = make_cv_plan(events, plan_seed)
        check_plan(plan)
    except PlanError as exc:
        raise ValidationError(f"{cfg.covid_manifest}: {exc}") from None
    if cfg.cv.permute_labels:
        events = permute_subject_labels(events, cfg.seed)
    pipeline, grid = build_pipeline(cfg, manifest, bounds)
    report = evaluate(events, pipeline, plan, grid, seed=cfg.seed)
    out = cfg.out / "cv"
    out.mkdir(parents=True, exist_ok=True)
    files = {"report.json": report.to_json() + "\n", "report.csv": report.to_csv(),
             "roc.csv": report.roc_csv(),
             "plan.json": json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n"}
    for name, text in files.items():
        (out / name).write_text(text)
        write_sidecar(out / name, cfg, "cv", pipeline=pipeline.name)
    log.info("%s: mean AUC %.4f, sigma %.4f", pipeline.name, report.mean_auc, report.sigma_auc)
    return {"report": report, "dir": out}


COMMANDS = {"features": cmd_features, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "bottleneck": cmd_bottleneck, "cv": cmd_cv, "synth": cmd_synth}


# --------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vocalscreen",
                                     description="Audio screening pipeline: features, "
                                                 "pre-training, transfer learning and nested CV.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {"features": "extract primary-feature files", "pretrain": "4-class pre-training",
             "finetune": "fine-tune a head on screening labels",
             "bottleneck": "write 512-d bottleneck vectors", "cv": "nested cross-validation",
             "synth": "generate the synthetic benchmark corpus"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="INI run configuration")
        p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
        p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
        p.add_argument("--arch", choices=["cnn", "lstm", "resnet"])
        p.add_argument("--features", choices=["mfcc", "fbank"])
        p.add_argument("--threads", type=int, help="BLAS thread limit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    return {"run.seed": args.seed,
            "run.out": args.out.resolve() if args.out is not None else None,
            "architecture.kind": args.arch, "features.kind": args.features,
            "run.threads": args.threads}


def run(command: str, cfg: RunConfig) -> dict:
    limit = contextlib.nullcontext()
    if cfg.threads:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(cfg.threads)
    with limit:
        return COMMANDS[command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        cfg.out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"vocalscreen: configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        run(args.command, cfg)
    except (ValidationError, ManifestError) as exc:
        print(f"vocalscreen: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report every runtime failure the same way
        log.debug("runtime failure", exc_info=True)
        print(f"vocalscreen: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
