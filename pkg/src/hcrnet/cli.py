"""Command-line interface.

Subcommands cover the full workflow: ``synth`` renders a seeded scene,
``train`` fits a network, ``finetune`` adapts a checkpoint to a new scene,
``hpo`` searches training hyperparameters, ``predict`` maps a scene with a
checkpoint, and ``evaluate`` scores a predicted map. Every run writes a
``manifest.txt`` recording the command, resolved settings, and input/output
hashes. Exit codes: 0 success, 1 usage or configuration problem, 2 bad data
or file format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import importlib.resources
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .errors import (ConfigError, FormatError, HcrError, InputError,
                     MetricError, NumericError, ParseError, ShapeError,
                     SplitError, TaxonomyError, UsageError)
from .hierarchy import LEVELS, LossWeights, Taxonomy, load_taxonomy
from .hpo import SearchSpace, log_uniform, run_search, uniform
from .metrics import format_scores, hierarchical_report, scores_to_csv
from .model import ModelConfig, build_network, load_network, save_network
from .rasters import read_cube, read_labels, write_cube, write_labels
from .synthetic import (default_scene_spec, load_scene_config,
                        sample_sparse_labels, save_scene_config,
                        synthesize_scene)
from .train import (SceneData, TrainConfig, finetune, predict_map, train,
                    weighted_validation_loss)

_USAGE_ERRORS = (UsageError, ConfigError)
_DATA_ERRORS = (ParseError, FormatError, InputError, ShapeError,
                TaxonomyError, SplitError, MetricError)

# priors of the bundled Amazon hierarchy's classes in the training scene,
# heavily imbalanced on purpose (three classes sit below one percent)
AMAZON_PRIORS = {
    "Tree cover evergreen": 0.2349,
    "Tree cover deciduous": 0.2801,
    "Shrub cover": 0.0204,
    "Grasslands": 0.4104,
    "Croplands": 0.0470,
    "Grass. veg. aquatic or flooded": 0.0037,
    "Bare areas": 0.0019,
    "Built-up": 0.0002,
    "Open water seasonal": 0.0002,
    "Open water permanent": 0.0012,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); map to exit code 1
        raise UsageError(message)


def bundled_taxonomy_path() -> str:
    return str(importlib.resources.files("hcrnet") / "configs" / "amazon.hcsv")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(outdir: str, command: str, settings: dict,
                    inputs: dict, outputs: dict) -> None:
    lines = [f"command={command}", f"package_version={__version__}"]
    for key in sorted(settings):
        lines.append(f"setting:{key}={settings[key]}")
    for key in sorted(inputs):
        lines.append(f"input:{key}={inputs[key]} sha256={_sha256(inputs[key])}")
    for key in sorted(outputs):
        lines.append(f"output:{key}={outputs[key]} sha256={_sha256(outputs[key])}")
    with open(os.path.join(outdir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --- shared train settings -----------------------------------------------------

_FLOAT_KEYS = ("learning_rate", "weight_decay", "min_delta", "train_fraction")

_DEFAULTS = {
    "learning_rate": 1e-3, "weight_decay": 1e-4, "batch_size": 8,
    "max_epochs": 30, "patience": 5, "min_delta": 0.0, "steps_per_epoch": None,
    "seed": 0, "train_fraction": 0.3, "val_pixels_per_class": 25,
    "patch_size": 30, "stem_filters": 32, "block_filters": (32, 64, 64),
    "temporal_kernel": 3, "spatial_kernel": 3,
    "loss_weights": (1.0, 1.0, 1.0, 1.0, 1.0, 1.0), "warmup_iters": 20,
}


def _parse_tuple(raw: str, n: int | None, cast, what: str):
    try:
        values = tuple(cast(part.strip()) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {raw!r}")
    if n is not None and len(values) != n:
        raise ConfigError(f"{what} needs {n} comma-separated values, got {len(values)}")
    return values


def _read_settings_file(path: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_string(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"settings file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed settings file {path}: {exc}")
    if "train" not in parser:
        raise ConfigError(f"settings file {path} is missing its [train] section")
    out = {}
    for key, raw in parser["train"].items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown settings key {key!r} in {path}")
        try:
            if key == "block_filters":
                out[key] = _parse_tuple(raw, 3, int, key)
            elif key == "loss_weights":
                out[key] = _parse_tuple(raw, 6, float, key)
            elif key in _FLOAT_KEYS:
                out[key] = float(raw)
            else:
                out[key] = int(raw)
        except ValueError:
            raise ConfigError(f"settings key {key!r} has a malformed value {raw!r}")
    return out


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--settings", help="settings file; flags override its values")
    sub.add_argument("--learning-rate", type=float)
    sub.add_argument("--weight-decay", type=float)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--max-epochs", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--min-delta", type=float)
    sub.add_argument("--steps-per-epoch", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--train-fraction", type=float)
    sub.add_argument("--val-pixels-per-class", type=int)
    sub.add_argument("--patch-size", type=int)
    sub.add_argument("--stem-filters", type=int)
    sub.add_argument("--block-filters", help="three comma-separated widths, e.g. 32,64,64")
    sub.add_argument("--temporal-kernel", type=int)
    sub.add_argument("--spatial-kernel", type=int)
    sub.add_argument("--loss-weights",
                     help="six comma-separated weights: macro,intermediate,micro "
                          "CCE then micro>intermediate, intermediate>macro, "
                          "micro>macro penalties")


def _resolve_settings(args) -> dict:
    settings = dict(_DEFAULTS)
    if getattr(args, "settings", None):
        settings.update(_read_settings_file(args.settings))
    for key in _DEFAULTS:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "block_filters":
            value = _parse_tuple(value, 3, int, "--block-filters")
        elif key == "loss_weights":
            value = _parse_tuple(value, 6, float, "--loss-weights")
        settings[key] = value
    return settings


def _model_config(settings: dict, cube: np.ndarray) -> ModelConfig:
    return ModelConfig(
        timesteps=cube.shape[0], channels=cube.shape[1],
        patch_size=settings["patch_size"], stem_filters=settings["stem_filters"],
        block_filters=tuple(settings["block_filters"]),
        temporal_kernel=settings["temporal_kernel"],
        spatial_kernel=settings["spatial_kernel"])


def _train_config(settings: dict, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        learning_rate=settings["learning_rate"], weight_decay=settings["weight_decay"],
        loss_weights=LossWeights(*settings["loss_weights"]),
        batch_size=settings["batch_size"], max_epochs=settings["max_epochs"],
        patience=settings["patience"], min_delta=settings["min_delta"],
        seed=settings["seed"], steps_per_epoch=settings["steps_per_epoch"])
    return replace(cfg, **overrides) if overrides else cfg


def _manifest_settings(settings: dict, **extra) -> dict:
    out = {k: (",".join(str(v) for v in val) if isinstance(val, tuple) else val)
           for k, val in settings.items()}
    out.update(extra)
    return out


def _load_scene(args, taxonomy: Taxonomy, settings: dict):
    cube = read_cube(args.cube)
    labels = read_labels(args.labels)
    gt = read_labels(args.gt) if getattr(args, "gt", None) else None
    data = SceneData.prepare(
        cube, labels, taxonomy, gt_labels=gt,
        patch_size=settings["patch_size"],
        train_fraction=settings["train_fraction"], seed=settings["seed"],
        val_pixels_per_class=settings["val_pixels_per_class"])
    return cube, data


# --- subcommand implementations --------------------------------------------------

def _cmd_synth(args) -> int:
    taxonomy = load_taxonomy(args.hierarchy)
    if args.scene_config:
        spec = load_scene_config(args.scene_config)
    else:
        names = taxonomy.names("micro")
        if set(names) <= set(AMAZON_PRIORS):
            raw = np.array([AMAZON_PRIORS[n] for n in names])
            priors = dict(zip(names, raw / raw.sum()))
        else:
            priors = {n: 1.0 / len(names) for n in names}
        spec = default_scene_spec(taxonomy, priors, height=args.height,
                                  width=args.width, noise_sigma=args.noise_sigma)
    cube, labels = synthesize_scene(spec, args.seed)
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    write_cube(cube, os.path.join(args.out, "cube.tsrc"))
    outputs["cube"] = os.path.join(args.out, "cube.tsrc")
    write_labels(labels, os.path.join(args.out, "labels.tslb"))
    outputs["labels"] = os.path.join(args.out, "labels.tslb")
    if args.gt_per_class > 0:
        gt = sample_sparse_labels(labels, args.gt_per_class, args.seed + 1)
        write_labels(gt, os.path.join(args.out, "gt.tslb"))
        outputs["gt"] = os.path.join(args.out, "gt.tslb")
    save_scene_config(spec, os.path.join(args.out, "scene.cfg"))
    outputs["scene_config"] = os.path.join(args.out, "scene.cfg")
    _write_manifest(args.out, "synth",
                    {"seed": args.seed, "gt_per_class": args.gt_per_class},
                    {"hierarchy": args.hierarchy}, outputs)
    print(f"wrote scene ({spec.height}x{spec.width}, {len(spec.classes)} classes) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    settings = _resolve_settings(args)
    taxonomy = load_taxonomy(args.hierarchy)
    cube, data = _load_scene(args, taxonomy, settings)
    net = build_network(_model_config(settings, cube), taxonomy, seed=settings["seed"])
    net, history = train(net, data, _train_config(settings))
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.htnw")
    save_network(net, ckpt)
    hist = os.path.join(args.out, "history.csv")
    with open(hist, "w", encoding="utf-8") as fh:
        fh.write(history.to_csv())
    inputs = {"cube": args.cube, "labels": args.labels, "hierarchy": args.hierarchy}
    if getattr(args, "gt", None):
        inputs["gt"] = args.gt
    _write_manifest(args.out, "train",
                    _manifest_settings(settings, taxonomy_sha256=taxonomy.digest(),
                                       best_epoch=history.best_epoch),
                    inputs, {"model": ckpt, "history": hist})
    best = history.epochs[history.best_epoch - 1]
    print(f"trained {len(history.epochs)} epochs; best epoch {history.best_epoch} "
          f"(val loss {best.val_loss:.4f}, val accuracy {best.val_accuracy:.4f})")
    return 0


def _cmd_finetune(args) -> int:
    settings = _resolve_settings(args)
    old_tax = load_taxonomy(args.pretrained_hierarchy)
    new_tax = load_taxonomy(args.hierarchy)
    pretrained = load_network(args.pretrained, taxonomy=old_tax)
    cube, data = _load_scene(args, new_tax, settings)
    if (cube.shape[0] != pretrained.config.timesteps
            or cube.shape[1] != pretrained.config.channels):
        raise ConfigError(
            f"cube has T={cube.shape[0]}, C={cube.shape[1]}; the checkpoint "
            f"expects T={pretrained.config.timesteps}, C={pretrained.config.channels}")
    net, history = finetune(pretrained, new_tax, data, _train_config(settings),
                            warmup_iters=settings["warmup_iters"],
                            penalties=args.penalties)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.htnw")
    save_network(net, ckpt)
    hist = os.path.join(args.out, "history.csv")
    with open(hist, "w", encoding="utf-8") as fh:
        fh.write(history.to_csv())
    _write_manifest(args.out, "finetune",
                    _manifest_settings(settings, penalties=args.penalties,
                                       taxonomy_sha256=new_tax.digest(),
                                       warmup_losses=",".join(
                                           f"{v:.6f}" for v in history.warmup_losses)),
                    {"cube": args.cube, "labels": args.labels,
                     "hierarchy": args.hierarchy,
                     "pretrained": args.pretrained,
                     "pretrained_hierarchy": args.pretrained_hierarchy,
                     **({"gt": args.gt} if args.gt else {})},
                    {"model": ckpt, "history": hist})
    best = history.epochs[history.best_epoch - 1]
    print(f"fine-tuned; best epoch {history.best_epoch} "
          f"(val loss {best.val_loss:.4f}, val accuracy {best.val_accuracy:.4f})")
    return 0


def _cmd_hpo(args) -> int:
    settings = _resolve_settings(args)
    taxonomy = load_taxonomy(args.hierarchy)
    cube, data = _load_scene(args, taxonomy, settings)
    model_cfg = _model_config(settings, cube)
    space = SearchSpace({
        "learning_rate": log_uniform(1e-5, 1e-3),
        "weight_decay": log_uniform(1e-6, 1e-2),
        "hierarchy_weight": uniform(1.0, 3.0),
    })

    def objective(params: dict) -> float:
        w = params["hierarchy_weight"]
        cfg = _train_config(
            settings,
            learning_rate=params["learning_rate"],
            weight_decay=params["weight_decay"],
            loss_weights=LossWeights(w, w, 1.0, w, w, w),
            max_epochs=args.epochs_per_trial, patience=args.epochs_per_trial)
        net = build_network(model_cfg, taxonomy, seed=settings["seed"])
        net, _ = train(net, data, cfg)
        return -weighted_validation_loss(net, data, batch_size=settings["batch_size"])

    os.makedirs(args.out, exist_ok=True)
    log_path = args.trials_log or os.path.join(args.out, "trials.csv")
    best, trials = run_search(objective, space, budget=args.budget,
                              seed=settings["seed"], log_path=log_path)
    best_path = os.path.join(args.out, "best.cfg")
    with open(best_path, "w", encoding="utf-8") as fh:
        fh.write("[train]\n")
        fh.write(f"learning_rate = {best.params['learning_rate']!r}\n")
        fh.write(f"weight_decay = {best.params['weight_decay']!r}\n")
        w = best.params["hierarchy_weight"]
        fh.write(f"loss_weights = {w!r},{w!r},1.0,{w!r},{w!r},{w!r}\n")
    _write_manifest(args.out, "hpo",
                    _manifest_settings(settings, budget=args.budget,
                                       epochs_per_trial=args.epochs_per_trial,
                                       best_trial=best.number,
                                       best_objective=best.objective),
                    {"cube": args.cube, "labels": args.labels,
                     "hierarchy": args.hierarchy,
                     **({"gt": args.gt} if args.gt else {})},
                    {"trials": log_path, "best_settings": best_path})
    print(f"best trial {best.number}: objective {best.objective:.4f}, "
          f"params {best.params}")
    return 0


def _cmd_predict(args) -> int:
    taxonomy = load_taxonomy(args.hierarchy) if args.hierarchy else None
    net = load_network(args.checkpoint, taxonomy=taxonomy)
    cube = read_cube(args.cube)
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    if args.emit_probs:
        maps, probs = predict_map(net, cube, batch_size=args.batch_size,
                                  emit_probs=True)
        for level, p in probs.items():
            path = os.path.join(args.out, f"probs_{level}.tsrc")
            write_cube(p[None], path)  # stored as a 1-timestep cube
            outputs[f"probs_{level}"] = path
    else:
        maps = predict_map(net, cube, batch_size=args.batch_size)
    for level, m in maps.items():
        path = os.path.join(args.out, f"map_{level}.tslb")
        write_labels(m, path)
        outputs[f"map_{level}"] = path
    inputs = {"checkpoint": args.checkpoint, "cube": args.cube}
    if args.hierarchy:
        inputs["hierarchy"] = args.hierarchy
    _write_manifest(args.out, "predict",
                    {"batch_size": args.batch_size, "emit_probs": args.emit_probs},
                    inputs, outputs)
    print(f"wrote {', '.join(sorted(outputs))} to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    taxonomy = load_taxonomy(args.hierarchy)
    pred = read_labels(args.pred)
    ref = read_labels(args.ref)
    head_preds = {}
    if args.pred_intermediate:
        head_preds["intermediate"] = read_labels(args.pred_intermediate)
    if args.pred_macro:
        head_preds["macro"] = read_labels(args.pred_macro)
    report = hierarchical_report(pred, ref, taxonomy, mode=args.mode,
                                 head_predictions=head_preds or None)
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    for level in LEVELS:
        _, scores = report[level]
        path = os.path.join(args.out, f"report_{level}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(scores_to_csv(scores))
        outputs[f"report_{level}"] = path
        print(format_scores(scores, title=f"[{level}] ({args.mode})"))
        print()
    inputs = {"pred": args.pred, "ref": args.ref, "hierarchy": args.hierarchy}
    if args.pred_intermediate:
        inputs["pred_intermediate"] = args.pred_intermediate
    if args.pred_macro:
        inputs["pred_macro"] = args.pred_macro
    _write_manifest(args.out, "evaluate", {"mode": args.mode}, inputs, outputs)
    return 0


# --- parser and dispatch ----------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="hcrnet",
                     description="Hierarchical temporal land-cover classification.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap; 1 (default) is bit-reproducible")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a seeded synthetic scene")
    p.add_argument("--hierarchy", default=bundled_taxonomy_path())
    p.add_argument("--scene-config", help="scene config file; omit for the default scene")
    p.add_argument("--height", type=int, default=300)
    p.add_argument("--width", type=int, default=300)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--gt-per-class", type=int, default=30,
                   help="sparse ground-truth pixels per class (0 disables gt.tslb)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a network on a scene")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--gt", help="sparse validation labels; omitted: carved from --labels")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new scene")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--pretrained-hierarchy", required=True)
    p.add_argument("--hierarchy", required=True, help="taxonomy of the new scene")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--gt", help="sparse validation labels")
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--penalties", action="store_true",
                   help="enable micro-to-coarse penalties during fine-tuning")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("hpo", help="search learning rate, weight decay, and "
                                   "hierarchy weight")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--gt")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--budget", type=int, default=25)
    p.add_argument("--epochs-per-trial", type=int, default=5)
    p.add_argument("--trials-log", help="trials CSV (default <out>/trials.csv); "
                                        "an existing log resumes the search")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_hpo)

    p = sub.add_parser("predict", help="classify a scene with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--hierarchy", help="optional, verified against the checkpoint")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--emit-probs", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score a predicted map against reference labels")
    p.add_argument("--pred", required=True, help="predicted micro map")
    p.add_argument("--ref", required=True, help="reference micro labels")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--mode", choices=("aggregated", "heads"), default="aggregated")
    p.add_argument("--pred-intermediate", help="intermediate head map (heads mode)")
    p.add_argument("--pred-macro", help="macro head map (heads mode)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError(f"--threads must be positive, got {args.threads}")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except HcrError as exc:  # any future library error defaults to a data problem
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
