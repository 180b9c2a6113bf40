"""Command line interface: explain, groups, evaluate, make-shapes, train-tiny.

Exit codes: 0 success, 2 user/input error, 3 numeric/model error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .backend import load_model, save_checkpoint
from .cam import SaliencyMap, fd_cam, fd_cam_traced, grad_cam
from .data import load_dataset, load_image
from .errors import ConfigError, FDCamError, InputError, NumericError
from .grouping import all_groups, similarity_matrix
from .metrics import evaluate_faithfulness, pointing_tally, uniform_random_method
from .render import plot_curves, save_contact_sheet, save_overlay_png, save_saliency_png
from .shapes import ShapesDatasetSpec, train_tiny, write_shapes_dataset
from .weighting import SCHEMES, CombineConfig, grad_weights

METHODS = ("fd-cam", "grad-cam", "ablation-reduced", "random")
EXIT_USER, EXIT_NUMERIC = 2, 3


@dataclass
class RunConfig:
    model: str = "tiny:0"
    layer: str = "conv2"
    score_mode: str = "probability"
    method: str = "fd-cam"
    theta: float = 5.0
    bias: float = 0.5
    scheme: str = "exp_bias"
    use_grouping: bool = True
    use_switch_on: bool = True
    step: float = 0.036
    out: str = "out"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.score_mode not in ("probability", "logit"):
            raise ConfigError(f"unknown score mode {self.score_mode!r}")
        if not 0 < self.theta <= 100:
            raise ConfigError(f"theta must be in (0, 100], got {self.theta}")
        if not 0 < self.step < 1:
            raise ConfigError(f"step must be in (0, 1), got {self.step}")
        if not np.isfinite(self.bias):
            raise ConfigError("bias must be finite")
        return self

    def combine_config(self) -> CombineConfig:
        if self.method == "ablation-reduced":
            return CombineConfig.ablation()
        return CombineConfig(self.scheme, self.bias, self.theta, self.use_switch_on, self.use_grouping)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    defaults = asdict(RunConfig())
    for key, value in values.items():
        kind = type(defaults[key])
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(f"config key {key!r} must be {kind.__name__}, got {value!r}")
        values[key] = value
    return RunConfig(**values).validate()


def run_meta(config: RunConfig, model) -> dict:
    return {
        "config": asdict(config),
        "model_hash": model.parameter_hash(),
        "score_mode": model.score_mode,
        "target_layer": model.target_layer,
        "fdcam_version": __version__,
    }


def saliency_method(config: RunConfig):
    """``(model, image, class_index) -> SaliencyMap`` for the configured method."""
    if config.method == "grad-cam":
        return grad_cam
    if config.method == "random":
        return uniform_random_method(config.seed)
    combine = config.combine_config()
    return lambda model, image, c: fd_cam(model, image, c, combine)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _floats(a) -> list:
    return [float(x) for x in np.ravel(a)]


def explain_image(config: RunConfig, model, image: np.ndarray,
                  class_index: int) -> tuple[SaliencyMap, Optional[dict]]:
    if config.method in ("fd-cam", "ablation-reduced"):
        smap, trace = fd_cam_traced(model, image, class_index, config.combine_config())
        return smap, trace.to_dict()
    if config.method == "grad-cam":
        acts, grads = model.gradient_pass(image, class_index)
        smap = grad_cam(model, image, class_index)
        return smap, {"alpha": _floats(grad_weights(grads).values)}
    return uniform_random_method(config.seed)(model, image, class_index), None


def cmd_explain(config: RunConfig, image_path, class_index: Optional[int] = None) -> dict:
    model = load_model(config.model, config.layer, config.score_mode)
    image = load_image(image_path, model.input_size)
    scores = model.forward_scores(image)
    if class_index is None:
        class_index = int(np.argmax(scores))
    if not 0 <= class_index < model.num_classes:
        raise InputError(f"class {class_index} out of range [0, {model.num_classes})")
    smap, weights = explain_image(config, model, image, class_index)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{Path(image_path).stem}_{config.method}_c{class_index}"
    meta = run_meta(config, model)
    files = {
        "saliency_png": out / f"{prefix}_saliency.png",
        "overlay_png": out / f"{prefix}_overlay.png",
        "sidecar": out / f"{prefix}.json",
    }
    png_meta = {**meta, "method": smap.method, "class_index": class_index}
    save_saliency_png(smap.values, files["saliency_png"], png_meta)
    save_overlay_png(image, smap.values, files["overlay_png"], png_meta)
    sidecar = {
        **meta,
        "image": str(image_path),
        "class_index": class_index,
        "class_scores": _floats(scores),
        "method": smap.method,
        "saliency": {
            **smap.meta,
            "shape": list(smap.values.shape),
            "sha256": hashlib.sha256(np.ascontiguousarray(smap.values).tobytes()).hexdigest(),
            "png": files["saliency_png"].name,
            "overlay": files["overlay_png"].name,
            "argmax_xy": [int(i) for i in np.unravel_index(np.argmax(smap.values), smap.values.shape)[::-1]],
        },
        "weights": weights,
    }
    _dump(sidecar, files["sidecar"])
    return {k: str(v) for k, v in files.items()}


def cmd_groups(config: RunConfig, image_path, channels: list[int]) -> dict:
    model = load_model(config.model, config.layer, config.score_mode)
    image = load_image(image_path, model.input_size)
    acts = model.capture_activations(image)
    matrix = similarity_matrix(acts)
    groups = all_groups(matrix, config.theta)
    k = acts.num_channels
    for ch in channels:
        if not 0 <= ch < k:
            raise InputError(f"channel {ch} out of range [0, {k})")

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    meta = run_meta(config, model)
    sheets = {}
    for ch in channels:
        # anchor first, then by descending similarity
        members = sorted(groups[ch], key=lambda m: (m != ch, -matrix[ch, m], m))
        sheet = out / f"{stem}_group_ch{ch}.png"
        save_contact_sheet([acts.data[m] for m in members], sheet, {**meta, "channel": ch, "members": members})
        sheets[str(ch)] = {
            "members": members,
            "similarities": [float(matrix[ch, m]) for m in members],
            "sheet": sheet.name,
        }
    doc = {**meta, "image": str(image_path), "K": k, "theta": float(config.theta),
           "groups": [list(g) for g in groups], "channels": sheets}
    path = out / f"{stem}_groups.json"
    _dump(doc, path)
    return {"groups_json": str(path), **{f"sheet_{c}": str(out / s["sheet"]) for c, s in sheets.items()}}


def cmd_evaluate(config: RunConfig, dataset_path, metric: str, split: Optional[str] = None,
                 limit: Optional[int] = None, plots: bool = True, method=None) -> dict:
    """Run a metric over a dataset and write JSON + CSV reports.

    ``method`` overrides the configured saliency method with any
    ``(model, image, class_index)`` callable.
    """
    if metric not in ("faithfulness", "pointing"):
        raise ConfigError(f"unknown metric {metric!r}")
    model = load_model(config.model, config.layer, config.score_mode)
    dataset = load_dataset(dataset_path, model.input_size, split, limit)
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    method = method or saliency_method(config)
    meta = run_meta(config, model)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    base = out / f"{metric}_{config.method}"

    if metric == "faithfulness":
        report = evaluate_faithfulness(dataset, method, model, config.step)
        doc = {**meta, "metric": metric, "dataset": str(dataset_path), "split": split, **report.to_dict()}
        rows = [{"name": r["name"], "class_index": r["class_index"],
                 "insertion_auc": r["insertion_auc"], "deletion_auc": r["deletion_auc"],
                 "overall": r["insertion_auc"] - r["deletion_auc"]} for r in report.images]
        rows.append({"name": "MEAN", "class_index": "", "insertion_auc": report.mean_insertion,
                     "deletion_auc": report.mean_deletion, "overall": report.overall})
        if plots:
            curves = out / f"curves_{config.method}"
            curves.mkdir(exist_ok=True)
            for r in report.images:
                plot_curves(r["deletion"], r["insertion"], curves / f"{r['name']}.png",
                            f"{r['name']} ({config.method}, class {r['class_index']})", meta)
    else:
        tally = pointing_tally(dataset, method, model)
        doc = {**meta, "metric": metric, "dataset": str(dataset_path), "split": split,
               "hits": tally.hits, "misses": tally.misses, "accuracy": tally.accuracy,
               "trials": tally.trials}
        rows = [dict(t) for t in tally.trials]
        rows.append({"name": "ACCURACY", "label": "", "hit": tally.accuracy})

    _dump(doc, base.with_suffix(".json"))
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        fh.write(f"# run: {json.dumps(meta, sort_keys=True)}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return doc


def cmd_make_shapes(spec: ShapesDatasetSpec, out_dir) -> Path:
    return write_shapes_dataset(spec, out_dir)


def cmd_train_tiny(out_dir, seed: int = 0, data_dir=None, spec: Optional[ShapesDatasetSpec] = None,
                   epochs: int = 40, min_accuracy: float = 0.95) -> dict:
    """Train the tiny CNN, write ``tiny.pt`` and ``train_metrics.json``.

    Raises :class:`NumericError` when validation accuracy misses ``min_accuracy``
    (the checkpoint and metrics are still written for inspection).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data_dir is None:
        data_dir = write_shapes_dataset(spec or ShapesDatasetSpec(samples_per_class=100, seed=seed),
                                        out / "shapes")
    model, metrics = train_tiny(data_dir, seed=seed, epochs=epochs)
    metrics.update({"data": str(data_dir), "min_accuracy": min_accuracy,
                    "passed": metrics["val_accuracy"] >= min_accuracy})
    save_checkpoint(model, out / "tiny.pt")
    _dump(metrics, out / "train_metrics.json")
    if not metrics["passed"]:
        raise NumericError(f"val accuracy {metrics['val_accuracy']:.4f} below gate {min_accuracy}")
    return metrics


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON file with run settings")
    p.add_argument("--model", help='"tiny:<seed>" or a checkpoint path')
    p.add_argument("--layer", help="target layer id")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--theta", type=float, help="group size as a percentage of channels")
    p.add_argument("--bias", type=float, help="bias subtracted in the exp_bias scheme")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--score-mode", dest="score_mode", choices=("probability", "logit"))
    p.add_argument("--step", type=float, help="perturbation step as a fraction of the image")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-grouping", dest="use_grouping", action="store_const", const=False)
    p.add_argument("--no-switch-on", dest="use_switch_on", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdcam", description="FD-CAM explanations and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="write a saliency map, overlay and JSON sidecar")
    p.add_argument("image")
    p.add_argument("--class", dest="class_index", type=int)
    _add_run_flags(p)

    p = sub.add_parser("groups", help="render channel similarity groups")
    p.add_argument("image")
    p.add_argument("--channels", type=int, nargs="+", required=True)
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="faithfulness or pointing-game evaluation")
    p.add_argument("dataset")
    p.add_argument("--metric", choices=("faithfulness", "pointing"), required=True)
    p.add_argument("--split")
    p.add_argument("--limit", type=int)
    p.add_argument("--no-plots", dest="plots", action="store_false")
    _add_run_flags(p)

    p = sub.add_parser("make-shapes", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-tiny", help="train the tiny CNN on the shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="existing shapes dataset (generated when omitted)")
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--min-accuracy", type=float, default=0.95)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-shapes":
            spec = ShapesDatasetSpec(args.image_size, args.samples_per_class, args.seed)
            print(cmd_make_shapes(spec, args.out))
        elif args.command == "train-tiny":
            spec = ShapesDatasetSpec(samples_per_class=args.samples_per_class, seed=args.seed)
            metrics = cmd_train_tiny(args.out, args.seed, args.data, spec, args.epochs, args.min_accuracy)
            print(json.dumps({k: metrics[k] for k in ("val_accuracy", "parameter_hash")}))
        else:
            config = resolve_config(args)
            if args.command == "explain":
                result = cmd_explain(config, args.image, args.class_index)
            elif args.command == "groups":
                result = cmd_groups(config, args.image, args.channels)
            else:
                doc = cmd_evaluate(config, args.dataset, args.metric, args.split, args.limit, args.plots)
                keys = ("mean_insertion_auc", "mean_deletion_auc", "overall", "accuracy")
                result = {k: doc[k] for k in keys if k in doc}
            print(json.dumps(result, indent=1))
    except (InputError, ConfigError, FileNotFoundError) as exc:
        print(f"fdcam: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericError, FDCamError) as exc:
        print(f"fdcam: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
