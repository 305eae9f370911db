"""Command-line entry point: ``petnet [--config PATH] [--seed N] [--out DIR] COMMAND``.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numeric
failure, 5 gradcheck failure.
"""
import argparse
import csv
import io
import os
import sys

import numpy as np

from . import gradcheck, plotting
from .config import RunConfig, parse_config
from .data import (
    SplitSpec, generate_phantoms, kfold, make_dataset, read_manifest, split,
    split_indices, write_manifest,
)
from .errors import ConfigError, FormatError, PetnetError, ShapeError
from .modelio import load_model, save_model
from .network import build_toy_cnn, build_unet
from .pgm import encode_pgm, read_pgm, write_pgm
from .training import TrainConfig, evaluate, metrics_from_outputs, predict, threshold, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, newline="" if mode == "w" else None) as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_config(args) -> RunConfig:
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    config = parse_config(text)
    if args.seed is not None:
        for section in ("dataset", "model", "training"):
            config.set(section, "seed", args.seed)
    if args.out is not None:
        config.set("paths", "out_dir", args.out)
    print("# effective config")
    print(config.to_text(), end="")
    return config


def _out(config, *parts):
    os.makedirs(config.paths.out_dir, exist_ok=True)
    return os.path.join(config.paths.out_dir, *parts)


def _model_path(config):
    path = config.paths.model
    return path if os.path.isabs(path) else _out(config, path)


def _samples(config):
    d = config.dataset
    if config.paths.manifest:
        return read_manifest(config.paths.manifest, d.pgm_scale)
    return generate_phantoms(d.count, d.height, d.width, d.seed, d.lesion_probability,
                             d.noise_level, d.contrast, d.grades, d.balanced)


def _dataset(config):
    m = config.model
    return make_dataset(_samples(config), config.dataset.task, m.head, m.classes)


def _split_spec(config):
    d = config.dataset
    return SplitSpec(d.train_fraction, d.val_fraction, d.test_fraction, d.seed)


def build_model(config, height=None, width=None):
    m, d = config.model, config.dataset
    height, width = height or d.height, width or d.width
    if m.architecture == "toy_cnn":
        return build_toy_cnn(height, width, m.filters, m.fc_width, m.head, m.classes, seed=m.seed)
    return build_unet(height, width, m.base_channels, m.depth, m.head, m.use_bn, m.upsample,
                      m.allow_bn_synthesis, seed=m.seed)


def _train_config(config):
    t = config.training
    return TrainConfig(t.learning_rate, t.batch_size, t.max_epochs, t.patience, t.seed, t.loss_kind, t.shuffle)


def check_task(model, task):
    """Reject dataset tasks the model head cannot produce."""
    spatial = len(model.shapes[-1]) == 4
    allowed = {
        ("sigmoid", True): ("segmentation",),
        ("sigmoid", False): ("classification",),
        ("softmax", False): ("classification",),
        ("linear", True): ("synthesis",),
        ("linear", False): ("regression",),
    }.get((model.head, spatial), ())
    if task not in allowed:
        raise ConfigError(f"a {model.head} head with output {model.shapes[-1][1:]} cannot serve task {task!r}")
    return "synthesis" if model.head == "linear" else task


# --------------------------------------------------------------------------
# commands


def cmd_generate(config):
    d = config.dataset
    samples = _samples(config) if not config.paths.manifest else None
    if samples is None:
        raise ConfigError("generate writes a new dataset; unset paths.manifest")
    peak = max(float(max(s.image.max(), s.clean.max())) for s in samples)
    if peak > d.pgm_scale:
        raise ConfigError(f"dataset.pgm_scale {d.pgm_scale} is below the image maximum {peak:.4g}")
    folder = _out(config, "data")
    os.makedirs(folder, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        names = [f"{i:04d}_{kind}.pgm" for kind in ("image", "mask", "clean")]
        write_pgm(s.image, os.path.join(folder, names[0]), d.pgm_scale)
        write_pgm(s.mask, os.path.join(folder, names[1]), 1.0)
        write_pgm(s.clean, os.path.join(folder, names[2]), d.pgm_scale)
        rows.append([i, f"data/{names[0]}", f"data/{names[1]}", s.class_label, f"data/{names[2]}"])
    manifest = _out(config, "manifest.csv")
    write_manifest(manifest + ".tmp", rows)
    os.replace(manifest + ".tmp", manifest)
    print(f"wrote {len(rows)} samples to {manifest}")
    return EXIT_OK


def cmd_train(config):
    data = _dataset(config)
    train_set, val_set, _ = split(data, _split_spec(config))
    if len(val_set) == 0:
        # memorisation runs: with no validation split, select on the training set
        print("note: validation split is empty; early stopping monitors the training set")
        val_set = train_set
    model = build_model(config)
    task = check_task(model, config.dataset.task)
    best, report = train(model, train_set, val_set, _train_config(config), log=print)
    save_model(best, _model_path(config))
    _atomic_write(_out(config, "report.csv"), report.to_csv())
    plotting.plot_loss_curves(report, _out(config, "loss_curve.png"))
    metrics = evaluate(best, train_set, task)
    print(f"final validation loss: {report.val_loss[-1]:.17g}")
    print(f"best validation loss: {report.best_validation_loss:.17g}")
    print(f"stopped epoch: {report.stopped_epoch}  best epoch: {report.best_epoch}")
    for key, value in metrics.items():
        print(f"train {key}: {value:.6g}")
    return EXIT_OK


def _metrics_csv(rows):
    keys = [k for k in rows[0] if k != "fold"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold"] + keys)
    for row in rows:
        writer.writerow([row["fold"]] + [f"{row[k]:.17g}" for k in keys])
    return buf.getvalue()


def _dump_predictions(folder, outputs, head):
    os.makedirs(folder, exist_ok=True)
    for i, out in enumerate(outputs):
        if head == "sigmoid" and out.ndim == 3:
            write_pgm(out, os.path.join(folder, f"{i:04d}_prob.pgm"), 1.0)
            write_pgm(threshold(out), os.path.join(folder, f"{i:04d}_mask.pgm"), 1.0)


def cmd_evaluate(config, model_path=None, which="test", dump=False):
    data = _dataset(config)
    if which == "all-folds":
        return _evaluate_folds(config, data)
    model = load_model(model_path or _model_path(config))
    task = check_task(model, config.dataset.task)
    train_set, val_set, test_set = split(data, _split_spec(config))
    subset = test_set if which == "test" else val_set
    if len(subset) == 0:
        raise ConfigError(f"the {which} split is empty")
    outputs = predict(model, subset.inputs)
    metrics = metrics_from_outputs(task, model.head, outputs, subset.targets)
    rows = [{"fold": which, **metrics}]
    _atomic_write(_out(config, "metrics.csv"), _metrics_csv(rows))
    if dump:
        _dump_predictions(_out(config, "predictions"), outputs, model.head)
    if subset.inputs.ndim == 4 and outputs.ndim == 4:
        plotting.plot_predictions(subset.inputs, subset.targets, outputs, _out(config, "predictions.png"))
    for key, value in metrics.items():
        print(f"{which} {key}: {value:.6g}")
    return EXIT_OK


def _evaluate_folds(config, data):
    k = config.training.folds
    plan = kfold(len(data), k, config.dataset.seed)
    d = config.dataset
    inner_val = d.val_fraction / (d.train_fraction + d.val_fraction) if d.val_fraction else 0.2
    rows = []
    for i in range(k):
        pool = plan.train_indices(i)
        tr, va, _ = split_indices(len(pool), SplitSpec(1 - inner_val, inner_val, 0.0, d.seed))
        model = build_model(config)
        task = check_task(model, d.task)
        best, _ = train(model, data.subset(pool[tr]), data.subset(pool[va]), _train_config(config))
        metrics = evaluate(best, data.subset(plan.test_indices(i)), task)
        rows.append({"fold": i, **metrics})
        print(f"fold {i}: " + " ".join(f"{k_}={v:.6g}" for k_, v in metrics.items()))
    mean = {key: float(np.mean([r[key] for r in rows])) for key in rows[0] if key != "fold"}
    rows.append({"fold": "mean", **mean})
    _atomic_write(_out(config, "metrics.csv"), _metrics_csv(rows))
    plotting.plot_fold_metrics(rows, next(iter(mean)), _out(config, "fold_metrics.png"))
    print("mean: " + " ".join(f"{k_}={v:.6g}" for k_, v in mean.items()))
    return EXIT_OK


def cmd_predict(model_path, input_path, output_path, scale=1.0):
    model = load_model(model_path)
    image = read_pgm(input_path) * scale
    if image.shape != model.input_shape:
        raise ShapeError(f"input image {image.shape} does not match model input {model.input_shape}")
    out = predict(model, image[None])[0]
    if model.head == "sigmoid" and out.ndim == 3:
        base, ext = os.path.splitext(output_path)
        _atomic_write(output_path, encode_pgm(threshold(out), 1.0))
        _atomic_write(f"{base}_prob{ext or '.pgm'}", encode_pgm(out, 1.0))
    elif model.head == "linear" and out.ndim == 3:
        _atomic_write(output_path, encode_pgm(np.clip(out, 0.0, scale), scale))
    else:
        lines = [f"{k},{p:.17g}" for k, p in enumerate(out)]
        _atomic_write(output_path, "class,probability\n" + "\n".join(lines) + "\n")
    print(f"wrote {output_path}")
    return EXIT_OK


def cmd_gradcheck(registry=None, end_to_end=None):
    reports, missing = gradcheck.run_all(registry, end_to_end)
    print(gradcheck.format_table(reports, missing))
    ok = not missing and all(r.passed for r in reports)
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_GRADCHECK


# --------------------------------------------------------------------------


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    parser = argparse.ArgumentParser(prog="petnet", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a phantom dataset as PGMs plus manifest")
    sub.add_parser("train", parents=[common], help="train a model; writes model, report.csv, loss_curve.png")
    ev = sub.add_parser("evaluate", parents=[common], help="score a model; writes metrics.csv")
    ev.add_argument("--model", help="model file (default: paths.model under the output dir)")
    ev.add_argument("--split", choices=("test", "validation", "all-folds"), default="test")
    ev.add_argument("--dump-predictions", action="store_true", help="write predicted masks as PGMs")
    pr = sub.add_parser("predict", parents=[common], help="run a model on one PGM image")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output", required=True)
    pr.add_argument("--scale", type=float, default=None, help="intensity scale of the PGM (default: dataset.pgm_scale)")
    sub.add_parser("gradcheck", parents=[common], help="run the gradient check suite")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        config = load_config(args)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.model, args.split, args.dump_predictions)
        scale = args.scale if args.scale is not None else config.dataset.pgm_scale
        return cmd_predict(args.model, args.input, args.output, scale)
    except PetnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
