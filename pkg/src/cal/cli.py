"""Command-line interface: gen | train | eval | visualize | ablate.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

Every command accepts ``--config FILE`` holding ``key = value`` lines whose
keys are flag names (``lambda-effect`` or ``lambda_effect``); flags given on
the command line override the file. Each run writes its resolved
configuration to ``config.txt`` next to its outputs.

Only ``train`` and ``ablate`` import the counterfactual code; the other
commands never load it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import synthdata
from .checkpoint import load_checkpoint, save_checkpoint
from .model import AttentionModel
from .synthdata import DatasetSpec
from .tensor.serialize import FormatError

logger = logging.getLogger("cal")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

# kept here rather than imported so that parsing never loads the training code
OBJECTIVES = ("baseline", "cal", "dropout", "entropy", "l2norm")
STRATEGIES = ("random", "uniform", "reversed", "shuffle")
ABLATION_AXES = ("strategy", "M", "objective")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=None)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--rho", type=float, default=0.0, help="background bias strength in [0, 1]")
    p.add_argument("--identities", type=int, default=0, help="> 0 builds a retrieval split instead")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--retrieval-train-fraction", type=float, default=0.5)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--heads", type=int, default=None, help="attention heads M (default 32, or 8 in retrieval mode)")
    p.add_argument("--depth", type=int, default=2, help="backbone blocks")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay", type=float, default=0.9)
    p.add_argument("--lr-decay-every", type=int, default=2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--objective", choices=OBJECTIVES, default="baseline")
    p.add_argument("--strategy", choices=STRATEGIES, default="random")
    p.add_argument("--lambda-effect", type=float, default=1.0)
    p.add_argument("--dropout-p", type=float, default=0.2)
    p.add_argument("--entropy-weight", type=float, default=0.1)
    p.add_argument("--triplet-margin", type=float, default=0.3)
    p.add_argument("--grad-clip", type=float, default=0.0)
    p.add_argument("--calibration-size", type=int, default=256)
    p.add_argument("--threshold", type=float, default=0.5, help="mIoU threshold as a fraction of the peak")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cal", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--depth", type=int, default=2, help="backbone depth the image size must suit")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--mode", choices=("classification", "retrieval"), default="classification")
    p.add_argument("--data", required=True, help="directory written by gen")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="also write wall-clock seconds (breaks byte-identical reruns)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, help="classification split (default test)")
    p.add_argument("--mode", choices=("classification", "retrieval"), default="classification")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="directory for the metrics CSV and figures")

    p = sub.add_parser("visualize", help="export attention heatmaps as PPM")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--indices", default="0", help="comma-separated sample indices")
    p.add_argument("--heads-shown", default=None, help="comma-separated head indices (default all)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run an ablation over one axis")
    _add_common(p)
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--values", default=None, help="comma-separated values (default depends on the axis)")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true")
    return parser


# ------------------------------------------------------------------ config


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices  # type: ignore[union-attr]
    if known.config and argv and argv[0] in commands:
        _apply_config_file(commands[argv[0]], known.config)
    return parser.parse_args(argv)


def _apply_config_file(sub: argparse.ArgumentParser, path) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        if key not in actions or key in ("config", "help"):
            raise UsageError(f"unknown key {key!r} in config file {path}")
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
        if action.choices and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} is not one of {', '.join(map(str, action.choices))}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def resolved_config(args: argparse.Namespace) -> str:
    skip = {"config", "verbose"}
    lines = [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]
    return "\n".join(lines) + "\n"


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory {out} is not writable: {e}") from None
    return out


def _write_config(out: Path, args: argparse.Namespace) -> None:
    (out / "config.txt").write_text(resolved_config(args))
    print(resolved_config(args), end="")


def _dataset_spec(args: argparse.Namespace) -> DatasetSpec:
    spec = DatasetSpec(
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        test_per_class=args.test_per_class,
        image_size=args.image_size,
        bias_strength=args.rho,
        num_identities=args.identities,
        views_per_identity=args.views,
        retrieval_train_fraction=args.retrieval_train_fraction,
        backbone_depth=args.depth,
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return spec


def _load_split(data_dir, split: str):
    path = Path(data_dir) / f"{split}.cald"
    if not path.is_file():
        raise UsageError(f"dataset file {path} not found")
    try:
        return synthdata.load_dataset(path)
    except FormatError as e:
        raise UsageError(f"{path}: {e}") from None


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


# ------------------------------------------------------------------ commands


def cmd_gen(args: argparse.Namespace) -> int:
    spec = _dataset_spec(args)
    out = _prepare_out(args.out)
    _write_config(out, args)
    manifest = {"spec": spec.to_dict(), "format": "cald"}
    if spec.num_identities:
        train, query, gallery = synthdata.make_retrieval_split(spec, threads=args.threads)
        splits = {"train": train, "query": query, "gallery": gallery}
    else:
        train, test = synthdata.generate_dataset(spec, threads=args.threads)
        splits = {"train": train, "test": test}
    manifest["counts"] = {k: len(v) for k, v in splits.items()}
    for name, samples in splits.items():
        synthdata.save_dataset(samples, out / f"{name}.cald", manifest={"split": name, **manifest})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    counts = ", ".join(f"{k}={v}" for k, v in manifest["counts"].items())
    print(f"wrote {counts} samples (rho={spec.bias_strength}, seed={spec.seed}) to {out}")
    return EXIT_OK


def _check_model_data(model: AttentionModel, samples, mode: str) -> None:
    image_shape = samples[0].image.shape
    in_channels = model.params["backbone.0.weight"].shape[1]
    div = 2**model.depth
    if image_shape[0] != in_channels or image_shape[1] % div or image_shape[2] % div:
        raise UsageError(
            f"dataset images have shape {image_shape} but the checkpoint expects "
            f"({in_channels}, H, W) with H and W divisible by {div}"
        )
    if mode == "classification":
        top = max(s.class_label for s in samples)
        if top >= model.num_classes:
            raise UsageError(
                f"dataset labels reach {top} but the checkpoint classifier has shape "
                f"{model.params['classifier.weight'].shape} ({model.num_classes} classes)"
            )


def cmd_train(args: argparse.Namespace) -> int:
    from .plotting import plot_training_curves
    from .train import TrainConfig, TrainingDiverged, train

    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        objective=args.objective,
        strategy=args.strategy,
        lambda_effect=args.lambda_effect,
        dropout_p=args.dropout_p,
        entropy_weight=args.entropy_weight,
        triplet_margin=args.triplet_margin,
        grad_clip=args.grad_clip,
        calibration_size=args.calibration_size,
        mode=args.mode,
        seed=args.seed,
    )
    try:
        config.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    if args.mode == "retrieval":
        train_set = _load_split(args.data, "train")
        query, gallery = _load_split(args.data, "query"), _load_split(args.data, "gallery")
        eval_set = None
        if any(s.identity_label is None for s in train_set):
            raise UsageError("retrieval mode needs a dataset with identity labels")
        num_classes = len({s.identity_label for s in train_set})
    else:
        train_set = _load_split(args.data, "train")
        eval_set = _load_split(args.data, "test")
        query = gallery = None
        num_classes = max(s.class_label for s in train_set + eval_set) + 1 if train_set else 0
    if not train_set:
        raise UsageError("training split is empty")
    out = _prepare_out(args.out)
    _write_config(out, args)
    try:
        heads = args.heads if args.heads is not None else (8 if args.mode == "retrieval" else 32)
        model = AttentionModel.create(num_classes, num_heads=heads, depth=args.depth, seed=args.seed)
        _check_model_data(model, train_set, "retrieval" if args.mode == "retrieval" else "classification")
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        model, report = train(model, train_set, config, eval_set, query, gallery, args.threshold)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(model, out / "checkpoint.calm", extra={"objective": config.objective, "mode": config.mode})
    rows = [
        [i + 1, f"{lr:.8f}", f"{loss:.8f}", f"{acc:.6f}"]
        for i, (lr, loss, acc) in enumerate(zip(report.epoch_lr, report.epoch_losses, report.epoch_train_accuracy))
    ]
    _write_rows(out / "metrics.csv", ["epoch", "lr", "loss", "train_accuracy"], rows)
    summary = report.summary()
    if args.timing:
        summary["wall_clock_seconds"] = report.wall_clock_seconds
    _write_rows(out / "summary.csv", list(summary), [[_fmt(v) for v in summary.values()]])
    plot_training_curves(report.epoch_losses, report.epoch_train_accuracy, out / "loss_curve.png")
    if report.cmc:
        from .plotting import plot_cmc

        plot_cmc(report.cmc, out / "cmc.png")
    print("summary: " + ", ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import evaluate_attention, evaluate_classification, evaluate_retrieval

    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    model = _load_model(args.checkpoint)
    out = _prepare_out(args.out) if args.out else None
    if args.mode == "retrieval":
        query, gallery = _load_split(args.data, "query"), _load_split(args.data, "gallery")
        if not query or not gallery or any(s.identity_label is None for s in query + gallery):
            raise UsageError("--mode retrieval needs a dataset with identity labels (query and gallery splits)")
        _check_model_data(model, query, "retrieval")
        cmc, m_ap = evaluate_retrieval(model, query, gallery)
        summary = {"map": m_ap, **{f"cmc@{k}": cmc[k - 1] for k in (1, 5, 10) if len(cmc) >= k}}
        if out:
            _write_rows(out / "cmc.csv", ["rank", "rate"], [[k + 1, f"{c:.6f}"] for k, c in enumerate(cmc)])
            from .plotting import plot_cmc

            plot_cmc(cmc, out / "cmc.png")
    else:
        split = args.split or "test"
        samples = _load_split(args.data, split)
        if not samples:
            raise UsageError(f"split {split!r} is empty")
        _check_model_data(model, samples, "classification")
        summary = {
            "top1_accuracy": evaluate_classification(model, samples),
            "attention_miou": evaluate_attention(model, samples, args.threshold),
        }
    if out:
        (out / "config.txt").write_text(resolved_config(args))
        _write_rows(out / "eval.csv", list(summary), [[_fmt(v) for v in summary.values()]])
    print("summary: " + ", ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
    return EXIT_OK


def _load_model(path) -> AttentionModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        model, _ = load_checkpoint(path)
    except FormatError as e:
        raise UsageError(f"{path}: {e}") from None
    return model


def _indices(text: str, limit: int, what: str) -> list[int]:
    try:
        values = [int(v) for v in _csv_list(text)]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    for v in values:
        if not 0 <= v < limit:
            raise UsageError(f"{what} {v} is out of range [0, {limit})")
    return values


def cmd_visualize(args: argparse.Namespace) -> int:
    from .metrics import predict
    from .visualize import export_sample

    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    model = _load_model(args.checkpoint)
    samples = _load_split(args.data, args.split)
    indices = _indices(args.indices, len(samples), "sample index")
    heads = None if args.heads_shown is None else _indices(args.heads_shown, model.num_heads, "head index")
    _check_model_data(model, samples, "retrieval")
    out = _prepare_out(args.out)
    (out / "config.txt").write_text(resolved_config(args))
    chosen = [samples[i] for i in indices]
    att = predict(model, chosen).attention
    count = 0
    for i, s, a in zip(indices, chosen, att):
        count += len(export_sample(out, i, s.image, a, s.object_bbox, args.threshold, heads))
    print(f"wrote {count} images to {out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from .ablation import parse_values, run_ablation
    from .plotting import plot_ablation
    from .train import TrainConfig, TrainingDiverged

    if args.axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {args.axis!r}; valid axes: {', '.join(ABLATION_AXES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    spec = _dataset_spec(args)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        objective=args.objective,
        strategy=args.strategy,
        lambda_effect=args.lambda_effect,
        dropout_p=args.dropout_p,
        entropy_weight=args.entropy_weight,
        calibration_size=args.calibration_size,
        grad_clip=args.grad_clip,
        seed=args.seed,
    )
    try:
        config.validate()
        values = parse_values(args.axis, None if args.values is None else _csv_list(args.values))
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _prepare_out(args.out)
    _write_config(out, args)
    try:
        table = run_ablation(
            spec, config, args.axis, values, args.seeds, args.heads or 32, args.depth, args.threshold, args.threads
        )
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    path = table.write_csv(out / f"ablation_{args.axis}.csv", include_timing=args.timing)
    for metric in ("top1_accuracy", "attention_miou"):
        plot_ablation(
            [r.value for r in table.rows],
            [r.mean(metric) for r in table.rows],
            [r.sd(metric) for r in table.rows] if table.seeds > 1 else None,
            out / f"ablation_{args.axis}_{metric}.png",
            metric,
            args.axis,
        )
    print(table.to_csv(include_timing=args.timing), end="")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "visualize": cmd_visualize, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
