"""Command-line entry point: ``centeruda <command> [flags]``.

Every per-command flag maps to one TrainConfig field; values resolve as
defaults < --config file < CENTERUDA_* environment < flags.
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from centeruda import __version__
from centeruda.checkpoint import load_checkpoint
from centeruda.data import generate_dataset, load_coco
from centeruda.errors import CenterUDAError, ConfigError, UsageError
from centeruda.evaluation import comparison_frame, evaluate, export_manifest_maps, format_table, throughput
from centeruda.losses import probability_grid, write_gradient_profile
from centeruda.model import build_model
from centeruda.train import RESOLVED_CONFIG, train
from centeruda.utils.config import Config, TrainConfig, format_value

logger = logging.getLogger("centeruda")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
GLOBAL_FIELDS = ("seed", "deterministic")

COMMANDS = {
    "generate-data": ("Render a procedural source or target dataset", ("experiment", "data", "paths")),
    "train": (
        "Train a detector in baseline, em or msl mode",
        ("experiment", "optimizer", "loss", "model", "decode", "augment", "data", "paths"),
    ),
    "evaluate": ("Compute AP per class, mAP and heatmap statistics", ("decode", "paths")),
    "export-maps": ("Write heatmap and entropy map PNGs", ("paths", "eval")),
    "analyze-gradients": ("Tabulate entropy vs maximum squares gradients", ("paths", "eval")),
    "throughput": ("Time single-image forward + decode", ("experiment", "model", "decode", "data", "paths", "eval")),
}
# flags handled by hand for these commands
CUSTOM_FLAGS = {"evaluate": ("checkpoint",)}


class CommandParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser, sections, skip):
    group = parser.add_argument_group("config fields")
    for f in fields(TrainConfig):
        if f.metadata["section"] not in sections or f.name in GLOBAL_FIELDS or f.name in skip:
            continue
        default = format_value(f.default)
        group.add_argument(
            _flag(f.name),
            dest=f.name,
            default=argparse.SUPPRESS,
            metavar=f.name.upper(),
            help=f"{f.metadata['help']} [{f.metadata['section']}] (default: {default or 'unset'})",
        )


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="master seed (experiment.seed)")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single worker, reproducible outputs (experiment.deterministic)")
    common.add_argument("--log-level", type=str.upper, default=Config.LOG_LEVEL.upper(),
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging level")

    parser = CommandParser(prog="centeruda", description="Anchorless detection with unsupervised domain adaptation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CommandParser)
    for name, (help_text, sections) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        _add_config_flags(cmd, sections, CUSTOM_FLAGS.get(name, ()))
    sub.choices["evaluate"].add_argument(
        "--checkpoint", action="append", dest="checkpoints", metavar="PATH",
        help="checkpoint to evaluate; repeat to compare runs (paths.checkpoint)",
    )
    for cmd in sub.choices.values():
        cmd.set_defaults(command_usage=cmd.format_usage().strip())
    return parser


def resolve_config(args):
    flag_values = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)}
    flag_values.pop("seed", None)
    flag_values.pop("deterministic", None)
    config = TrainConfig.load(args.config)
    try:
        config = config.with_strings(flag_values)
    except ConfigError as e:
        raise UsageError(f"{e}\n{args.command_usage}") from e
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.deterministic:
        config = config.replace(deterministic=True)
    if config.deterministic:
        config = config.replace(jobs=1)
    return config


def _require(config, *names):
    for name in names:
        if not getattr(config, name):
            raise UsageError(f"missing required {_flag(name)} ({TrainConfig.section_of(name)}.{name})")


def _snapshot(config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / RESOLVED_CONFIG)
    return out_dir


def _load_params(path):
    return load_checkpoint(path).params


def cmd_generate_data(config, args):
    out_dir = _snapshot(config, config.output_dir)
    manifest = generate_dataset(config.scene_spec, config.count, config.seed, out_dir, jobs=config.jobs)
    print(f"{len(manifest)} images, {manifest.num_annotations()} annotations -> {manifest.path}")


def cmd_train(config, args):
    _require(config, "source_manifest")
    if config.mode != "baseline":
        _require(config, "target_manifest")
    source = load_coco(config.source_manifest)
    target = load_coco(config.target_manifest) if config.target_manifest else None
    result = train(config, source, target)
    print(f"trained {result.steps} steps over {result.epochs_completed} epochs -> {result.checkpoint_path}")


def _label(path, taken):
    path = Path(path)
    label = path.parent.name or path.stem
    if label in taken:
        label = f"{label}/{path.stem}"
    taken.add(label)
    return label


def cmd_evaluate(config, args):
    checkpoints = args.checkpoints or ([config.checkpoint] if config.checkpoint else [])
    if not checkpoints:
        raise UsageError("missing required --checkpoint (paths.checkpoint)")
    _require(config, "test_manifest")
    testset = load_coco(config.test_manifest)
    probe = load_coco(config.source_manifest) if config.source_manifest else None
    out_dir = _snapshot(config, Path(config.output_dir) / "evaluation")

    reports, taken = [], set()
    for path in checkpoints:
        label = _label(path, taken)
        report = evaluate(
            _load_params(path), testset, top_k=config.top_k, score_threshold=config.score_threshold,
            iou_threshold=config.iou_threshold, min_overlap=config.min_overlap, source_probe=probe, label=label,
        )
        report.to_json(out_dir / f"report_{label.replace('/', '_')}.json")
        reports.append(report)
    table = format_table(reports)
    (out_dir / "comparison.txt").write_text(table + "\n")
    comparison_frame(reports).to_csv(out_dir / "comparison.csv")
    print(table)


def cmd_export_maps(config, args):
    _require(config, "checkpoint")
    manifest_path = config.test_manifest or config.target_manifest or config.source_manifest
    if not manifest_path:
        raise UsageError("missing required --test-manifest (paths.test_manifest)")
    out_dir = _snapshot(config, Path(config.output_dir) / "maps")
    written = export_manifest_maps(_load_params(config.checkpoint), load_coco(manifest_path), out_dir,
                                   limit=config.export_limit)
    print(f"wrote {len(written)} maps -> {out_dir}")


def cmd_analyze_gradients(config, args):
    out_dir = _snapshot(config, config.output_dir)
    df = write_gradient_profile(out_dir / "gradient_profile.csv", probability_grid(config.gradient_step))
    print(df[["p", "grad_entropy", "grad_msl", "ratio"]].to_string(index=False, float_format=lambda v: f"{v:.4f}"))


def cmd_throughput(config, args):
    if config.checkpoint:
        params = _load_params(config.checkpoint)
    else:
        dtype = np.float64 if config.dtype == "float64" else np.float32
        params = build_model(config.architecture, config.num_classes, config.seed, dtype=dtype)
    out_dir = _snapshot(config, config.output_dir)
    report = throughput(
        params, config.image_size, iterations=config.throughput_iterations, warmup=config.warmup_iterations,
        top_k=config.top_k, score_threshold=config.score_threshold, seed=config.seed,
    )
    (out_dir / "throughput.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"{report.images_per_second:.2f} images/s (median {report.median_total_s * 1000:.1f} ms, "
          f"decode {report.median_decode_s * 1000:.1f} ms)")


HANDLERS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-maps": cmd_export_maps,
    "analyze-gradients": cmd_analyze_gradients,
    "throughput": cmd_throughput,
}


def run(argv=None):
    """Parse ``argv`` and run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(f"a command is required\n{parser.format_usage().strip()}")
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
        config = resolve_config(args)
        HANDLERS[args.command](config, args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CenterUDAError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
