"""graftkit command line: train, eval, decode, voxelize, synth-data, ablate, split-sweep and friends.

Exit codes: 0 ok, 1 runtime failure, 2 usage. Failures print one line
`error: <Type>: <message>` on stderr.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import pandas as pd
import torch

from graftkit import db
from graftkit.backbones import build_backbone, split_variants
from graftkit.checkpoints import load_backbone, load_checkpoint, save_backbone
from graftkit.config import (
    DecodeConfig,
    TrainConfig,
    env_data_root,
    env_out_dir,
    load_config_file,
    load_environment,
    merge_overrides,
    write_config_echo,
)
from graftkit.errors import ConfigError, GraftkitError
from graftkit.evaluation import ap50, evaluate_top1, nms_merge, read_detections_jsonl, Detection, GroundTruth
from graftkit.event_voxel import chunk_stream, read_events, save_voxel_grid, voxelize
from graftkit.experiment import run_grafting_experiment, train_classifier
from graftkit.feature_decoder import decode_features, export_image, write_trace_csv
from graftkit.graft_trainer import run_ablation, run_sample_sweep, run_split_sweep, train_graft
from graftkit.model_graph import SplitSpec, split
from graftkit.paired_data import (
    DatasetSplit,
    load_mnist_images,
    load_split,
    pair_nmnist,
    synth_event_pairs,
    synth_thermal_pairs,
    write_manifest,
)
from graftkit.reports import (
    ablation_figure,
    epoch_loss_frame,
    loss_curve_figure,
    split_sweep_figure,
    write_figure,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

TRAIN_FLAGS = {
    "epochs": int, "lr": float, "batch_size": int, "crop": int, "alpha": float, "beta": float,
    "gamma_h": float, "gamma_r": float, "loss_terms": str, "split_front": int, "split_mid": int,
    "data_manifest": str, "pretrained": str, "frontend_init": str, "device": str, "num_workers": int,
    "checkpoint_every": int,
}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so dispatch owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging(level):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    )


def _add_common(p):
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--out_dir", default="runs/latest", help="artifact directory (GRAFTKIT_OUT overrides)")
    p.add_argument("--seed", type=int)
    p.add_argument("--log_level", default=os.environ.get("GRAFTKIT_LOG_LEVEL", "INFO"))


def _add_train_flags(p):
    for name, kind in TRAIN_FLAGS.items():
        p.add_argument(f"--{name}", type=kind)
    p.add_argument("--allow_custom_gamma", action="store_true", default=None)


def build_parser():
    parser = ArgumentParser(prog="graftkit", description="Self-supervised network grafting toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("train", help="graft a new front end onto a pretrained backbone")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="top-1 error of a grafted checkpoint, or AP50 of detection files")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data_manifest")
    p.add_argument("--pretrained")
    p.add_argument("--detections")
    p.add_argument("--ground_truth")
    p.add_argument("--merge_with")
    p.add_argument("--iou_threshold", type=float, default=0.5)

    p = sub.add_parser("decode", help="decode grafted front end features into a frame")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pretrained")
    p.add_argument("--data_manifest")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--decode_lr", type=float)
    p.add_argument("--tv_weight", type=float)

    p = sub.add_parser("voxelize", help="event file -> voxel grids + JSON sidecars")
    _add_common(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--D", type=int, default=3)
    p.add_argument("--H", type=int)
    p.add_argument("--W", type=int)
    p.add_argument("--N", type=int, help="events per window (default: the whole stream)")

    p = sub.add_parser("synth-data", help="build a paired dataset manifest")
    _add_common(p)
    p.add_argument("--source", choices=["mnist", "nmnist"], default="mnist")
    p.add_argument("--modality", choices=["events", "thermal"], default="events")
    p.add_argument("--data_root", default=None)
    p.add_argument("--nmnist_root")
    p.add_argument("--limit", type=int)
    p.add_argument("--test_limit", type=int)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--D", type=int, default=3)
    p.add_argument("--noise_sigma", type=float, default=0.05)
    p.add_argument("--blur_radius", type=int, default=1)
    p.add_argument("--remap", default="gamma")

    for name, help_text in (("ablate", "train every nonempty loss-term subset"),
                            ("split-sweep", "train one grafted model per split variant"),
                            ("sample-sweep", "train with reduced fractions of the training pairs"),
                            ("experiment", "pretrained vs grafted vs supervised comparison")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_train_flags(p)
        if name == "ablate":
            p.add_argument("--repeats", type=int, default=5)
        if name == "split-sweep":
            p.add_argument("--splits", help="comma list of front:mid pairs, e.g. 1:2,2:3")
        if name == "sample-sweep":
            p.add_argument("--fractions", default="1.0,0.4,0.1")
        if name == "experiment":
            p.add_argument("--classifier_epochs", type=int, default=5)
            p.add_argument("--classifier_lr", type=float, default=1e-3)

    p = sub.add_parser("pretrain", help="supervised LeNet training on a manifest")
    _add_common(p)
    p.add_argument("--data_manifest")
    p.add_argument("--use", choices=["frame", "modality"], default="frame")
    p.add_argument("--backbone", default="lenet5")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch_size", type=int, default=256)
    parser.subcommands = sub.choices
    return parser


def parse_command_line(parser, argv):
    """Parses `argv`; keys of `--config` that name a flag of the subcommand become its defaults.

    Explicit flags still win. Every config key lands in `args.config_values`.
    """
    args = parser.parse_args(argv)
    args.config_values = {}
    if getattr(args, "config", None):
        values = load_config_file(args.config)
        flags = {k: v for k, v in values.items() if k in vars(args) and k not in ("config", "config_values")}
        parser.subcommands[args.command].set_defaults(**flags)
        args = parser.parse_args(argv)
        args.config_values = values
    return args


def _file_values(args, accepted=()):
    """Config entries that are not flags of this subcommand, plus those a config class reads itself."""
    flags = set(vars(args))
    return {k: v for k, v in args.config_values.items() if k not in flags or k in accepted}


def _reject_unknown_keys(args):
    unknown = sorted(_file_values(args))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")


def _echo_args(args):
    return {k: v for k, v in vars(args).items() if k not in ("command", "config", "config_values")}


def _train_config(args):
    base = _file_values(args, TrainConfig.accepted_keys())
    names = (*TRAIN_FLAGS, "seed", "allow_custom_gamma", "out_dir")
    overrides = {name: getattr(args, name, None) for name in names}
    return TrainConfig.from_mapping(merge_overrides(base, overrides))


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _load_training_inputs(cfg):
    pretrained = load_backbone(_require(cfg.pretrained, "pretrained"))
    data = load_split(_require(cfg.data_manifest, "data_manifest"))
    if not data.train:
        raise ConfigError(f"{cfg.data_manifest} has no training pairs")
    return pretrained, data


def cmd_train(args, out_dir, run):
    cfg = _train_config(args)
    write_config_echo(cfg, out_dir, "train")
    run.start(cfg.to_dict())
    pretrained, data = _load_training_inputs(cfg)
    model, report = train_graft(pretrained, cfg.split, data, cfg, out_dir)
    report.write_json(out_dir / "report.json")
    epochs = epoch_loss_frame(report)
    epochs.to_csv(out_dir / "epoch_losses.csv", index=False)
    write_figure(loss_curve_figure(epochs), out_dir / "loss_curves.html")
    run.epoch_losses(epochs)
    return {"final_total": report.epoch_losses["total"][-1], "best_checkpoint": report.best_checkpoint}


def cmd_eval(args, out_dir, run):
    _reject_unknown_keys(args)
    write_config_echo(_echo_args(args), out_dir, "eval")
    run.start(_echo_args(args))
    metrics = {}
    if args.detections or args.ground_truth:
        records = read_detections_jsonl(_require(args.detections, "--detections"))
        truths = [r for r in read_detections_jsonl(_require(args.ground_truth, "--ground_truth"))
                  if isinstance(r, GroundTruth)]
        detections = [r for r in records if isinstance(r, Detection)]
        metrics["ap50"] = ap50(detections, truths, args.iou_threshold)
        if args.merge_with:
            other = [r for r in read_detections_jsonl(args.merge_with) if isinstance(r, Detection)]
            metrics["ap50_other"] = ap50(other, truths, args.iou_threshold)
            metrics["ap50_combined"] = ap50(nms_merge(detections, other, args.iou_threshold), truths,
                                            args.iou_threshold)
    else:
        model, spec, _, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
        data = load_split(_require(args.data_manifest, "--data_manifest"))
        metrics["split"] = list(spec.as_tuple())
        metrics["grafted_top1_error"] = evaluate_top1(model, data.test, "modality")
        if args.pretrained:
            metrics["pretrained_top1_error"] = evaluate_top1(load_backbone(args.pretrained), data.test, "frame")
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def cmd_decode(args, out_dir, run):
    base = _file_values(args, DecodeConfig.accepted_keys())
    cfg = DecodeConfig.from_mapping(merge_overrides(base, {
        "iterations": args.iterations, "decode_lr": args.decode_lr, "tv_weight": args.tv_weight, "seed": args.seed,
    }))
    echo = {**_echo_args(args), "iterations": cfg.iterations, "decode_lr": cfg.learning_rate,
            "tv_weight": cfg.tv_weight, "seed": cfg.seed}
    write_config_echo(echo, out_dir, "decode")
    run.start(echo)
    model, spec, _, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    front, _, _ = split(load_backbone(_require(args.pretrained, "--pretrained")), spec)
    data = load_split(_require(args.data_manifest, "--data_manifest"))
    samples = data.test or data.train
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} outside 0..{len(samples) - 1}")
    sample = samples[args.index]
    with torch.no_grad():
        H_hat = model.gn_front(sample.modality.unsqueeze(0))
    result = decode_features(H_hat, front, cfg, image_shape=sample.frame.shape)
    export_image(result.image, out_dir / "decoded.png")
    export_image(sample.frame, out_dir / "frame.png")
    write_trace_csv(result, out_dir / "objective_trace.csv")
    return {"initial_objective": result.objective[0], "final_objective": result.objective[-1]}


def cmd_voxelize(args, out_dir, run):
    _reject_unknown_keys(args)
    write_config_echo(_echo_args(args), out_dir, "voxelize")
    run.start(_echo_args(args))
    events = read_events(_require(args.input, "--in"))
    if len(events) == 0:
        raise GraftkitError(f"{args.input} holds no events")
    H = args.H or int(events["y"].max()) + 1
    W = args.W or int(events["x"].max()) + 1
    windows, dropped = chunk_stream(events, args.N) if args.N else ([events], 0)
    stem = Path(args.input).stem
    for k, window in enumerate(windows):
        grid = voxelize(window, args.D, H, W)
        save_voxel_grid(grid, out_dir / f"{stem}_{k:05d}.pt")
    logger.info(f"Voxelized {len(windows)} windows from {args.input} ({dropped} events dropped)")
    return {"windows": len(windows), "dropped": dropped, "D": args.D, "H": H, "W": W}


def cmd_synth_data(args, out_dir, run):
    _reject_unknown_keys(args)
    write_config_echo(_echo_args(args), out_dir, "synth-data")
    run.start(_echo_args(args))
    root = args.data_root or env_data_root()
    seed = args.seed or 0
    train_images, train_labels = load_mnist_images(root, train=True, limit=args.limit)
    test_images, test_labels = load_mnist_images(root, train=False, limit=args.test_limit)
    skipped = 0
    if args.source == "nmnist":
        nmnist_root = _require(args.nmnist_root, "--nmnist_root")
        train = pair_nmnist(train_images, train_labels, nmnist_root, "Train", args.D)
        test = pair_nmnist(test_images, test_labels, nmnist_root, "Test", args.D, start_index=len(train_images))
    elif args.modality == "events":
        train, skipped_train = synth_event_pairs(train_images, args.steps, args.threshold, seed, args.D, train_labels)
        test, skipped_test = synth_event_pairs(test_images, args.steps, args.threshold, seed + 1, args.D, test_labels,
                                               start_index=len(train_images))
        skipped = skipped_train + skipped_test
    else:
        train = synth_thermal_pairs(train_images, args.noise_sigma, args.blur_radius, seed, args.remap,
                                    labels=train_labels)
        test = synth_thermal_pairs(test_images, args.noise_sigma, args.blur_radius, seed + 1, args.remap,
                                   labels=test_labels, start_index=len(train_images))
    manifest = write_manifest(DatasetSplit(train, test), out_dir)
    return {"manifest": str(manifest), "train": len(train), "test": len(test), "skipped": skipped}


def cmd_ablate(args, out_dir, run):
    cfg = _train_config(args)
    write_config_echo({**cfg.to_dict(), "repeats": args.repeats}, out_dir, "ablate")
    run.start({**cfg.to_dict(), "repeats": args.repeats})
    pretrained, data = _load_training_inputs(cfg)
    result = run_ablation(pretrained, data, cfg, repeats=args.repeats, out_dir=out_dir / "runs")
    result.runs.to_csv(out_dir / "ablation_runs.csv", index=False)
    result.summary.to_csv(out_dir / "ablation_summary.csv", index=False)
    write_figure(ablation_figure(result.runs), out_dir / "ablation.html")
    run.results("ablation", result.runs)
    return {"subsets": len(result.summary)}


def _split_list(value):
    """A comma string from the command line, or a list from a config file."""
    return [str(v).strip() for v in value] if isinstance(value, (list, tuple)) else value.split(",")


def _parse_splits(value):
    specs = []
    for item in _split_list(value):
        front, _, mid = item.partition(":")
        try:
            specs.append(SplitSpec(int(front), int(mid)))
        except ValueError as e:
            raise ConfigError(f"bad split {item!r}; expected front:mid") from e
    return specs


def cmd_split_sweep(args, out_dir, run):
    cfg = _train_config(args)
    write_config_echo({**cfg.to_dict(), "splits": args.splits}, out_dir, "split-sweep")
    run.start(cfg.to_dict())
    pretrained, data = _load_training_inputs(cfg)
    specs = _parse_splits(args.splits) if args.splits else split_variants(pretrained)
    table = run_split_sweep(pretrained, specs, data, cfg, out_dir=out_dir / "runs")
    table.to_csv(out_dir / "split_sweep.csv", index=False)
    write_figure(split_sweep_figure(table), out_dir / "split_sweep.html")
    run.results("split_sweep", table)
    return {"splits": len(table)}


def cmd_sample_sweep(args, out_dir, run):
    cfg = _train_config(args)
    write_config_echo({**cfg.to_dict(), "fractions": args.fractions}, out_dir, "sample-sweep")
    run.start(cfg.to_dict())
    pretrained, data = _load_training_inputs(cfg)
    fractions = [float(f) for f in _split_list(args.fractions)]
    table = run_sample_sweep(pretrained, fractions, data, cfg, out_dir=out_dir / "runs")
    table.to_csv(out_dir / "sample_sweep.csv", index=False)
    run.results("sample_sweep", table)
    return {"fractions": len(table)}


def cmd_experiment(args, out_dir, run):
    cfg = _train_config(args)
    echo = {**cfg.to_dict(), "classifier_epochs": args.classifier_epochs, "classifier_lr": args.classifier_lr}
    write_config_echo(echo, out_dir, "experiment")
    run.start(echo)
    data = load_split(_require(cfg.data_manifest, "data_manifest"))
    pretrained = load_backbone(cfg.pretrained) if cfg.pretrained else None
    results, _, _ = run_grafting_experiment(data, cfg, args.classifier_epochs, args.classifier_lr,
                                            pretrained=pretrained)
    results.to_csv(out_dir / "experiment.csv", index=False)
    run.results("experiment", results)
    return {f"{row.network}_{row.input}": row.top1_error for row in results.itertuples()}


def cmd_pretrain(args, out_dir, run):
    _reject_unknown_keys(args)
    write_config_echo(_echo_args(args), out_dir, "pretrain")
    run.start(_echo_args(args))
    data = load_split(_require(args.data_manifest, "--data_manifest"))
    sample = data.train[0]
    x = getattr(sample, args.use)
    chain = build_backbone(args.backbone, in_channels=x.shape[0], input_size=x.shape[-1])
    train_classifier(chain, data.train, args.use, args.epochs, args.lr, args.batch_size, args.seed or 0)
    save_backbone(chain, out_dir / "backbone.pt")
    metrics = {"test_top1_error": evaluate_top1(chain, data.test, args.use)} if data.test else {}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "voxelize": cmd_voxelize,
    "synth-data": cmd_synth_data,
    "ablate": cmd_ablate,
    "split-sweep": cmd_split_sweep,
    "sample-sweep": cmd_sample_sweep,
    "experiment": cmd_experiment,
    "pretrain": cmd_pretrain,
}


class RegistryRun:
    """Records one CLI run in the registry; every call is a no-op when the registry is unavailable."""

    def __init__(self, command, out_dir):
        self.command = command
        self.out_dir = out_dir
        self.engine = None
        self.run_id = None

    def start(self, config):
        self.engine = db.get_db_engine(db.registry_url(self.out_dir))
        if self.engine is not None and db.create_run_tables(self.engine):
            self.run_id = db.insert_run(self.engine, self.command, config, self.out_dir)

    def epoch_losses(self, epochs_df):
        if self.run_id is not None:
            db.insert_epoch_losses(self.engine, self.run_id, epochs_df.to_dict(orient="records"))

    def results(self, kind, df):
        if self.run_id is not None:
            db.insert_results(self.engine, self.run_id, kind, df)

    def finish(self, status, summary=None):
        if self.run_id is not None:
            db.finish_run(self.engine, self.run_id, status, summary)
        if self.engine is not None:
            self.engine.dispose()


def _error_line(exc):
    message = " ".join(str(exc).split())
    return f"error: {type(exc).__name__}: {message}"


def dispatch(argv=None):
    load_environment()
    parser = build_parser()
    try:
        args = parse_command_line(parser, argv)
    except (UsageError, ConfigError) as e:
        print(_error_line(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level)
    out_dir = Path(env_out_dir(args.out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    run = RegistryRun(args.command, out_dir)
    try:
        summary = COMMANDS[args.command](args, out_dir, run)
    except ConfigError as e:
        logger.error(f"{args.command}: {e}")
        run.finish("usage_error", {"error": str(e)})
        print(_error_line(e), file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        run.finish("failed", {"error": str(e)})
        print(_error_line(e), file=sys.stderr)
        return EXIT_FAILURE
    run.finish("ok", summary)
    logger.info(f"{args.command} finished; artifacts in {out_dir}")
    return EXIT_OK


def main():
    return dispatch(sys.argv[1:])
