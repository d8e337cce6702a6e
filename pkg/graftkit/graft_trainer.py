"""Grafting training loop, loss-term ablation and split / sample-size sweeps.

Per step the frozen pretrained parts produce targets H = N_f(I) and
R = N_mid(H); the grafted front end produces H_hat = GN_f(V) and
R_hat = N_mid(H_hat). Only GN_f receives Adam updates.
"""
import copy
import itertools
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from graftkit.checkpoints import save_checkpoint
from graftkit.config import TrainConfig
from graftkit.errors import ConfigError, DivergenceError
from graftkit.evaluation import evaluate_top1
from graftkit.losses import LOSS_TERMS, frl, total_loss
from graftkit.model_graph import build_grafted_frontend, clone_frontend, count_params, graft, split
from graftkit.paired_data import PairedDataset, subsample

logger = logging.getLogger(__name__)

STEP_LOGGER_NAME = "graftkit.steps"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainReport:
    epoch_losses: dict = field(default_factory=lambda: {name: [] for name in (*LOSS_TERMS, "total")})
    wall_clock_s: float = 0.0
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None
    best_epoch: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=str))
        return Path(path)


@contextmanager
def step_log(path):
    """Routes `graftkit.steps` records, one JSON object per line, into `path`."""
    if path is None:
        yield None
        return
    step_logger = logging.getLogger(STEP_LOGGER_NAME)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    step_logger.addHandler(handler)
    step_logger.setLevel(logging.INFO)
    step_logger.propagate = False
    try:
        yield step_logger
    finally:
        step_logger.removeHandler(handler)
        handler.close()


def prepare_graft(pretrained, spec, in_channels, cfg):
    """Returns the frozen intensity front end N_f and the grafted network GN."""
    front, mid, last = split(pretrained, spec)
    if cfg.frontend_init == "copy":
        if front.input_shape is not None and in_channels != front.input_shape[0]:
            raise ConfigError(
                f"frontend_init='copy' needs {front.input_shape[0]} modality channels, data has {in_channels}"
            )
        gn_front = clone_frontend(front)
    else:
        gn_front = build_grafted_frontend(front, in_channels, seed=cfg.seed)
    model = graft(gn_front, mid, last)
    frozen_front = copy.deepcopy(front).requires_grad_(False).eval()
    return frozen_front, model


def make_optimizer(model, lr):
    return torch.optim.Adam(model.gn_front.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def graft_step(model, front, frame, modality, optimizer, weights, terms=LOSS_TERMS, step=None):
    """One Adam step on the grafting loss; aborts on a non-finite total."""
    with torch.no_grad():
        H = front(frame)
        R = model.mid(H)
    H_hat = model.gn_front(modality)
    R_hat = model.mid(H_hat)
    breakdown = total_loss(H, H_hat, R, R_hat, weights, terms)
    if not torch.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite grafting loss at step {step}: {breakdown.as_floats()}", step,
                              breakdown.as_floats())
    optimizer.zero_grad()
    if breakdown.total.requires_grad:
        breakdown.total.backward()
        optimizer.step()
    return breakdown


def train_graft(pretrained, spec, data, cfg, out_dir=None):
    """Trains GN_f on `data.train`; returns (grafted model, TrainReport).

    With `out_dir`, writes steps.jsonl, best.pt, final.pt and a periodic last.pt.
    """
    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    in_channels = data.train[0].modality.shape[0]
    front, model = prepare_graft(pretrained, spec, in_channels, cfg)
    if cfg.crop_size is not None:
        model.check_training_input((in_channels, cfg.crop_size, cfg.crop_size))
    front.to(device)
    model.to(device)

    dataset = PairedDataset(data.train, cfg.crop_size, seed=cfg.seed)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
                        generator=torch.Generator().manual_seed(cfg.seed))
    optimizer = make_optimizer(model, cfg.learning_rate)
    weights = cfg.loss_weights

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport(config=cfg.to_dict())
    meta = dict(pretrained.meta)
    best_total = math.inf
    started = time.perf_counter()
    step = 0

    logger.info(f"Grafting split {spec.as_tuple()} on {len(dataset)} pairs for {cfg.epochs} epochs, "
                f"terms {'+'.join(cfg.loss_terms)}, {model.trainable_param_count()} trainable parameters")
    with step_log(out_dir / "steps.jsonl" if out_dir is not None else None) as step_logger:
        for epoch in range(cfg.epochs):
            dataset.set_epoch(epoch)
            model.train()
            sums = dict.fromkeys(report.epoch_losses, 0.0)
            batches = 0
            for frame, modality in loader:
                breakdown = graft_step(model, front, frame.to(device), modality.to(device), optimizer, weights,
                                       cfg.loss_terms, step)
                values = breakdown.as_floats()
                for name in sums:
                    sums[name] += values[name]
                if step_logger is not None:
                    step_logger.info(json.dumps({"step": step, "epoch": epoch, **values}))
                batches += 1
                step += 1

            for name in sums:
                report.epoch_losses[name].append(sums[name] / max(batches, 1))
            epoch_total = report.epoch_losses["total"][-1]
            logger.info(f"epoch {epoch}: " + ", ".join(f"{k}={v[-1]:.6g}" for k, v in report.epoch_losses.items()))

            if out_dir is not None:
                if epoch_total < best_total:
                    report.best_checkpoint = str(save_checkpoint(out_dir / "best.pt", model, spec, weights, meta,
                                                                 {"epoch": epoch}))
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / "last.pt", model, spec, weights, meta, {"epoch": epoch})
            if epoch_total < best_total:
                best_total = epoch_total
                report.best_epoch = epoch

    if out_dir is not None:
        report.final_checkpoint = str(save_checkpoint(out_dir / "final.pt", model, spec, weights, meta,
                                                      {"epoch": cfg.epochs - 1}))
    report.wall_clock_s = time.perf_counter() - started
    model.eval()
    return model, report


@torch.no_grad()
def feature_fidelity(model, front, samples, batch_size=256):
    """Mean FRL between N_f(frame) and GN_f(modality) over `samples` (label-free)."""
    loader = DataLoader(PairedDataset(samples), batch_size=batch_size, shuffle=False)
    model.eval()
    values, weights = [], []
    device = next(model.parameters()).device
    for frame, modality in loader:
        values.append(float(frl(front(frame.to(device)), model.gn_front(modality.to(device)))))
        weights.append(len(frame))
    return float(np.average(values, weights=weights))


class Metric(NamedTuple):
    name: str
    value: float


def grafted_metric(model, pretrained, spec, samples):
    """Top-1 error on labeled modality inputs, otherwise test FRL."""
    if samples and all(s.label is not None for s in samples):
        return Metric("top1_error", evaluate_top1(model, samples, use="modality"))
    front, _, _ = split(pretrained, spec)
    return Metric("test_frl", feature_fidelity(model, front, samples))


def loss_term_subsets():
    """The seven nonempty subsets of {frl, fel, fsl}, singles first."""
    return [subset for r in range(1, len(LOSS_TERMS) + 1) for subset in itertools.combinations(LOSS_TERMS, r)]


class AblationResult(NamedTuple):
    runs: pd.DataFrame
    summary: pd.DataFrame


def summarize(runs, by):
    grouped = runs.groupby(by, sort=False)["metric"]
    return grouped.agg(["mean", "std", "median", "count"]).reset_index()


def run_ablation(pretrained, data, base_cfg, repeats=5, spec=None, out_dir=None):
    """Trains every nonempty loss-term subset `repeats` times with seeds base_seed + repeat."""
    spec = spec or base_cfg.split
    rows = []
    for subset in loss_term_subsets():
        name = "+".join(subset)
        for repeat in range(repeats):
            cfg = base_cfg.with_updates(loss_terms=list(subset), seed=base_cfg.seed + repeat)
            run_dir = Path(out_dir) / name / f"repeat_{repeat}" if out_dir is not None else None
            model, report = train_graft(pretrained, spec, data, cfg, run_dir)
            metric = grafted_metric(model, pretrained, spec, data.test)
            rows.append({"terms": name, "repeat": repeat, "seed": cfg.seed, "metric_name": metric.name,
                         "metric": metric.value, **{f"final_{k}": v[-1] for k, v in report.epoch_losses.items()}})
            logger.info(f"ablation {name} repeat {repeat}: {metric.name}={metric.value:.4f}")
    runs = pd.DataFrame(rows)
    return AblationResult(runs, summarize(runs, "terms"))


def run_split_sweep(pretrained, specs, data, cfg, out_dir=None):
    """One grafted model per split; reports trainable parameters, their fraction and the metric."""
    total = count_params(pretrained).count
    rows = []
    for spec in specs:
        spec.validate(len(pretrained))
        run_cfg = cfg.with_updates(split_front=spec.front_end, split_mid=spec.mid_end)
        run_dir = Path(out_dir) / f"split_{spec.front_end}_{spec.mid_end}" if out_dir is not None else None
        model, report = train_graft(pretrained, spec, data, run_cfg, run_dir)
        trainable = model.trainable_param_count()
        metric = grafted_metric(model, pretrained, spec, data.test)
        rows.append({"split_front": spec.front_end, "split_mid": spec.mid_end, "trainable_params": trainable,
                     "total_params": total, "fraction": trainable / total, "metric_name": metric.name,
                     "metric": metric.value, "final_total": report.epoch_losses["total"][-1]})
        logger.info(f"split {spec.as_tuple()}: {trainable} trainable ({trainable / total:.2%}), "
                    f"{metric.name}={metric.value:.4f}")
    return pd.DataFrame(rows)


def run_sample_sweep(pretrained, fractions, data, cfg, out_dir=None):
    """Metric versus the fraction of training pairs available to grafting."""
    spec = cfg.split
    rows = []
    for fraction in fractions:
        reduced = subsample(data, fraction)
        run_dir = Path(out_dir) / f"fraction_{fraction:g}" if out_dir is not None else None
        model, _ = train_graft(pretrained, spec, reduced, cfg, run_dir)
        metric = grafted_metric(model, pretrained, spec, data.test)
        rows.append({"fraction": fraction, "train_pairs": len(reduced.train), "metric_name": metric.name,
                     "metric": metric.value})
    return pd.DataFrame(rows)


__all__ = [
    "TrainConfig",
    "TrainReport",
    "graft_step",
    "train_graft",
    "run_ablation",
    "run_split_sweep",
    "run_sample_sweep",
]
