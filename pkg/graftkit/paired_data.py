"""Time-synchronized (intensity frame, modality) pairs: synthesis, alignment, splitting and manifests."""
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset
from torchvision.transforms.functional import to_tensor

from graftkit.errors import GraftkitError, ShapeMismatchError
from graftkit.event_voxel import EVENT_DTYPE, center_crop_grid, read_events, read_nmnist, voxelize

logger = logging.getLogger(__name__)

LOG_EPS = 0.01
FRAME_INTERVAL_US = 1000
MOVES = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)]


@dataclass(frozen=True)
class PairedSample:
    frame: torch.Tensor  # (C, H, W) in [0, 1]
    modality: torch.Tensor  # (C', H, W)
    timestamp: float
    label: Any = None

    def __post_init__(self):
        if self.frame.shape[-2:] != self.modality.shape[-2:]:
            raise ShapeMismatchError("frame and modality spatial dims differ", self.frame.shape[-2:], self.modality.shape[-2:])


@dataclass
class DatasetSplit:
    train: list
    test: list


def _as_image_list(images):
    """A batch of (H, W) or (C, H, W) images as a list of (C, H, W) float tensors."""
    out = []
    for img in images:
        img = torch.as_tensor(img, dtype=torch.float32)
        out.append(img if img.dim() == 3 else img.unsqueeze(0))
    return out


def align_shift(frame, dx, dy, crop=False):
    """Integer translation with zero fill: content moves right by dx and down by dy.

    With `crop`, returns only the region covered by the shifted content.
    """
    H, W = frame.shape[-2:]
    if abs(dx) >= W or abs(dy) >= H:
        raise GraftkitError(f"shift ({dx}, {dy}) out of range for a {W}x{H} frame")
    out = torch.zeros_like(frame)
    out[..., max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
        frame[..., max(-dy, 0):H - max(dy, 0), max(-dx, 0):W - max(dx, 0)]
    if crop:
        return out[..., max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)]
    return out


def _random_walk(steps, H, W, generator):
    offsets = [(0, 0)]
    for _ in range(steps - 1):
        mx, my = MOVES[int(torch.randint(len(MOVES), (1,), generator=generator))]
        px, py = offsets[-1]
        nx = max(-(W - 1), min(W - 1, px + mx))
        ny = max(-(H - 1), min(H - 1, py + my))
        offsets.append((nx, ny))
    return offsets


def simulate_events(frames, threshold, t0=0, interval_us=FRAME_INTERVAL_US):
    """Brightness-change events from a frame sequence (each frame (H, W) in [0, 1]).

    Each pixel keeps a reference log intensity from its last event; a change of
    n*threshold emits n events of that sign and moves the reference by n*threshold.
    """
    ref = torch.log(frames[0].double() + LOG_EPS)
    chunks = []
    for k in range(1, len(frames)):
        level = torch.log(frames[k].double() + LOG_EPS)
        diff = level - ref
        crossings = torch.floor(diff.abs() / threshold).long()
        fired = crossings > 0
        if not fired.any():
            continue
        ys, xs = torch.nonzero(fired, as_tuple=True)
        counts = crossings[fired]
        signs = torch.sign(diff[fired]).long()
        ref[fired] += signs.double() * counts.double() * threshold

        n = int(counts.sum())
        chunk = np.empty(n, dtype=EVENT_DTYPE)
        chunk["t"] = t0 + k * interval_us
        chunk["x"] = xs.repeat_interleave(counts).numpy()
        chunk["y"] = ys.repeat_interleave(counts).numpy()
        chunk["p"] = signs.repeat_interleave(counts).numpy()
        chunks.append(chunk)
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    return np.concatenate(chunks)


class SynthResult(NamedTuple):
    samples: list
    skipped: int


def synth_event_pairs(images, steps=5, threshold=0.1, seed=0, D=3, labels=None, trajectory=None, start_index=0):
    """Moves each image along a small random trajectory and pairs its last frame with the event volume.

    `trajectory` (a list of cumulative (dx, dy) offsets, first one (0, 0)) replaces
    the random walk for every image. Images producing no events are skipped.
    Sample n is stamped at the end of its window, `start_index + n` windows in.
    """
    if threshold <= 0:
        raise GraftkitError(f"threshold must be > 0, got {threshold}")
    if steps < 2:
        raise GraftkitError(f"steps must be >= 2, got {steps}")
    generator = torch.Generator().manual_seed(seed)
    images = _as_image_list(images)
    samples, skipped = [], 0
    window_us = steps * FRAME_INTERVAL_US

    for n, image in enumerate(images):
        plane = image.float().mean(dim=0)
        H, W = plane.shape
        offsets = trajectory if trajectory is not None else _random_walk(steps, H, W, generator)
        frames = [align_shift(plane, dx, dy) for dx, dy in offsets]
        t0 = (start_index + n) * window_us
        events = simulate_events(frames, threshold, t0=t0)
        if len(events) == 0:
            skipped += 1
            continue
        grid = voxelize(events, D, H, W)
        samples.append(PairedSample(
            frame=frames[-1].unsqueeze(0),
            modality=grid.slices.float(),
            timestamp=float(t0 + (len(offsets) - 1) * FRAME_INTERVAL_US),
            label=None if labels is None else int(labels[n]),
        ))
    logger.info(f"Synthesized {len(samples)} event pairs, skipped {skipped} blank samples")
    return SynthResult(samples, skipped)


REMAPS = {
    "identity": lambda x, gamma: x,
    "invert": lambda x, gamma: 1.0 - x,
    "gamma": lambda x, gamma: x.clamp(min=0) ** gamma,
}


def synth_thermal_pairs(images, noise_sigma=0.05, blur_radius=1, seed=0, remap="gamma", gamma=0.5, labels=None,
                        start_index=0):
    """Thermal-like modality: box blur, contrast remap, then Gaussian noise, clamped to [0, 1]."""
    if noise_sigma < 0:
        raise GraftkitError(f"noise sigma must be >= 0, got {noise_sigma}")
    if remap not in REMAPS:
        raise GraftkitError(f"unknown remap {remap!r}; choose from {sorted(REMAPS)}")
    generator = torch.Generator().manual_seed(seed)
    samples = []
    for n, image in enumerate(_as_image_list(images)):
        frame = image.float()
        modality = frame
        if blur_radius > 0:
            k = 2 * blur_radius + 1
            modality = F.avg_pool2d(modality.unsqueeze(0), k, stride=1, padding=blur_radius,
                                    count_include_pad=False).squeeze(0)
        modality = REMAPS[remap](modality, gamma)
        if noise_sigma > 0:
            modality = modality + noise_sigma * torch.randn(modality.shape, generator=generator)
        samples.append(PairedSample(frame, modality.clamp(0.0, 1.0), float(start_index + n),
                                    None if labels is None else int(labels[n])))
    return samples


def split_temporal(samples, train_fraction):
    """Prefix goes to train, suffix to test."""
    if not 0 < train_fraction < 1:
        raise GraftkitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    stamps = [s.timestamp for s in samples]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise GraftkitError("samples must be time-ordered before a temporal split")
    boundary = int(round(len(samples) * train_fraction))
    return DatasetSplit(list(samples[:boundary]), list(samples[boundary:]))


def subsample(split_, fraction):
    """Keeps the first `fraction` of the training pairs; the test set is untouched."""
    if not 0 < fraction <= 1:
        raise GraftkitError(f"fraction must be in (0, 1], got {fraction}")
    keep = max(1, int(round(len(split_.train) * fraction)))
    return DatasetSplit(split_.train[:keep], split_.test)


def _crop_size(size):
    return (size, size) if isinstance(size, int) else tuple(size)


def random_crop_pair(sample, size, generator=None):
    """Crops frame and modality with one shared window."""
    h, w = _crop_size(size)
    H, W = sample.frame.shape[-2:]
    if h > H or w > W:
        raise GraftkitError(f"crop {h}x{w} larger than sample {H}x{W}")
    top = int(torch.randint(H - h + 1, (1,), generator=generator))
    left = int(torch.randint(W - w + 1, (1,), generator=generator))
    return dataclasses.replace(
        sample,
        frame=sample.frame[..., top:top + h, left:left + w],
        modality=sample.modality[..., top:top + h, left:left + w],
    )


class PairedDataset(Dataset):
    """(frame, modality) only: labels never reach the grafting losses."""

    def __init__(self, samples, crop_size=None, seed=0):
        self.samples = list(samples)
        self.crop_size = crop_size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        if self.crop_size is not None:
            # per-item generator keeps crops identical for any worker count
            generator = torch.Generator().manual_seed(self.seed * 1_000_003 + self.epoch * len(self) + index)
            sample = random_crop_pair(sample, self.crop_size, generator)
        return sample.frame, sample.modality


class LabeledDataset(Dataset):
    """(input, label) pairs for evaluation and supervised baselines."""

    def __init__(self, samples, use="modality"):
        if use not in ("frame", "modality"):
            raise GraftkitError(f"use must be 'frame' or 'modality', got {use!r}")
        self.samples = list(samples)
        self.use = use
        missing = sum(1 for s in self.samples if s.label is None)
        if missing:
            raise GraftkitError(f"{missing} samples have no label")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        return getattr(sample, self.use), sample.label


def _save_png(tensor, path):
    array = (tensor.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    if array.shape[-1] == 1:
        array = array[..., 0]
    Image.fromarray(array).save(path)


def _load_png(path):
    return to_tensor(Image.open(path))


def write_manifest(split_or_samples, out_dir, name="manifest.jsonl"):
    """Frames as PNG, modality tensors as .pt, one JSON line per sample."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "modality").mkdir(parents=True, exist_ok=True)
    if isinstance(split_or_samples, DatasetSplit):
        tagged = [("train", s) for s in split_or_samples.train] + [("test", s) for s in split_or_samples.test]
    else:
        tagged = [(None, s) for s in split_or_samples]

    rows = []
    for i, (part, sample) in enumerate(tagged):
        frame_path = Path("frames") / f"{i:06d}.png"
        modality_path = Path("modality") / f"{i:06d}.pt"
        _save_png(sample.frame, out_dir / frame_path)
        torch.save(sample.modality.clone(), out_dir / modality_path)
        row = {"frame_path": str(frame_path), "modality_path": str(modality_path), "timestamp": sample.timestamp,
               "label": sample.label}
        if part is not None:
            row["split"] = part
        rows.append(row)
    manifest = out_dir / name
    pd.DataFrame(rows).to_json(manifest, orient="records", lines=True)
    logger.info(f"Wrote {len(rows)} pairs to {manifest}")
    return manifest


def _load_modality(row, base, frame):
    if isinstance(row.get("modality_path"), str):
        path = base / row["modality_path"]
        if path.suffix.lower() == ".png":
            return _load_png(path)
        return torch.load(path, map_location="cpu", weights_only=True).float()
    ref = row.get("event_window")
    if isinstance(ref, dict):
        events = read_events(base / ref["events_path"])
        start = int(ref.get("start", 0))
        count = int(ref.get("count", len(events) - start))
        window = events[start:start + count]
        H, W = frame.shape[-2:]
        gh = max(H, int(window["y"].max()) + 1 if len(window) else H)
        gw = max(W, int(window["x"].max()) + 1 if len(window) else W)
        grid = voxelize(window, int(ref.get("D", 3)), gh, gw)
        return center_crop_grid(grid, H, W).slices.float()
    raise GraftkitError(f"manifest row has neither modality_path nor event_window: {row}")


def read_manifest(path):
    path = Path(path)
    base = path.parent
    df = pd.read_json(path, lines=True, convert_dates=False)
    samples, parts = [], []
    for row in df.to_dict(orient="records"):
        frame = _load_png(base / row["frame_path"])
        modality = _load_modality(row, base, frame)
        label = row.get("label")
        label = None if label is None or (isinstance(label, float) and np.isnan(label)) else int(label)
        samples.append(PairedSample(frame, modality, float(row["timestamp"]), label))
        parts.append(row.get("split"))
    return samples, parts


def load_split(path, train_fraction=5 / 7):
    """Uses the manifest's split column when present, otherwise a temporal split."""
    samples, parts = read_manifest(path)
    if any(isinstance(p, str) for p in parts):
        return DatasetSplit([s for s, p in zip(samples, parts) if p == "train"],
                            [s for s, p in zip(samples, parts) if p == "test"])
    return split_temporal(samples, train_fraction)


def load_mnist_images(root, train=True, limit=None):
    """MNIST digits as a float (N, 28, 28) tensor in [0, 1] plus labels."""
    from torchvision.datasets import MNIST

    dataset = MNIST(root, train=train, download=True)
    images = dataset.data.float() / 255.0
    labels = dataset.targets.clone()
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    logger.info(f"Loaded {len(images)} MNIST {'train' if train else 'test'} images from {root}")
    return images, labels


def pair_nmnist(images, labels, nmnist_root, split_name="Train", D=3, start_index=0):
    """Pairs N-MNIST recordings `<root>/<split>/<digit>/<id>.bin` with MNIST image `id - 1`.

    The 34x34 volumes are centre-cropped onto the 28x28 frame grid.
    """
    files = sorted(Path(nmnist_root, split_name).glob("*/*.bin"), key=lambda p: int(p.stem))
    samples = []
    for order, path in enumerate(files):
        index = int(path.stem) - 1
        if not 0 <= index < len(images):
            logger.debug(f"Skipping {path}: no MNIST image {index}")
            continue
        events = read_nmnist(path)
        if len(events) == 0:
            continue
        grid = center_crop_grid(voxelize(events, D, 34, 34), *images.shape[-2:])
        samples.append(PairedSample(images[index].unsqueeze(0).float(), grid.slices.float(), float(start_index + order),
                                    int(labels[index])))
    logger.info(f"Paired {len(samples)} N-MNIST recordings from {nmnist_root}/{split_name}")
    return samples
