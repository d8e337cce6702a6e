"""Event streams: parsing, fixed-count windowing and voxel-grid accumulation.

Streams are numpy structured arrays with fields (t, x, y, p): timestamps in
microseconds, pixel coordinates and polarity in {-1, +1}.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch

from graftkit.errors import EventFormatError, EventOrderError, GraftkitError

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8)])
NMNIST_RECORD_BYTES = 5
NMNIST_SENSOR_SIZE = (34, 34)


class EventRecord(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def as_event_array(events):
    """Accepts a structured array, a sequence of EventRecord/tuples, or an (N, 4) t,x,y,p array."""
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    if isinstance(events, np.ndarray) and events.dtype.names is None and events.ndim == 2:
        rows = events
    else:
        rows = np.asarray([tuple(e) for e in events], dtype=np.float64).reshape(-1, 4)
    out = np.empty(len(rows), dtype=EVENT_DTYPE)
    out["t"] = rows[:, 0]
    out["x"] = rows[:, 1]
    out["y"] = rows[:, 2]
    out["p"] = normalize_polarity(rows[:, 3])
    return out


def normalize_polarity(p):
    """Maps on-disk {0, 1} polarity to {-1, +1}; {-1, +1} passes through."""
    p = np.asarray(p)
    values = set(np.unique(p).tolist())
    if values <= {-1, 1}:
        return p.astype(np.int8)
    if values <= {0, 1}:
        return np.where(p > 0, 1, -1).astype(np.int8)
    raise EventFormatError(f"polarity values {sorted(values)} are neither {{-1, 1}} nor {{0, 1}}")


def to_records(events):
    return [EventRecord(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])) for e in as_event_array(events)]


@dataclass
class VoxelGrid:
    slices: torch.Tensor  # (D, H, W)
    num_events: int
    t_start: int = 0
    t_end: int = 0

    @property
    def D(self):
        return self.slices.shape[0]

    def sidecar(self):
        D, H, W = self.slices.shape
        return {"D": D, "H": H, "W": W, "N": self.num_events, "t_start": self.t_start, "t_end": self.t_end}


def normalize_timestamps(events, D):
    """t~_i = (D-1)(t_i - t_1)/(t_N - t_1); all zero when the window has no duration."""
    events = as_event_array(events)
    if len(events) < 1:
        raise GraftkitError("normalize_timestamps needs at least one event")
    if D < 1:
        raise GraftkitError(f"D must be >= 1, got {D}")
    t = events["t"].astype(np.float64)
    if np.any(np.diff(t) < 0):
        first_bad = int(np.argmax(np.diff(t) < 0)) + 1
        raise EventOrderError(f"events are not sorted by timestamp (first decrease at index {first_bad})")
    duration = t[-1] - t[0]
    if duration == 0:
        return np.zeros_like(t)
    return (D - 1) * (t - t[0]) / duration


def voxelize(events, D, H, W, dtype=torch.float64):
    """Accumulates polarity into D temporal slices with linear weights max(0, 1 - |d - t~|)."""
    events = as_event_array(events)
    if D < 1 or H < 1 or W < 1:
        raise GraftkitError(f"voxel grid dims must be positive, got D={D}, H={H}, W={W}")
    grid = torch.zeros(D * H * W, dtype=dtype)
    if len(events) == 0:
        return VoxelGrid(grid.view(D, H, W), 0)

    xs, ys = events["x"], events["y"]
    out_of_bounds = (xs < 0) | (xs >= W) | (ys < 0) | (ys >= H)
    if out_of_bounds.any():
        index = int(np.argmax(out_of_bounds))
        raise EventFormatError(
            f"event {index} at (x={int(xs[index])}, y={int(ys[index])}) is outside the {W}x{H} sensor", index
        )

    ts = torch.from_numpy(normalize_timestamps(events, D)).to(dtype)
    xs = torch.from_numpy(xs.astype(np.int64))
    ys = torch.from_numpy(ys.astype(np.int64))
    ps = torch.from_numpy(events["p"].astype(np.float64)).to(dtype)

    left = ts.floor()
    frac = ts - left
    left = left.long()
    pixel = xs + ys * W

    grid.index_add_(0, pixel + left * H * W, ps * (1.0 - frac))
    has_right = left + 1 < D
    grid.index_add_(0, pixel[has_right] + (left[has_right] + 1) * H * W, (ps * frac)[has_right])

    return VoxelGrid(grid.view(D, H, W), len(events), int(events["t"][0]), int(events["t"][-1]))


class Windows(NamedTuple):
    windows: list
    dropped: int


def chunk_stream(events, N):
    """Consecutive, non-overlapping windows of exactly N events; the short tail is dropped."""
    events = as_event_array(events)
    if N < 1:
        raise GraftkitError(f"window size must be >= 1, got {N}")
    count = len(events) // N
    windows = [events[k * N:(k + 1) * N] for k in range(count)]
    dropped = len(events) - count * N
    if dropped:
        logger.info(f"chunk_stream: {count} windows of {N} events, {dropped} trailing events dropped")
    return Windows(windows, dropped)


def parse_nmnist(data):
    """Decodes N-MNIST 5-byte records: x, y, then polarity bit and a 23-bit microsecond timestamp."""
    data = bytes(data)
    remainder = len(data) % NMNIST_RECORD_BYTES
    if remainder:
        offset = len(data) - remainder
        raise EventFormatError(f"truncated N-MNIST record at byte offset {offset}", offset)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, NMNIST_RECORD_BYTES).astype(np.int64)
    events = np.empty(len(raw), dtype=EVENT_DTYPE)
    events["x"] = raw[:, 0]
    events["y"] = raw[:, 1]
    events["p"] = np.where(raw[:, 2] >> 7, 1, -1)
    events["t"] = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    return events


def read_nmnist(path):
    return parse_nmnist(Path(path).read_bytes())


def read_events_csv(path):
    """Plain-text `t,x,y,p` events, with or without a header row."""
    with open(path) as f:
        first = f.readline()
    header = 0 if any(c.isalpha() for c in first) else None
    df = pd.read_csv(path, header=header, names=None if header == 0 else ["t", "x", "y", "p"])
    df.columns = [str(c).strip().lower() for c in df.columns]
    missing = {"t", "x", "y", "p"} - set(df.columns)
    if missing:
        raise EventFormatError(f"{path}: missing event columns {sorted(missing)}")
    return as_event_array(df[["t", "x", "y", "p"]].to_numpy())


def read_events(path):
    path = Path(path)
    if path.suffix.lower() == ".bin":
        return read_nmnist(path)
    return read_events_csv(path)


def center_crop_grid(grid, H, W):
    _, gh, gw = grid.slices.shape
    if H > gh or W > gw:
        raise GraftkitError(f"cannot crop a {gh}x{gw} grid to {H}x{W}")
    top, left = (gh - H) // 2, (gw - W) // 2
    return VoxelGrid(grid.slices[:, top:top + H, left:left + W].clone(), grid.num_events, grid.t_start, grid.t_end)


def save_voxel_grid(grid, path):
    """Writes the tensor blob and a JSON sidecar {D, H, W, N, t_start, t_end} next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(grid.slices, path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(grid.sidecar(), indent=2))
    return path, sidecar


def load_voxel_grid(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    slices = torch.load(path, map_location="cpu", weights_only=True)
    return VoxelGrid(slices, meta["N"], meta["t_start"], meta["t_end"])
