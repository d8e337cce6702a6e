"""Decodes front end features back into an intensity-like frame.

The frame is optimized directly: MSE(N_f(I_d), H_hat) + tv_weight * TV(I_d).
"""
import copy
import logging
from pathlib import Path
from typing import NamedTuple

import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image

from graftkit.config import DecodeConfig
from graftkit.errors import DivergenceError, GraftkitError, ShapeMismatchError

logger = logging.getLogger(__name__)


def tv(image):
    """Anisotropic total variation: sum of absolute horizontal and vertical neighbour differences."""
    w_var = (image[..., :, 1:] - image[..., :, :-1]).abs()
    h_var = (image[..., 1:, :] - image[..., :-1, :]).abs()
    return w_var.sum() + h_var.sum()


class DecodeResult(NamedTuple):
    image: torch.Tensor  # unclamped, (C, H, W) or (B, C, H, W) as the features
    objective: list
    mse: list


def decode_features(H_hat, front, cfg=None, image_shape=None):
    """Optimizes seeded uniform noise until the front end maps it onto `H_hat`."""
    cfg = cfg or DecodeConfig()
    image_shape = tuple(image_shape) if image_shape is not None else front.input_shape
    if image_shape is None:
        raise GraftkitError("decode_features needs the frame shape (front.input_shape or image_shape)")
    batched = H_hat.dim() == len(front.output_shape(image_shape)) + 1
    target = (H_hat if batched else H_hat.unsqueeze(0)).detach()

    front = copy.deepcopy(front).eval().requires_grad_(False)
    expected = (target.shape[0], *front.output_shape(image_shape))
    if tuple(target.shape) != expected:
        raise ShapeMismatchError("feature map does not match the front end output", expected, target.shape)

    generator = torch.Generator().manual_seed(cfg.seed)
    image = torch.rand((target.shape[0], *image_shape), generator=generator, dtype=target.dtype)
    image.requires_grad_(True)
    optimizer = torch.optim.Adam([image], lr=cfg.learning_rate)

    objective, mse_trace = [], []
    for iteration in range(cfg.iterations):
        optimizer.zero_grad()
        mse = F.mse_loss(front(image), target)
        loss = mse + cfg.tv_weight * tv(image) if cfg.tv_weight else mse
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite decoding objective at iteration {iteration}", iteration)
        loss.backward()
        optimizer.step()
        objective.append(float(loss.detach()))
        mse_trace.append(float(mse.detach()))

    with torch.no_grad():
        final_mse = F.mse_loss(front(image), target)
        final = final_mse + cfg.tv_weight * tv(image) if cfg.tv_weight else final_mse
    objective.append(float(final))
    mse_trace.append(float(final_mse))
    logger.info(f"Decoded features in {cfg.iterations} iterations: objective {objective[0]:.4g} -> {objective[-1]:.4g}")

    image = image.detach()
    return DecodeResult(image if batched else image[0], objective, mse_trace)


def export_image(image, path):
    """Clamps to [0, 1] and writes a PNG (first channel for >3 channels)."""
    image = image.detach().clamp(0, 1)
    if image.dim() == 4:
        image = image[0]
    if image.shape[0] not in (1, 3):
        image = image[:1]
    array = (image * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    if array.shape[-1] == 1:
        array = array[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def write_trace_csv(result, path):
    df = pd.DataFrame({"iteration": range(len(result.objective)), "objective": result.objective, "mse": result.mse})
    df.to_csv(path, index=False)
    return Path(path)
