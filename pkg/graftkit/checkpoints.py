"""Checkpoint containers for pretrained backbones and grafted networks (torch.save based)."""
import logging
from dataclasses import asdict
from pathlib import Path

import torch

from graftkit.backbones import build_backbone
from graftkit.errors import GraftkitError
from graftkit.losses import LossWeights
from graftkit.model_graph import GraftedModel, SplitSpec, build_grafted_frontend, split

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_backbone(chain, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": FORMAT_VERSION, "backbone": chain.meta, "state_dict": chain.state_dict()}, path)
    logger.info(f"Saved backbone {chain.meta.get('name')} to {path}")
    return path


def _check_version(blob, path):
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise GraftkitError(f"{path}: unsupported checkpoint format version {version!r}")


def load_backbone(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    _check_version(blob, path)
    chain = build_backbone(**blob["backbone"])
    chain.load_state_dict(blob["state_dict"])
    chain.eval()
    return chain


def save_checkpoint(path, model, spec, loss_weights, backbone_meta, extra=None):
    """Stores format version, split indices, per-part parameter blobs and the loss weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "split": list(spec.as_tuple()),
        "backbone": dict(backbone_meta),
        "in_channels": model.gn_front.input_shape[0] if model.gn_front.input_shape else None,
        "parts": {
            "gn_front": model.gn_front.state_dict(),
            "mid": model.mid.state_dict(),
            "last": model.last.state_dict(),
        },
        "loss_weights": asdict(loss_weights),
        "extra": dict(extra or {}),
    }
    torch.save(blob, path)
    logger.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path):
    """Rebuilds the grafted network; returns (model, spec, loss_weights, blob)."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    _check_version(blob, path)
    spec = SplitSpec(*blob["split"])
    chain = build_backbone(**blob["backbone"])
    front, mid, last = split(chain, spec)
    in_channels = blob["in_channels"] or chain.input_shape[0]
    gn_front = build_grafted_frontend(front, in_channels, seed=0)
    gn_front.load_state_dict(blob["parts"]["gn_front"])
    mid.load_state_dict(blob["parts"]["mid"])
    last.load_state_dict(blob["parts"]["last"])
    model = GraftedModel(gn_front, mid, last)
    model.eval()
    return model, spec, LossWeights(**blob["loss_weights"]), blob
