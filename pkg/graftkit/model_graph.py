"""Pretrained networks as chains of blocks: splitting, grafting and parameter accounting.

A network N is held as a `BlockChain` and cut by a `SplitSpec` (i, j) into the
front end N_f = blocks[0:i], the middle net N_mid = blocks[i:j] and the
remaining layers N_last = blocks[j:]. A `GraftedModel` runs a new, trainable
front end GN_f in place of N_f while N_mid and N_last stay frozen.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from graftkit.errors import GraftkitError, ShapeMismatchError, SplitError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    front_end: int
    mid_end: int

    def validate(self, n_blocks):
        if self.front_end <= 0:
            raise SplitError(f"front_end index {self.front_end} gives an empty front end (must be > 0)", self.front_end)
        if self.front_end > n_blocks:
            raise SplitError(f"front_end index {self.front_end} exceeds chain length {n_blocks}", self.front_end)
        if self.mid_end < self.front_end:
            raise SplitError(f"mid_end index {self.mid_end} is before front_end {self.front_end}", self.mid_end)
        if self.mid_end > n_blocks:
            raise SplitError(f"mid_end index {self.mid_end} exceeds chain length {n_blocks}", self.mid_end)
        return self

    def as_tuple(self):
        return (self.front_end, self.mid_end)


class BlockChain(nn.Module):
    """Ordered blocks applied one after another.

    `input_shape` is the per-sample (C, H, W) the chain expects, or None when unknown.
    Slicing returns a new chain that shares the block modules, so slices of a
    chain compute exactly what the chain computes.
    """

    def __init__(self, blocks=(), input_shape=None, meta=None):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.meta = dict(meta or {})

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return BlockChain(list(self.blocks)[index])
        return self.blocks[index]

    def param_counts(self):
        return [sum(p.numel() for p in block.parameters()) for block in self.blocks]

    @torch.no_grad()
    def output_shape(self, input_shape=None):
        """Per-sample output shape, found by a dry run on a zero batch of one."""
        input_shape = tuple(input_shape) if input_shape is not None else self.input_shape
        if input_shape is None:
            raise GraftkitError("chain has no input_shape; pass one explicitly")
        ref = next(self.parameters(), None)
        x = torch.zeros((1, *input_shape), dtype=ref.dtype if ref is not None else torch.float32)
        was_training = self.training
        self.eval()
        try:
            return tuple(self(x).shape[1:])
        finally:
            self.train(was_training)


def split(chain, spec):
    """Cuts `chain` into (front, mid, last) sharing the original block modules."""
    spec.validate(len(chain))
    i, j = spec.as_tuple()
    front = chain[:i]
    mid = chain[i:j]
    last = chain[j:]
    if chain.input_shape is not None:
        front.input_shape = chain.input_shape
        mid.input_shape = front.output_shape()
        last.input_shape = mid.output_shape() if len(mid) else mid.input_shape
    logger.debug(f"Split chain of {len(chain)} blocks at {spec.as_tuple()} -> {len(front)}/{len(mid)}/{len(last)}")
    return front, mid, last


class ParamCount(NamedTuple):
    count: int
    fraction: float | None


def count_params(chain, total=None):
    """Exact parameter count; `fraction` is relative to `total` when one is supplied."""
    count = sum(p.numel() for p in chain.parameters())
    fraction = None
    if total:
        fraction = count / total
    return ParamCount(count, fraction)


def _parent_and_name(root, dotted):
    parent = root
    *path, name = dotted.split(".")
    for part in path:
        parent = getattr(parent, part)
    return parent, name


def _rechannel(layer, in_channels):
    if isinstance(layer, nn.Conv2d):
        return nn.Conv2d(
            in_channels,
            layer.out_channels,
            kernel_size=layer.kernel_size,
            stride=layer.stride,
            padding=layer.padding,
            dilation=layer.dilation,
            groups=layer.groups,
            bias=layer.bias is not None,
            padding_mode=layer.padding_mode,
        )
    if isinstance(layer, nn.Linear):
        return nn.Linear(in_channels, layer.out_features, bias=layer.bias is not None)
    raise GraftkitError(f"cannot change the input channels of a {type(layer).__name__} layer")


@torch.no_grad()
def _fan_in_uniform_(module, generator):
    for layer in module.modules():
        weight = getattr(layer, "weight", None)
        if isinstance(weight, nn.Parameter) and weight.dim() > 1:
            bound = 1.0 / math.sqrt(weight[0].numel())
            for p in layer.parameters(recurse=False):
                p.copy_((torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 - 1) * bound)
        elif any(True for _ in layer.parameters(recurse=False)) and hasattr(layer, "reset_parameters"):
            layer.reset_parameters()


def build_grafted_frontend(front_template, in_channels, seed=0):
    """Fresh GN_f with the template's structure and `in_channels` modality channels.

    Every weight tensor and its bias are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    with a generator seeded by `seed`.
    """
    if in_channels < 1:
        raise GraftkitError(f"in_channels must be >= 1, got {in_channels}")
    if len(front_template) == 0:
        raise GraftkitError("front end template has no layers")

    gn_front = copy.deepcopy(front_template)
    first = next(
        ((name, m) for name, m in gn_front.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))),
        None,
    )
    if first is None:
        raise GraftkitError("front end template has no convolution or linear layer")
    name, layer = first
    parent, attr = _parent_and_name(gn_front, name)
    setattr(parent, attr, _rechannel(layer, in_channels))

    _fan_in_uniform_(gn_front, torch.Generator().manual_seed(seed))
    gn_front.requires_grad_(True)
    if front_template.input_shape is not None:
        gn_front.input_shape = (in_channels, *front_template.input_shape[1:])
    logger.info(f"Built grafted front end: {in_channels} input channels, {count_params(gn_front).count} parameters, seed {seed}")
    return gn_front


def clone_frontend(front):
    """Trainable deep copy of a front end (the identity graft)."""
    gn_front = copy.deepcopy(front)
    gn_front.requires_grad_(True)
    return gn_front


class GraftedModel(nn.Module):
    """GN = {GN_f, N_mid, N_last}; only `gn_front` is trainable."""

    def __init__(self, gn_front, mid, last):
        super().__init__()
        self.gn_front = gn_front
        self.mid = mid
        self.last = last
        for part in (self.mid, self.last):
            part.requires_grad_(False)
            part.eval()

    def train(self, mode=True):
        # frozen parts never leave eval mode
        self.gn_front.train(mode)
        self.mid.eval()
        self.last.eval()
        self.training = mode
        return self

    def forward(self, modality):
        return self.last(self.mid(self.gn_front(modality)))

    def check_training_input(self, input_shape):
        """Dry-runs N_mid(GN_f(x)) on one zero sample of `input_shape`; returns the front end output shape."""
        input_shape = tuple(input_shape)
        expected = self.mid.input_shape if len(self.mid) else self.last.input_shape
        try:
            produced = self.gn_front.output_shape(input_shape)
        except RuntimeError as e:
            raise ShapeMismatchError(
                f"grafted front end cannot take inputs of shape {input_shape} ({e})", expected, None
            ) from e
        try:
            self.mid.output_shape(produced)
        except RuntimeError as e:
            raise ShapeMismatchError(
                f"inputs of shape {input_shape} give front end features the middle net cannot take", expected, produced
            ) from e
        return produced

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_param_count(self):
        return sum(p.numel() for p in self.trainable_parameters())


def graft(gn_front, mid, last):
    """Builds the grafted network from a new front end and frozen copies of N_mid/N_last."""
    expected = mid.input_shape if len(mid) else last.input_shape
    if expected is not None:
        if gn_front.input_shape is None:
            raise ShapeMismatchError("grafted front end has no input_shape to check against the middle net", expected)
        produced = gn_front.output_shape()
        if produced != tuple(expected):
            raise ShapeMismatchError("grafted front end output does not fit the middle net input", expected, produced)
    model = GraftedModel(gn_front, copy.deepcopy(mid), copy.deepcopy(last))
    logger.info(
        f"Grafted network: {model.trainable_param_count()} trainable of "
        f"{sum(p.numel() for p in model.parameters())} parameters"
    )
    return model
