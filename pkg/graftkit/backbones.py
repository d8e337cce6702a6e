"""Reference backbones registered as block chains."""
import logging

from torch import nn

from graftkit.errors import GraftkitError
from graftkit.model_graph import BlockChain, SplitSpec

logger = logging.getLogger(__name__)

DEFAULT_SPLITS = {"lenet5": SplitSpec(2, 3)}


def lenet5(in_channels=1, input_size=28, num_classes=10):
    """LeNet-5 layout: two conv+pool blocks, then three fully connected blocks.

    The first convolution pads by 2 so a 28x28 input reaches a 5x5 map before
    the classifier. Widths (32 filters in the second convolution, 64 hidden
    units) put the two-block front end at about 5k of about 63k parameters.
    """
    side = ((input_size + 4 - 4) // 2 - 4) // 2
    if side < 1:
        raise GraftkitError(f"input_size {input_size} is too small for LeNet-5")
    blocks = [
        nn.Sequential(nn.Conv2d(in_channels, 6, kernel_size=5, padding=2), nn.ReLU(), nn.MaxPool2d(2)),
        nn.Sequential(nn.Conv2d(6, 32, kernel_size=5), nn.ReLU(), nn.MaxPool2d(2)),
        nn.Sequential(nn.Flatten(), nn.Linear(32 * side * side, 64), nn.ReLU()),
        nn.Sequential(nn.Linear(64, 84), nn.ReLU()),
        nn.Sequential(nn.Linear(84, num_classes)),
    ]
    return blocks


BACKBONES = {"lenet5": lenet5}


def build_backbone(name="lenet5", in_channels=1, input_size=28, num_classes=10):
    if name not in BACKBONES:
        raise GraftkitError(f"unknown backbone {name!r}; available: {sorted(BACKBONES)}")
    blocks = BACKBONES[name](in_channels=in_channels, input_size=input_size, num_classes=num_classes)
    meta = {"name": name, "in_channels": in_channels, "input_size": input_size, "num_classes": num_classes}
    chain = BlockChain(blocks, input_shape=(in_channels, input_size, input_size), meta=meta)
    logger.debug(f"Built backbone {meta}")
    return chain


def default_split(chain):
    return DEFAULT_SPLITS.get(chain.meta.get("name"), SplitSpec(1, min(2, len(chain))))


def split_variants(chain):
    """Three front-end depths x two middle-net depths, clipped to the chain length."""
    n = len(chain)
    variants = []
    for front in (1, 2, 3):
        for mid_depth in (1, 2):
            if front + mid_depth <= n:
                variants.append(SplitSpec(front, front + mid_depth))
    return variants
