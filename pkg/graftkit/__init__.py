"""graftkit: graft a new-modality front end onto a frozen pretrained network."""
from graftkit.losses import LossBreakdown, LossWeights, total_loss
from graftkit.model_graph import BlockChain, GraftedModel, SplitSpec, graft, split

__version__ = "0.1.0"

__all__ = [
    "BlockChain",
    "GraftedModel",
    "LossBreakdown",
    "LossWeights",
    "SplitSpec",
    "graft",
    "split",
    "total_loss",
]
