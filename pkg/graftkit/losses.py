"""Feature matching losses for grafting: reconstruction, evaluation and style terms.

All MSE reductions are means over every element. Gram matrices are summed over
the batch and are not normalized by spatial size.
"""
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from graftkit.errors import GraftkitError, ShapeMismatchError

LOSS_TERMS = ("frl", "fel", "fsl")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_h: float = 1e6
    gamma_r: float = 1e7

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_h", "gamma_r"):
            if getattr(self, name) < 0:
                raise GraftkitError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    frl: torch.Tensor
    fel: torch.Tensor
    fsl: torch.Tensor

    def as_floats(self):
        return {name: float(value.detach()) for name, value in self._asdict().items()}


def _mse(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} shape mismatch", a.shape, b.shape)
    return F.mse_loss(b, a, reduction="mean")


def frl(H, H_hat):
    """Feature reconstruction loss: MSE between front end features."""
    return _mse(H, H_hat, "FRL")


def fel(R, R_hat):
    """Feature evaluation loss: MSE between middle net features.

    `R_hat` must come from pushing the grafted features through the same frozen middle net.
    """
    return _mse(R, R_hat, "FEL")


def gram(F_):
    """Mean-subtracted Gram matrix, C x C, summed over the batch.

    Accepts (B, C, ...) features; each channel is flattened over its trailing
    dims and centred per sample before the inner products.
    """
    if F_.numel() == 0:
        raise GraftkitError("gram of an empty tensor")
    if F_.dim() < 2:
        raise GraftkitError(f"gram expects (batch, channels, ...) features, got shape {tuple(F_.shape)}")
    flat = F_.reshape(F_.shape[0], F_.shape[1], -1)
    centred = flat - flat.mean(dim=2, keepdim=True)
    return torch.einsum("bin,bjn->ij", centred, centred)


def fsl(H, H_hat, R, R_hat, gamma_h, gamma_r):
    """Feature style loss: weighted MSE between Gram matrices of both feature pairs."""
    if H.shape != H_hat.shape:
        raise ShapeMismatchError("FSL front features shape mismatch", H.shape, H_hat.shape)
    if R.shape != R_hat.shape:
        raise ShapeMismatchError("FSL middle features shape mismatch", R.shape, R_hat.shape)
    loss = H_hat.new_zeros(())
    # zero-weighted terms are skipped so they contribute exactly nothing
    if gamma_h:
        loss = loss + gamma_h * F.mse_loss(gram(H_hat), gram(H))
    if gamma_r:
        loss = loss + gamma_r * F.mse_loss(gram(R_hat), gram(R))
    return loss


def total_loss(H, H_hat, R, R_hat, weights, terms=LOSS_TERMS):
    """alpha*FRL + beta*FEL + FSL over the enabled `terms`.

    Disabled terms are still reported in the breakdown (computed without
    gradient) but add nothing to the total.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise GraftkitError(f"unknown loss terms {sorted(unknown)}")

    compute = {
        "frl": lambda: weights.alpha * frl(H, H_hat),
        "fel": lambda: weights.beta * fel(R, R_hat),
        "fsl": lambda: fsl(H, H_hat, R, R_hat, weights.gamma_h, weights.gamma_r),
    }
    values = {}
    total = H_hat.new_zeros(())
    for name in LOSS_TERMS:
        if name in terms:
            values[name] = compute[name]()
            total = total + values[name]
        else:
            with torch.no_grad():
                values[name] = compute[name]()
    return LossBreakdown(total=total, **values)
