"""Composite two-head training objective: total = L_low + lambda * L_high.

Both terms are pixel-mean MSE. The mean reduction (rather than a pixel sum)
keeps the weighting constant's meaning independent of patch size; with a
batch of equal-sized patches, mean-over-pixels-then-mean-over-batch equals
the plain mean over all elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_LAMBDA = 1e-4


@dataclass(frozen=True)
class LossConfig:
    """lambda_weight scales the full-resolution head's term."""

    lambda_weight: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError(f"lambda_weight must be >= 0, got {self.lambda_weight}")


def mse_map(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over all pixels of the squared difference."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} "
                         f"vs target {tuple(target.shape)}")
    return torch.mean((pred - target.to(pred.dtype)) ** 2)


def total_loss(density_low: torch.Tensor, density_high: torch.Tensor,
               gt_low: torch.Tensor, gt_high: torch.Tensor,
               config: LossConfig = LossConfig(),
               ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (total, loss_low, loss_high); total = low + lambda * high."""
    loss_low = mse_map(density_low, gt_low)
    loss_high = mse_map(density_high, gt_high)
    return loss_low + config.lambda_weight * loss_high, loss_low, loss_high
