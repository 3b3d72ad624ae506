"""Masked-report loss, masked-image loss, and their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    L_R: torch.Tensor
    L_I: torch.Tensor
    lam: float
    L: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_R": float(self.L_R.detach()), "L_I": float(self.L_I.detach()), "L": float(self.L.detach())}


def loss_report(log_probs: torch.Tensor, targets: torch.Tensor, check_normalized: bool = True) -> torch.Tensor:
    """Mean negative log-likelihood of the target token at each masked position.

    ``log_probs`` is (p, V), one row per masked token in the batch, and
    ``targets`` the (p,) true token ids. An empty batch gives 0.
    """
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if log_probs.shape[0] != targets.shape[0]:
        raise ValueError(f"{log_probs.shape[0]} distributions for {targets.shape[0]} targets")
    if targets.numel() == 0:
        return log_probs.sum() * 0.0
    if check_normalized:
        total = torch.logsumexp(log_probs.detach(), dim=-1).exp()
        if not torch.allclose(total, torch.ones_like(total), atol=1e-5, rtol=0):
            raise RuntimeError("predicted distributions are not normalized")
    return -log_probs.gather(1, targets[:, None]).mean()


def loss_image(predictions: torch.Tensor, targets: torch.Tensor, masked_positions: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel of every masked cell.

    ``predictions`` covers the full grid, (B, N, T); ``targets`` is (B, h, T)
    aligned with ``masked_positions`` (B, h). Visible cells never enter the
    mean. With no masked cells the loss is 0.
    """
    predictions, targets = _as_batch(predictions, 3), _as_batch(targets, 3)
    masked_positions = _as_batch(torch.as_tensor(masked_positions, dtype=torch.long), 2)
    if targets.numel() and (targets.min() < 0 or targets.max() > 1):
        raise ValueError("image targets must lie in [0, 1]")
    if masked_positions.shape[1] == 0:
        log.warning("no masked image patches in batch; L_I set to 0")
        return predictions.sum() * 0.0
    T = predictions.shape[-1]
    picked = predictions.gather(1, masked_positions.unsqueeze(-1).expand(-1, -1, T))
    if picked.shape != targets.shape:
        raise ValueError(f"targets {tuple(targets.shape)} do not match predictions {tuple(picked.shape)}")
    return ((picked - targets.to(picked.dtype)) ** 2).mean()


def _as_batch(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == ndim - 1 else x


def loss_total(L_R: torch.Tensor, L_I: torch.Tensor, lam: float = 1.0) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(L_R, L_I, lam, L_R + lam * L_I)
