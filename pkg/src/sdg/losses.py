"""Reconstruction and ranking losses with last/intermediate decomposition.

The reconstruction term is cosine-based, (1 - cos(x0_hat_i, x0_i))^2
averaged over valid positions, which makes it invariant to the scale of
either argument. The ranking term is BCE or BPR over per-position
positive/negative scores, split into a final-position part and an
intermediate-position part weighted by lambda_inter:

    l_task  = l_last + lambda_inter * l_inter
    l_total = l_task + lambda_diff * l_diff

All functions are pure and mask-aware: scores or vectors at invalid
positions can never move any loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

COS_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    l_diff: torch.Tensor
    l_last: torch.Tensor
    l_inter: torch.Tensor
    l_task: torch.Tensor
    l_total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {"diff": float(self.l_diff.detach()),
                "last": float(self.l_last.detach()),
                "inter": float(self.l_inter.detach()),
                "total": float(self.l_total.detach())}


def diff_loss(x0_hat: torch.Tensor, x0: torch.Tensor, mask: torch.Tensor,
              kind: str = "cosine") -> torch.Tensor:
    """Reconstruction error averaged over valid positions.

    kind="cosine": mean of (1 - cos(x0_hat_i, x0_i))^2, with the cosine of
    a zero vector defined as 0. kind="mse": mean squared error per valid
    position (ablation variant).
    """
    if x0_hat.shape != x0.shape:
        raise ValueError("x0_hat and x0 must have identical shapes")
    m = mask.to(x0.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("diff_loss requires at least one valid position")
    if kind == "cosine":
        dot = (x0_hat * x0).sum(dim=-1)
        denom = x0_hat.norm(dim=-1) * x0.norm(dim=-1)
        cos = dot / denom.clamp_min(COS_EPS)
        per_pos = (1.0 - cos) ** 2
    elif kind == "mse":
        per_pos = ((x0_hat - x0) ** 2).sum(dim=-1)
    else:
        raise ValueError(f"unknown diff loss kind: {kind!r}")
    # hard where (not multiply-by-zero) so non-finite values at masked
    # positions can neither move the loss nor poison gradients
    per_pos = torch.where(mask, per_pos, torch.zeros_like(per_pos))
    return per_pos.sum() / count


def _decompose(per_pos: torch.Tensor, mask: torch.Tensor):
    """Split (B, L) per-position terms into last and intermediate means.

    The final position must be valid for every row. The intermediate part
    averages over each row's valid positions i < L, then over the batch;
    rows without valid intermediate positions contribute zero.
    """
    if not bool(mask[:, -1].all()):
        raise ValueError("final position must be valid for every row")
    l_last = per_pos[:, -1].mean()
    inter = per_pos[:, :-1]
    inter = torch.where(mask[:, :-1], inter, torch.zeros_like(inter))
    counts = mask[:, :-1].sum(dim=1).to(per_pos.dtype)
    row_means = torch.where(counts > 0, inter.sum(dim=1) / counts.clamp_min(1.0),
                            torch.zeros_like(counts))
    return l_last, row_means.mean()


def task_loss_bce(scores_pos: torch.Tensor, scores_neg: torch.Tensor,
                  mask: torch.Tensor):
    """Point-wise BCE: -log sig(pos) - log(1 - sig(neg)) per position."""
    per_pos = -F.logsigmoid(scores_pos) - F.logsigmoid(-scores_neg)
    return _decompose(per_pos, mask)


def task_loss_bpr(scores_pos: torch.Tensor, scores_neg: torch.Tensor,
                  mask: torch.Tensor):
    """Pairwise BPR: -log sig(pos - neg) per position."""
    per_pos = -F.logsigmoid(scores_pos - scores_neg)
    return _decompose(per_pos, mask)


def total_loss(l_diff: torch.Tensor, l_last: torch.Tensor, l_inter: torch.Tensor,
               lambda_diff: float, lambda_inter: float) -> LossBreakdown:
    l_task = l_last + lambda_inter * l_inter
    return LossBreakdown(l_diff=l_diff, l_last=l_last, l_inter=l_inter,
                         l_task=l_task, l_total=l_task + lambda_diff * l_diff)
