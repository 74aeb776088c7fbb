"""Learnable-balance pose losses summed over decode layers and chain neighbors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .graphs import DiffusionGraph
from .model import relative_messages


class BalanceParams(nn.Module):
    """Learnable log-weights: alpha/beta for absolute, gamma/lambda for relative terms."""

    def __init__(self, alpha: float = 0.0, beta: float = -3.0, gamma: float = 0.0, lam: float = -3.0):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.beta = nn.Parameter(torch.tensor(float(beta)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma)))
        self.lam = nn.Parameter(torch.tensor(float(lam)))

    @classmethod
    def from_config(cls, loss_cfg) -> BalanceParams:
        return cls(loss_cfg.init_alpha, loss_cfg.init_beta, loss_cfg.init_gamma, loss_cfg.init_lambda)


@dataclass
class LossBreakdown:
    absolute: dict[str, Tensor] = field(default_factory=dict)
    relative: dict[str, Tensor] = field(default_factory=dict)
    total: Tensor | None = None


def _residual_norm(a: Tensor, b: Tensor, norm: str) -> Tensor:
    diff = a - b
    if norm == "l1":
        return diff.abs().sum(dim=-1)
    if norm == "l2":
        return diff.norm(dim=-1)
    raise ValueError(f"unknown norm {norm!r}")


def balanced_term(pred: Tensor, target: Tensor, log_wt: Tensor, log_wr: Tensor, norm: str = "l1") -> Tensor:
    """``|d - d*| exp(-s_t) + s_t + |r - r*| exp(-s_r) + s_r`` per pose (last axis = 3 + rot)."""
    t = _residual_norm(pred[..., :3], target[..., :3], norm)
    r = _residual_norm(pred[..., 3:], target[..., 3:], norm)
    return t * torch.exp(-log_wt) + log_wt + r * torch.exp(-log_wr) + log_wr


def absolute_pose_loss(pred: Tensor, target: Tensor, bp: BalanceParams, norm: str = "l1") -> Tensor:
    return balanced_term(pred, target, bp.alpha, bp.beta, norm)


def relative_pose_loss(pred_rel: Tensor, target_rel: Tensor, bp: BalanceParams, norm: str = "l1") -> Tensor:
    return balanced_term(pred_rel, target_rel, bp.gamma, bp.lam, norm)


def total_loss(
    decoded: dict[str, dict[str, Tensor]],
    targets: Tensor,
    bp: BalanceParams,
    chain: DiffusionGraph,
    layers=None,
    norm: str = "l1",
) -> LossBreakdown:
    """Sum of absolute terms over frames and relative terms over directed chain pairs, per layer.

    ``targets`` is ``(..., N, 3 + rot)``; leading batch dimensions are summed too.
    """
    layers = tuple(decoded) if layers is None else tuple(layers)
    missing = [l for l in layers if l not in decoded]
    if missing:
        raise KeyError(f"decoded output lacks configured layers {missing}")
    target_rel, _ = relative_messages(targets, chain)
    out = LossBreakdown()
    for layer in layers:
        out.absolute[layer] = absolute_pose_loss(decoded[layer]["absolute"], targets, bp, norm).sum()
        rel = decoded[layer]["relative"]
        if rel.shape[-2]:
            out.relative[layer] = relative_pose_loss(rel, target_rel, bp, norm).sum()
    out.total = sum(out.absolute.values()) + sum(out.relative.values())
    return out
