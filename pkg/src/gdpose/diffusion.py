"""Graph neural diffusion: attention cross-field, per-node self-field, fixed-step ODE solvers.

A diffusion block integrates the cross-diffusion field over ``[t0, t1]`` and
then the self-diffusion field over ``[t1, t2]``. States are tensors of shape
``(..., num_nodes, C)``; leading dimensions are independent samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor, nn

from .graphs import DiffusionGraph

SOLVERS = ("euler", "rk4")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    t0: float = 0.0
    t1: float = 1.0
    t2: float = 2.0
    solver: str = "euler"
    steps_per_unit: int = 5
    heads: int = 8
    dot_scaling: bool = False

    def __post_init__(self):
        if not self.t0 < self.t1 < self.t2:
            raise ValueError(f"integration times must increase: {self.t0}, {self.t1}, {self.t2}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.steps_per_unit < 1 or self.heads < 1:
            raise ValueError("steps_per_unit and heads must be >= 1")

    def steps_for(self, duration: float) -> int:
        return max(1, round(self.steps_per_unit * duration))


def _check_mask(mask: Tensor, num_nodes: int) -> None:
    if mask.shape != (num_nodes, num_nodes):
        raise ValueError(f"graph has {mask.shape[0]} nodes, state has {num_nodes}")
    if not bool(mask.any(dim=1).all()):
        raise ValueError("every node needs a non-empty neighborhood to normalize attention")


def _head_features(x: Tensor, weight: Tensor, bias: Tensor, num_heads: int) -> Tensor:
    c_out = weight.shape[0]
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"state width {x.shape[-1]} does not match head input width {weight.shape[1]}")
    if c_out % num_heads:
        raise ValueError(f"width {c_out} not divisible by {num_heads} heads")
    fc = x @ weight.transpose(0, 1) + bias
    # (..., n, K, C/K) -> (..., K, n, C/K)
    return fc.unflatten(-1, (num_heads, c_out // num_heads)).transpose(-3, -2)


def _attention(fc: Tensor, mask: Tensor, dot_scaling: bool) -> Tensor:
    logits = fc @ fc.transpose(-1, -2)
    if dot_scaling:
        logits = logits / math.sqrt(fc.shape[-1])
    logits = logits.masked_fill(~mask.to(fc.device), float("-inf"))
    return torch.softmax(logits, dim=-1)


def attention_weights(
    weight: Tensor, bias: Tensor, x: Tensor, mask: Tensor, num_heads: int = 1, dot_scaling: bool = False
) -> Tensor:
    """Dense attention ``a[..., k, i, j]``; zero outside the neighborhood of ``i``, rows sum to 1."""
    _check_mask(mask, x.shape[-2])
    return _attention(_head_features(x, weight, bias, num_heads), mask, dot_scaling)


def neighbor_weight_lists(weights: Tensor, graph: DiffusionGraph) -> list[list[float]]:
    """Per-node weight lists (ordered as the graph neighborhoods) from a 2-D attention matrix."""
    return [[float(weights[i, j]) for j in nbrs] for i, nbrs in enumerate(graph.neighborhoods)]


def cross_field(
    weight: Tensor, bias: Tensor, x: Tensor, mask: Tensor, num_heads: int = 1, dot_scaling: bool = False
) -> Tensor:
    """Attention-weighted neighbor aggregate of head features, heads concatenated back to width C."""
    _check_mask(mask, x.shape[-2])
    fc = _head_features(x, weight, bias, num_heads)
    weighted = _attention(fc, mask, dot_scaling) @ fc
    return weighted.transpose(-3, -2).flatten(-2)


def self_field(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, x: Tensor) -> Tensor:
    return torch.tanh(x @ w1.transpose(0, 1) + b1) @ w2.transpose(0, 1) + b2


def integrate(
    field: Callable[[Tensor], Tensor],
    x0: Tensor,
    t_start: float,
    t_end: float,
    solver: str = "euler",
    steps: int = 5,
) -> Tensor:
    """Fixed-step solution of the autonomous ODE ``dx/dt = field(x)``."""
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = (t_end - t_start) / steps
    x = x0
    for step in range(steps):
        if solver == "euler":
            x = x + h * field(x)
        elif solver == "rk4":
            k1 = field(x)
            k2 = field(x + 0.5 * h * k1)
            k3 = field(x + 0.5 * h * k2)
            k4 = field(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            raise ValueError(f"unknown solver {solver!r}")
        peak = x.detach().abs().max()
        if not torch.isfinite(peak) or peak > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"state diverged at step {step + 1}/{steps} (t={t_start + (step + 1) * h:.4g}, max |x|={float(peak):.3g})"
            )
    return x


class CrossDiffusion(nn.Module):
    """Multi-head attention field; head ``k`` owns output slice ``k`` of a C -> C linear map."""

    def __init__(self, channels: int, heads: int = 8):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.fc = nn.Linear(channels, channels)

    def forward(self, x: Tensor, mask: Tensor, dot_scaling: bool = False) -> Tensor:
        return cross_field(self.fc.weight, self.fc.bias, x, mask, self.heads, dot_scaling)


class SelfDiffusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self_field(self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, x)


class DiffusionBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 8):
        super().__init__()
        self.cross = CrossDiffusion(channels, heads)
        self.self_diffusion = SelfDiffusion(channels)

    def forward(self, x: Tensor, graph: DiffusionGraph, config: DiffusionConfig) -> Tensor:
        return diffusion_block(self, x, graph, config)

    @torch.no_grad()
    def zero_(self) -> DiffusionBlock:
        for p in self.parameters():
            p.zero_()
        return self


def integrate_cross(
    block: DiffusionBlock, x0: Tensor, graph: DiffusionGraph, config: DiffusionConfig
) -> Tensor:
    """Cross-diffusion over ``[t0, t1]``; multi-phase graphs split the interval evenly."""
    masks = graph.phase_masks
    span = (config.t1 - config.t0) / len(masks)
    x = x0
    for n, mask in enumerate(masks):
        start = config.t0 + n * span
        x = integrate(
            lambda s, m=mask: block.cross(s, m, config.dot_scaling),
            x,
            start,
            start + span,
            config.solver,
            config.steps_for(span),
        )
    return x


def diffusion_block(block: DiffusionBlock, x0: Tensor, graph: DiffusionGraph, config: DiffusionConfig) -> Tensor:
    if x0.shape[-2] != graph.num_nodes:
        raise ValueError(f"state has {x0.shape[-2]} nodes, graph has {graph.num_nodes}")
    x = integrate_cross(block, x0, graph, config)
    return integrate(
        block.self_diffusion, x, config.t1, config.t2, config.solver, config.steps_for(config.t2 - config.t1)
    )


def cascaded_diffusion(
    blocks, h: Tensor, graph: DiffusionGraph, config: DiffusionConfig
) -> Tensor:
    blocks = list(blocks)
    if not blocks:
        raise ValueError("cascade needs at least one block")
    for block in blocks:
        h = diffusion_block(block, h, graph, config)
    return h
