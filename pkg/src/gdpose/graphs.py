"""Neighborhood structures for diffusion and pose decoding.

Feature-map nodes are flattened image-major: node ``i * H * W + y * W + x`` is
cell ``(y, x)`` of image ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

TOPOLOGIES = ("complete", "grid", "self_cross", "chain")


class EmptyGraphError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionGraph:
    num_nodes: int
    neighborhoods: tuple[tuple[int, ...], ...]
    topology: str
    # Ordered directed edge sets (target, source); only set for self_cross.
    phase_schedule: tuple[frozenset[tuple[int, int]], ...] | None = None

    def __post_init__(self):
        if len(self.neighborhoods) != self.num_nodes:
            raise ValueError("one neighborhood per node required")
        for nbrs in self.neighborhoods:
            for j in nbrs:
                if not 0 <= j < self.num_nodes:
                    raise ValueError(f"neighbor index {j} out of range")

    def edges(self) -> set[tuple[int, int]]:
        return {(i, j) for i, nbrs in enumerate(self.neighborhoods) for j in nbrs}

    def undirected_edges(self) -> list[tuple[int, int]]:
        return sorted({(min(i, j), max(i, j)) for i, j in self.edges() if i != j})

    @cached_property
    def phase_masks(self) -> tuple[torch.Tensor, ...]:
        """Boolean adjacency ``mask[i, j]`` (j is a neighbor of i) per diffusion phase."""
        phases = self.phase_schedule if self.phase_schedule is not None else (self.edges(),)
        masks = []
        for edge_set in phases:
            m = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
            if edge_set:
                idx = np.array(sorted(edge_set))
                m[idx[:, 0], idx[:, 1]] = True
            masks.append(torch.from_numpy(m))
        return tuple(masks)


def build_complete_graph(num_nodes: int) -> DiffusionGraph:
    if num_nodes < 1:
        raise EmptyGraphError("complete graph needs at least one node")
    everyone = tuple(range(num_nodes))
    return DiffusionGraph(num_nodes, tuple(everyone for _ in range(num_nodes)), "complete")


def build_grid_graph(num_images: int, height: int = 1, width: int = 1) -> DiffusionGraph:
    """Stack of image grids: 4 in-image neighbors plus the same cell in adjacent images.

    With ``height == width == 1`` this is the chain over vector embeddings. A node
    with no neighbor at all (a single 1x1 image) keeps a self-loop so attention
    stays defined.
    """
    if min(num_images, height, width) < 1:
        raise EmptyGraphError("grid dimensions must be >= 1")
    hw = height * width
    nbrs = []
    for i in range(num_images):
        for y in range(height):
            for x in range(width):
                out = []
                for di, dy, dx in ((-1, 0, 0), (0, -1, 0), (0, 0, -1), (0, 0, 1), (0, 1, 0), (1, 0, 0)):
                    ii, yy, xx = i + di, y + dy, x + dx
                    if 0 <= ii < num_images and 0 <= yy < height and 0 <= xx < width:
                        out.append(ii * hw + yy * width + xx)
                if not out:
                    out.append(i * hw + y * width + x)
                nbrs.append(tuple(out))
    return DiffusionGraph(num_images * hw, tuple(nbrs), "grid")


def build_self_cross_schedule(num_images: int, cells_per_image: int = 1) -> DiffusionGraph:
    """Two-phase graph: complete within each image, then complete across images per cell."""
    if num_images < 1 or cells_per_image < 1:
        raise EmptyGraphError("self-cross graph needs at least one image and one cell")
    c = cells_per_image
    within = frozenset(
        (i * c + a, i * c + b) for i in range(num_images) for a in range(c) for b in range(c)
    )
    across = frozenset(
        (i * c + a, k * c + a) for a in range(c) for i in range(num_images) for k in range(num_images)
    )
    n = num_images * c
    union = within | across
    nbrs = tuple(tuple(sorted(j for (t, j) in union if t == i)) for i in range(n))
    return DiffusionGraph(n, nbrs, "self_cross", (within, across))


def build_pose_chain_graph(num_frames: int) -> DiffusionGraph:
    if num_frames < 1:
        raise EmptyGraphError("chain graph needs at least one frame")
    nbrs = tuple(tuple(j for j in (i - 1, i + 1) if 0 <= j < num_frames) for i in range(num_frames))
    return DiffusionGraph(num_frames, nbrs, "chain")


def build_graph(topology: str, num_images: int, height: int = 1, width: int = 1) -> DiffusionGraph:
    """Graph over ``num_images`` stacks of ``height x width`` cells for a named topology."""
    if topology == "complete":
        return build_complete_graph(num_images * height * width)
    if topology == "grid":
        return build_grid_graph(num_images, height, width)
    if topology == "self_cross":
        return build_self_cross_schedule(num_images, height * width)
    if topology == "chain":
        return build_pose_chain_graph(num_images)
    raise ValueError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
