"""End-to-end pose regression network.

Images pass through a 4-stage CNN, stage feature maps are diffused over a
graph spanning every cell of every frame, pooled into per-frame embeddings,
diffused again over the frame graph and decoded by branched MLP heads.
Tensors are channel-first: images ``(B, N, 3, H, W)``, maps ``(B, N, C, h, w)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .config import Config
from .diffusion import DiffusionBlock, DiffusionConfig, cascaded_diffusion, diffusion_block
from .graphs import DiffusionGraph, build_graph, build_pose_chain_graph
from .geometry import ROTATION_DIMS

STRIDES = (4, 8, 16, 32)
CHECKPOINT_MAGIC = b"GDP1"


class ShapeError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class StagedFeatures:
    stages: dict[int, Tensor]  # raw backbone maps per stage, (B, N, C_s, H_s, W_s)
    diffused: dict[int, Tensor]  # maps after feature diffusion, for diffused stages
    h: Tensor  # (B, N, C_4) embeddings after pooling and the vector cascade


def _conv_unit(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(min(4, c_out), c_out),
        nn.SiLU(),
    )


class Backbone(nn.Module):
    """Stem of stride 4 followed by three stride-2 stages."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.stages = nn.ModuleList(
            [
                nn.Sequential(_conv_unit(3, c1, 2), _conv_unit(c1, c1, 2)),
                nn.Sequential(_conv_unit(c1, c2, 2), _conv_unit(c2, c2, 1)),
                nn.Sequential(_conv_unit(c2, c3, 2), _conv_unit(c3, c3, 1)),
                nn.Sequential(_conv_unit(c3, c4, 2), _conv_unit(c4, c4, 1)),
            ]
        )

    @staticmethod
    def check_input(height: int, width: int) -> None:
        prev = 1
        for s, stride in enumerate(STRIDES, start=1):
            if height % stride or width % stride:
                raise ShapeError(
                    f"stage {s} needs input divisible by {stride} (factor {stride // prev} over the previous stage), "
                    f"got {height}x{width}"
                )
            prev = stride

    def stage(self, s: int, x: Tensor) -> Tensor:
        return self.stages[s - 1](x)


def global_avg_pool(feature_map: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``(..., C, H, W) -> (..., C)``."""
    return feature_map.mean(dim=(-2, -1))


class BranchedDecoder(nn.Module):
    """Separate translation/rotation MLP branches merged by one affine map."""

    def __init__(self, channels: int, rotation_dim: int = 3, branched: bool = True):
        super().__init__()
        self.branched = branched
        if branched:
            self.mlp_d = nn.Sequential(nn.Linear(channels, channels), nn.SiLU(), nn.Linear(channels, channels), nn.SiLU())
            self.mlp_r = nn.Sequential(nn.Linear(channels, channels), nn.SiLU(), nn.Linear(channels, channels), nn.SiLU())
        else:
            self.mlp = nn.Sequential(
                nn.Linear(channels, 2 * channels), nn.SiLU(), nn.Linear(2 * channels, 2 * channels), nn.SiLU()
            )
        self.out = nn.Linear(2 * channels, 3 + rotation_dim)

    def forward(self, h: Tensor) -> Tensor:
        if self.branched:
            z = torch.cat([self.mlp_d(h), self.mlp_r(h)], dim=-1)
        else:
            z = self.mlp(h)
        return self.out(z)


def branched_decode(h: Tensor, decoder: BranchedDecoder) -> Tensor:
    return decoder(h)


def feature_map_diffuse(
    maps: Tensor, block: DiffusionBlock, graph: DiffusionGraph, config: DiffusionConfig
) -> Tensor:
    """Diffuse ``(B, N, C, H, W)`` maps as one state of ``N*H*W`` nodes; shape is preserved."""
    b, n, c, hh, ww = maps.shape
    if graph.num_nodes != n * hh * ww:
        raise ValueError(f"graph has {graph.num_nodes} nodes, maps have {n}x{hh}x{ww}={n * hh * ww}")
    nodes = maps.permute(0, 1, 3, 4, 2).reshape(b, n * hh * ww, c)
    out = diffusion_block(block, nodes, graph, config)
    return out.reshape(b, n, hh, ww, c).permute(0, 1, 4, 2, 3)


def relative_messages(poses: Tensor, chain: DiffusionGraph) -> tuple[Tensor, list[tuple[int, int]]]:
    """Directed relative poses ``p[j] - p[i]`` for every chain neighbor ``j`` of ``i``."""
    pairs = [(i, j) for i, nbrs in enumerate(chain.neighborhoods) for j in nbrs]
    if not pairs:
        return poses.new_zeros(poses.shape[:-2] + (0, poses.shape[-1])), pairs
    src = torch.tensor([i for i, _ in pairs])
    dst = torch.tensor([j for _, j in pairs])
    return poses[..., dst, :] - poses[..., src, :], pairs


class PoseRegressor(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        m, d = config.model, config.diffusion
        self.diffusion_config = DiffusionConfig(d.t0, d.t1, d.t2, d.solver, d.steps_per_unit, d.heads, d.dot_scaling)
        self.topology = config.graph.topology
        self.decode_layers = tuple(config.loss.decode_layers)
        self.rotation_repr = config.loss.rotation_repr
        rot_dim = ROTATION_DIMS[self.rotation_repr]
        widths = tuple(m.widths)
        Backbone.check_input(config.data.image_height, config.data.image_width)

        self.backbone = Backbone(widths)
        self.feature_diffusion = nn.ModuleDict(
            {str(s): DiffusionBlock(widths[s - 1], d.heads) for s in sorted(m.diffusion_stages)}
        )
        self.vector_diffusion = nn.ModuleList([DiffusionBlock(widths[3], d.heads) for _ in range(d.vector_blocks)])
        in_width = {"3": widths[2], "4": widths[3], "L": widths[3]}
        self.decoders = nn.ModuleDict(
            {layer: BranchedDecoder(in_width[layer], rot_dim, m.branched_decoder) for layer in self.decode_layers}
        )
        self.register_buffer("translation_mean", torch.zeros(3))
        self.register_buffer("translation_scale", torch.ones(()))
        self._graphs: dict[tuple, DiffusionGraph] = {}

    def set_translation_stats(self, mean, scale) -> None:
        with torch.no_grad():
            self.translation_mean.copy_(torch.as_tensor(mean, dtype=self.translation_mean.dtype))
            self.translation_scale.copy_(torch.as_tensor(scale, dtype=self.translation_scale.dtype))

    def graph(self, num_images: int, height: int = 1, width: int = 1) -> DiffusionGraph:
        key = (num_images, height, width)
        if key not in self._graphs:
            self._graphs[key] = build_graph(self.topology, num_images, height, width)
        return self._graphs[key]

    def _as_window_batch(self, images: Tensor) -> tuple[Tensor, bool]:
        if images.dim() == 4:
            images = images.unsqueeze(0)
            single = True
        elif images.dim() == 5:
            single = False
        else:
            raise ShapeError(f"expected (N, 3, H, W) or (B, N, 3, H, W) images, got {tuple(images.shape)}")
        n = images.shape[1]
        if n < 1:
            raise ShapeError("a window needs at least one frame")
        if n > self.config.model.max_frames:
            raise ShapeError(f"window of {n} frames exceeds max_frames={self.config.model.max_frames}")
        Backbone.check_input(images.shape[-2], images.shape[-1])
        return images, single

    def extract(self, images: Tensor) -> StagedFeatures:
        """Backbone, feature-map diffusion, pooling and the vector-embedding cascade."""
        images, _ = self._as_window_batch(images)
        b, n = images.shape[:2]
        x = images.flatten(0, 1)
        stages, diffused = {}, {}
        for s in range(1, 5):
            x = self.backbone.stage(s, x)
            maps = x.unflatten(0, (b, n))
            stages[s] = maps
            if str(s) in self.feature_diffusion:
                g = self.graph(n, maps.shape[-2], maps.shape[-1])
                maps = feature_map_diffuse(maps, self.feature_diffusion[str(s)], g, self.diffusion_config)
                diffused[s] = maps
                x = maps.flatten(0, 1)
        h = global_avg_pool(diffused.get(4, stages[4]))
        if len(self.vector_diffusion):
            h = cascaded_diffusion(self.vector_diffusion, h, self.graph(n), self.diffusion_config)
        return StagedFeatures(stages, diffused, h)

    def _denormalize(self, raw: Tensor) -> Tensor:
        d = raw[..., :3] * self.translation_scale + self.translation_mean
        return torch.cat([d, raw[..., 3:]], dim=-1)

    def decode_layer(self, layer: str, features: StagedFeatures) -> Tensor:
        if layer not in self.decoders:
            raise KeyError(f"no decoder configured for layer {layer!r}")
        if layer == "L":
            inp = features.h
        else:
            s = int(layer)
            use_diffused = s == 4 or self.config.model.decode_stage3_diffused
            maps = features.diffused[s] if use_diffused and s in features.diffused else features.stages[s]
            inp = global_avg_pool(maps)
        return self._denormalize(branched_decode(inp, self.decoders[layer]))

    def forward_levels(self, images: Tensor) -> dict[str, dict[str, Tensor]]:
        """Training path: absolute and chain-relative poses at every decode layer."""
        features = self.extract(images)
        return multi_level_decode(self, features, build_pose_chain_graph(features.h.shape[-2]))

    def forward(self, images: Tensor) -> Tensor:
        """Inference path: layer-L poses ``(..., N, 3 + rotation_dim)``."""
        images_b, single = self._as_window_batch(images)
        poses = self.decode_layer("L", self.extract(images_b))
        return poses[0] if single else poses


def multi_level_decode(
    model: PoseRegressor, features: StagedFeatures, chain: DiffusionGraph
) -> dict[str, dict[str, Tensor]]:
    out = {}
    for layer in model.decode_layers:
        absolute = model.decode_layer(layer, features)
        rel, pairs = relative_messages(absolute, chain)
        out[layer] = {"absolute": absolute, "relative": rel, "pairs": pairs}
    return out


def salience(model: PoseRegressor, images: Tensor) -> Tensor:
    """Per-pixel input-gradient magnitude of the predicted pose norm, min-max scaled to [0, 1]."""
    images = images.detach().clone().requires_grad_(True)
    poses = model(images)
    (grad,) = torch.autograd.grad(poses.norm(dim=-1).sum(), images)
    mag = grad.norm(dim=-3)
    lo = mag.amin(dim=(-2, -1), keepdim=True)
    hi = mag.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    return torch.where(span > 0, (mag - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(mag))


def save_checkpoint(path: str | Path, model: PoseRegressor, extra: dict | None = None) -> None:
    """Write ``GDP1`` + header length + JSON header (config echo) + npz tensor archive."""
    header = json.dumps({"format": 1, "config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[PoseRegressor, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a GDP1 checkpoint (magic {blob[:4]!r})")
    try:
        (n,) = struct.unpack("<Q", blob[4:12])
        header = json.loads(blob[12 : 12 + n])
        arrays = np.load(io.BytesIO(blob[12 + n :]))
        state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    except Exception as exc:
        raise CheckpointFormatError(f"{path}: corrupt GDP1 checkpoint ({exc})") from exc
    if header.get("format") != 1:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    model = PoseRegressor(Config.from_dict(header["config"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointFormatError(f"{path}: tensors do not match the config echo ({exc})") from exc
    return model, header
