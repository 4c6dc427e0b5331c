"""Shallow multi-scale CNN backbone.

Each image is downsampled into a 1/1 .. 1/16 pyramid. Every level runs
through its own two-convolution block whose stride brings the output to
1/8 scale (or keeps it at 1/16 for the last level). The four 1/8 outputs
are concatenated and fused into ``feat8``; a merge block combines the
pooled ``feat8`` with the 1/16 level into ``feat16``.

All tensors are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, NeuFlowConfig, group_count


@dataclass(frozen=True)
class PadSpec:
    """Edge-replicate padding added at the bottom/right of an image."""

    height: int
    width: int
    bottom: int = 0
    right: int = 0

    @property
    def padded_size(self) -> tuple[int, int]:
        return self.height + self.bottom, self.width + self.right

    def crop(self, x: torch.Tensor, scale: int = 1) -> torch.Tensor:
        """Crop a map at ``1/scale`` of the padded grid back to ``ceil(orig/scale)``."""
        h = -(-self.height // scale)
        w = -(-self.width // scale)
        return x[..., :h, :w]


@dataclass
class FeaturePyramid:
    feat16: torch.Tensor
    feat8: torch.Tensor
    feat8_up: torch.Tensor | None = None


def pad_to_multiple(
    img: torch.Tensor, multiple: int = 16, min_size: int = 0
) -> tuple[torch.Tensor, PadSpec]:
    """Replicate-pad bottom/right up to the next multiple (and at least ``min_size``)."""
    if multiple <= 0:
        raise ValueError(f"multiple must be positive, got {multiple}")
    h, w = img.shape[-2:]
    bottom = max(h + (-h) % multiple, min_size) - h
    right = max(w + (-w) % multiple, min_size) - w
    bottom += (-(h + bottom)) % multiple
    right += (-(w + right)) % multiple
    spec = PadSpec(height=h, width=w, bottom=bottom, right=right)
    if bottom == 0 and right == 0:
        return img, spec
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    x = F.pad(x, (0, right, 0, bottom), mode="replicate")
    return (x.squeeze(0) if squeeze else x), spec


def build_pyramid(img: torch.Tensor, levels: int = 5) -> list[torch.Tensor]:
    """Area-averaged pyramid at scales 1, 1/2, ..., 1/2**(levels-1)."""
    h, w = img.shape[-2:]
    factor = 2 ** (levels - 1)
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} is not divisible by {factor}; pad it first")
    out = [img]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], kernel_size=2, stride=2))
    return out


class CNNBlock(nn.Module):
    """Two convolutions, each followed by group normalization and ReLU.

    Strided blocks use a non-overlapping ``stride x stride`` first
    convolution so that the output grid tiles the input exactly. 3x3
    convolutions replicate edges, so constant input gives constant output.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, max_groups: int = 8):
        super().__init__()
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        if stride == 1:
            self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, padding_mode="replicate")
        else:
            self.conv1 = nn.Conv2d(in_channels, out_channels, stride, stride=stride)
        self.norm1 = nn.GroupNorm(group_count(out_channels, max_groups), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, padding_mode="replicate")
        self.norm2 = nn.GroupNorm(group_count(out_channels, max_groups), out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide input {h}x{w}")
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class Backbone(nn.Module):
    def __init__(self, config: NeuFlowConfig):
        super().__init__()
        self.config = config
        c = config.per_level_channels
        g = config.norm_groups
        # levels 1/1, 1/2, 1/4, 1/8 -> 1/8 grid
        self.level_blocks = nn.ModuleList(
            [CNNBlock(3, c[k], stride=8 // 2**k, max_groups=g) for k in range(4)]
        )
        self.level16 = CNNBlock(3, c[4], stride=1, max_groups=g)
        self.fuse8 = CNNBlock(sum(c[:4]), config.feature_dim, max_groups=g)
        self.merge16 = CNNBlock(config.feature_dim + c[4], config.feature_dim, max_groups=g)
        self.upsample_branch = CNNBlock(3, config.upsample_branch_dim, stride=8, max_groups=g)

    def blocks(self) -> list[CNNBlock]:
        return [m for m in self.modules() if isinstance(m, CNNBlock)]

    def extract_features(self, img: torch.Tensor) -> FeaturePyramid:
        pyramid = build_pyramid(img)
        at8 = [block(level) for block, level in zip(self.level_blocks, pyramid[:4])]
        feat8 = self.fuse8(torch.cat(at8, dim=1))
        lvl16 = self.level16(pyramid[4])
        feat16 = self.merge16(torch.cat([F.avg_pool2d(feat8, 2), lvl16], dim=1))
        return FeaturePyramid(feat16=feat16, feat8=feat8)

    def extract_upsample_features(self, img: torch.Tensor) -> torch.Tensor:
        return self.upsample_branch(img)

    def forward(self, img: torch.Tensor, with_upsample: bool = False) -> FeaturePyramid:
        pyr = self.extract_features(img)
        if with_upsample:
            pyr.feat8_up = self.extract_upsample_features(img)
        return pyr
