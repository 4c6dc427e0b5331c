"""Feature warping, 7x7 local correlation and delta-flow regression at 1/8 scale."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import coordinate_grid


def warp(feat: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``feat`` at ``x + flow(x)``; samples outside the map are zero.

    Written as an explicit four-corner gather so that zero flow returns
    ``feat`` bit-exactly.
    """
    b, c, h, w = feat.shape
    coords = coordinate_grid(b, h, w, device=feat.device, dtype=feat.dtype) + flow
    x, y = coords[:, 0], coords[:, 1]
    x0, y0 = torch.floor(x), torch.floor(y)
    fx, fy = x - x0, y - y0
    flat = feat.reshape(b, c, h * w)
    out = torch.zeros_like(flat)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(b, 1, h * w)
            weight = (wx * wy * inside).reshape(b, 1, h * w)
            out = out + weight * flat.gather(2, idx.expand(b, c, h * w))
    return out.reshape(b, c, h, w)


def local_correlation(f1: torch.Tensor, f2w: torch.Tensor, radius: int = 3) -> torch.Tensor:
    """Dot products with every neighbour in a ``(2r+1)**2`` window, scaled by ``1/sqrt(C)``.

    Channel ``(dy + r) * (2r + 1) + (dx + r)`` holds offset ``(dx, dy)``;
    out-of-bounds neighbours contribute zero.
    """
    b, c, h, w = f1.shape
    k = 2 * radius + 1
    padded = F.pad(f2w, (radius, radius, radius, radius))
    out = []
    for dy in range(k):
        for dx in range(k):
            shifted = padded[:, :, dy : dy + h, dx : dx + w]
            out.append((f1 * shifted).sum(dim=1))
    return torch.stack(out, dim=1) / math.sqrt(c)


class RefinementHead(nn.Module):
    """Regress a delta flow from ``concat(corr, feat1, coarse_flow)``.

    ``depth`` counts all convolutions, including the final zero-initialized
    two-channel projection, so a fresh head returns the coarse flow unchanged.
    """

    def __init__(self, corr_channels: int, feat_channels: int, width: int = 128, depth: int = 6):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = corr_channels + feat_channels + 2
        for _ in range(depth - 1):
            layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU()]
            c_in = width
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c_in, 2, 3, padding=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, corr: torch.Tensor, feat1: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        delta = self.proj(self.body(torch.cat([corr, feat1, coarse], dim=1)))
        return coarse + delta


def refine_flow(head: RefinementHead, corr: torch.Tensor, feat1: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
    return head(corr, feat1, coarse)
