"""Learned convex 8x upsampling of 1/8 flow."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

UP = 8
NEIGHBOURS = 9


class MaskHead(nn.Module):
    """Predict per-pixel convex weights ``[B, 64, 9, h, w]`` from the upsample branch and flow."""

    def __init__(self, feat_channels: int, width: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(feat_channels + 2, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, UP * UP * NEIGHBOURS, 1),
        )

    def forward(self, feat8_up: torch.Tensor, flow8: torch.Tensor) -> torch.Tensor:
        b, _, h, w = flow8.shape
        logits = self.net(torch.cat([feat8_up, flow8], dim=1))
        return torch.softmax(logits.view(b, UP * UP, NEIGHBOURS, h, w), dim=2)


def predict_mask(head: MaskHead, feat8_up: torch.Tensor, flow8: torch.Tensor) -> torch.Tensor:
    return head(feat8_up, flow8)


def _neighbourhoods(flow: torch.Tensor) -> torch.Tensor:
    """3x3 neighbours of each coarse pixel with edge replication, ``[B, 2, 9, h, w]``."""
    b, c, h, w = flow.shape
    padded = F.pad(flow, (1, 1, 1, 1), mode="replicate")
    return torch.stack(
        [padded[:, :, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)], dim=2
    )


def convex_upsample(flow8: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Full-resolution flow; each fine pixel is ``8 * sum_n w_n * flow8(n)``.

    ``mask`` is ``[B, 64, 9, h, w]`` with sub-pixel index ``sy * 8 + sx``.
    """
    b, _, h, w = flow8.shape
    if mask.shape != (b, UP * UP, NEIGHBOURS, h, w):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match flow {tuple(flow8.shape)}")
    nb = _neighbourhoods(UP * flow8)  # [B, 2, 9, h, w]
    up = torch.einsum("bsnhw,bcnhw->bcshw", mask, nb)  # [B, 2, 64, h, w]
    up = up.view(b, 2, UP, UP, h, w).permute(0, 1, 4, 2, 5, 3)
    return up.reshape(b, 2, h * UP, w * UP)
