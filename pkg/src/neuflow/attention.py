"""Global cross-attention, global matching and flow self-attention at 1/16 scale."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def coordinate_grid(batch: int, h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Pixel coordinates ``[B, 2, h, w]`` with channel 0 = x and channel 1 = y."""
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    return torch.stack([xs, ys]).unsqueeze(0).expand(batch, 2, h, w)


def position_encoding(channels: int, h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding ``[1, channels, h, w]``.

    Channels are split between the y and x axes; each axis gets
    interleaved sin/cos pairs at geometric frequencies. Odd leftovers are zero.
    """
    pe = torch.zeros(channels, h, w, device=device, dtype=dtype)
    per_axis = channels // 2
    pairs = per_axis // 2
    if pairs == 0:
        return pe.unsqueeze(0)
    freq = torch.exp(
        torch.arange(pairs, device=device, dtype=dtype) * (-math.log(10000.0) / pairs)
    )
    ys = torch.arange(h, device=device, dtype=dtype)[:, None] * freq  # [h, pairs]
    xs = torch.arange(w, device=device, dtype=dtype)[:, None] * freq  # [w, pairs]
    pe[0 : 2 * pairs : 2] = torch.sin(ys).T[:, :, None].expand(pairs, h, w)
    pe[1 : 2 * pairs : 2] = torch.cos(ys).T[:, :, None].expand(pairs, h, w)
    off = per_axis
    pe[off : off + 2 * pairs : 2] = torch.sin(xs).T[:, None, :].expand(pairs, h, w)
    pe[off + 1 : off + 2 * pairs : 2] = torch.cos(xs).T[:, None, :].expand(pairs, h, w)
    return pe.unsqueeze(0)


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)  # [B, hw, c]


def _untokens(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], h, w)


class CrossAttentionLayer(nn.Module):
    """Pre-norm single-head attention followed by a two-layer feed-forward."""

    def __init__(self, dim: int, ffn_dim: int):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def attention_weights(self, query: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        q = self.q_proj(self.norm1(query))
        k = self.k_proj(self.norm1(source))
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)

    def forward(self, query: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        """``query`` and ``source`` are token tensors ``[B, n, dim]``."""
        attn = self.attention_weights(query, source)
        v = self.v_proj(self.norm1(source))
        x = query + self.out_proj(attn @ v)
        return x + self.ffn(self.norm2(x))


class CrossAttentionStack(nn.Module):
    """Stacked cross-attention applied symmetrically to both feature maps.

    In each layer image one attends to image two and image two attends to
    image one with shared weights, both reading the previous layer's values.
    """

    def __init__(self, dim: int, ffn_dim: int, num_layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList([CrossAttentionLayer(dim, ffn_dim) for _ in range(num_layers)])

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if f1.shape != f2.shape:
            raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        b, _, h, w = f1.shape
        t1, t2 = _tokens(f1), _tokens(f2)
        for layer in self.layers:
            out = layer(torch.cat([t1, t2]), torch.cat([t2, t1]))
            t1, t2 = out[:b], out[b:]
        return _untokens(t1, h, w), _untokens(t2, h, w)


def matching_distribution(f1: torch.Tensor, f2: torch.Tensor, scale: float | None = None) -> torch.Tensor:
    """Softmax over all pixels of image two for every pixel of image one, ``[B, hw, hw]``."""
    c = f1.shape[1]
    scale = c ** -0.5 if scale is None else scale
    corr = _tokens(f1) @ _tokens(f2).transpose(1, 2) * scale
    return torch.softmax(corr, dim=-1)


def global_match(
    f1: torch.Tensor,
    f2: torch.Tensor,
    grid: torch.Tensor | None = None,
    scale: float | None = None,
) -> torch.Tensor:
    """Flow as the expected matched coordinate minus the pixel's own coordinate."""
    b, _, h, w = f1.shape
    if grid is None:
        grid = coordinate_grid(b, h, w, device=f1.device, dtype=f1.dtype)
    prob = matching_distribution(f1, f2, scale)
    coords = _tokens(grid)  # [B, hw, 2]
    matched = prob @ coords
    return _untokens(matched - coords, h, w)


class FlowSelfAttention(nn.Module):
    """Propagate flow along feature self-similarity.

    Only query and key are learned; the values are the flow vectors
    themselves, so every output vector is a convex combination of inputs.
    """

    def __init__(self, dim: int, scale: float | None = None):
        super().__init__()
        self.dim = dim
        self.scale = dim ** -0.5 if scale is None else scale
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)

    def attention_weights(self, feat: torch.Tensor) -> torch.Tensor:
        t = _tokens(feat)
        q, k = self.q_proj(t), self.k_proj(t)
        return torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)

    def forward(self, feat: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        h, w = feat.shape[-2:]
        out = self.attention_weights(feat) @ _tokens(flow)
        return _untokens(out, h, w)


def upsample_flow_2x(flow: torch.Tensor) -> torch.Tensor:
    return 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
