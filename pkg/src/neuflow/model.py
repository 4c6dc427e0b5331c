"""Full NeuFlow forward pass, streaming inference, parameter accounting and checkpoints."""

from __future__ import annotations

import contextlib
import os
import pickle
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import torch
import torch.nn as nn

from .attention import (
    CrossAttentionStack,
    FlowSelfAttention,
    global_match,
    position_encoding,
    upsample_flow_2x,
)
from .backbone import Backbone, FeaturePyramid, PadSpec, pad_to_multiple
from .config import NeuFlowConfig
from .refinement import RefinementHead, local_correlation, warp
from .upsampler import MaskHead, convex_upsample

CHECKPOINT_FORMAT_VERSION = 1
DEVICE_ENV = "NEUFLOW_DEVICE"


class CheckpointError(RuntimeError):
    pass


def default_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV)
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    """Force deterministic kernels for the duration of the block."""
    prev = torch.are_deterministic_algorithms_enabled()
    prev_cudnn = torch.backends.cudnn.benchmark
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = False
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.backends.cudnn.benchmark = prev_cudnn


@dataclass
class FlowPrediction:
    """Flow at every output scale, each in pixels of its own grid; ``flow_full`` is optional."""

    flow16: torch.Tensor
    flow8: torch.Tensor
    flow_full: torch.Tensor | None = None


@dataclass
class StreamState:
    pyramid: FeaturePyramid | None = None
    pad: PadSpec | None = None
    frames: int = 0


@dataclass
class _Counters:
    backbone_calls: int = 0
    ops: dict[str, int] = field(default_factory=dict)

    def hit(self, name: str) -> None:
        self.ops[name] = self.ops.get(name, 0) + 1


class NeuFlow(nn.Module):
    def __init__(self, config: NeuFlowConfig | None = None):
        super().__init__()
        self.config = config = config or NeuFlowConfig.base()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone = Backbone(config)
            self.cross_attention = CrossAttentionStack(
                config.feature_dim, config.ffn_dim, config.cross_attention_layers
            )
            self.self_attention = nn.ModuleList(
                [
                    FlowSelfAttention(config.feature_dim, config.attention_scale)
                    for _ in range(config.self_attention_layers)
                ]
            )
            self.refinement = RefinementHead(
                config.correlation_channels,
                config.feature_dim,
                config.refinement_width,
                config.refinement_depth,
            )
            self.mask_head = MaskHead(config.upsample_branch_dim, config.mask_width)
        self.counters = _Counters()

    # -- helpers -----------------------------------------------------------

    @staticmethod
    def _batched(img: torch.Tensor) -> torch.Tensor:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        if img.dim() != 4 or img.shape[1] != 3:
            raise ValueError(f"expected image [B, 3, H, W] or [3, H, W], got {tuple(img.shape)}")
        if img.shape[-2] == 0 or img.shape[-1] == 0:
            raise ValueError("empty image")
        return img

    def encode(self, img: torch.Tensor, with_upsample: bool) -> tuple[FeaturePyramid, PadSpec]:
        padded, pad = pad_to_multiple(self._batched(img), 16, min_size=32)
        self.counters.backbone_calls += 1
        pyr = self.backbone.extract_features(padded)
        if with_upsample:
            self.counters.hit("extract_upsample_features")
            pyr.feat8_up = self.backbone.extract_upsample_features(padded)
        return pyr, pad

    def decode(
        self, pyr1: FeaturePyramid, pyr2: FeaturePyramid, pad: PadSpec, output_full: bool
    ) -> FlowPrediction:
        cfg = self.config
        f1, f2 = pyr1.feat16, pyr2.feat16
        _, c, h, w = f1.shape
        pe = position_encoding(c, h, w, device=f1.device, dtype=f1.dtype)
        f1, f2 = self.cross_attention(f1 + pe, f2 + pe)
        flow16 = global_match(f1, f2, scale=cfg.attention_scale)
        for layer in self.self_attention:
            flow16 = layer(f1 + pe, flow16)

        coarse8 = upsample_flow_2x(flow16)
        f2w = warp(pyr2.feat8, coarse8)
        corr = local_correlation(pyr1.feat8, f2w, cfg.correlation_radius)
        flow8 = self.refinement(corr, pyr1.feat8, coarse8)

        flow_full = None
        if output_full:
            if pyr1.feat8_up is None:
                raise ValueError("full-resolution output needs the upsample features of image one")
            self.counters.hit("predict_mask")
            mask = self.mask_head(pyr1.feat8_up, flow8)
            self.counters.hit("convex_upsample")
            flow_full = pad.crop(convex_upsample(flow8, mask), 1)
        return FlowPrediction(
            flow16=pad.crop(flow16, 16), flow8=pad.crop(flow8, 8), flow_full=flow_full
        )

    # -- public API ----------------------------------------------------------

    def forward(self, img1: torch.Tensor, img2: torch.Tensor, output_full: bool = True) -> FlowPrediction:
        img1, img2 = self._batched(img1), self._batched(img2)
        if img1.shape != img2.shape:
            raise ValueError(f"image sizes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
        pyr1, pad = self.encode(img1, with_upsample=output_full)
        pyr2, _ = self.encode(img2, with_upsample=False)
        return self.decode(pyr1, pyr2, pad, output_full)

    def forward_stream(
        self, state: StreamState | None, next_img: torch.Tensor, output_full: bool = True
    ) -> tuple[FlowPrediction | None, StreamState]:
        """Flow from the cached previous frame to ``next_img``; runs the backbone once.

        The first call only fills the cache and returns ``None``.
        """
        state = state or StreamState()
        pyr_next, pad = self.encode(next_img, with_upsample=output_full)
        pred = None
        if state.pyramid is not None:
            if state.pad != pad:
                raise ValueError("stream frames must all have the same size")
            prev = state.pyramid
            if output_full and prev.feat8_up is None:
                raise ValueError("cached frame lacks upsample features; restart the stream with output_full")
            pred = self.decode(prev, pyr_next, pad, output_full)
        return pred, StreamState(pyramid=pyr_next, pad=pad, frames=state.frames + 1)

    def parameter_breakdown(self) -> OrderedDict[str, int]:
        out: OrderedDict[str, int] = OrderedDict()
        for name, module in self.named_children():
            out[name] = sum(p.numel() for p in module.parameters())
        return out


def parameter_count(config: NeuFlowConfig) -> int:
    model = NeuFlow(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _atomic_save(obj: Any, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, model: NeuFlow, extra: dict[str, Any] | None = None) -> None:
    """Write config, named parameters and format version into one file."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": OrderedDict((k, v.detach().cpu().clone()) for k, v in model.state_dict().items()),
        "extra": extra or {},
    }
    _atomic_save(payload, path)


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, OSError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a NeuFlow checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return payload


def load_checkpoint(path: str | Path, device: torch.device | str | None = None) -> tuple[NeuFlow, dict[str, Any]]:
    payload = read_checkpoint(path)
    model = NeuFlow(NeuFlowConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["params"])
    if device is not None:
        model.to(device)
    model.eval()
    return model, payload.get("extra", {})
