"""scikit-learn style wrapper so the network plugs into estimator tooling.

``X`` holds image pairs as ``[n, 2, H, W, 3]`` arrays (uint8 0..255 or
floats already in [-1, 1]); ``y`` holds flows ``[n, H, W, 2]`` with NaN
marking pixels without ground truth.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import NeuFlowConfig
from .data import FlowSample
from .evalbench import downsample_gt, epe
from .model import NeuFlow, default_device, deterministic
from .training import Schedule, fit


def check_image_pairs(X) -> torch.Tensor:
    """Validate image pairs and return float32 ``[n, 2, 3, H, W]`` in [-1, 1]."""
    arr = np.asarray(X)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[1] != 2 or arr.shape[-1] != 3:
        raise ValueError(f"X must have shape [n, 2, H, W, 3], got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[2] == 0 or arr.shape[3] == 0:
        raise ValueError("X is empty")
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 127.5 - 1.0
    elif np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)):
            raise ValueError("X contains NaN or Inf")
        if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValueError("float images must lie in [-1, 1]; pass uint8 for 0..255 data")
        out = arr.astype(np.float32)
    else:
        raise ValueError(f"unsupported image dtype {arr.dtype}")
    return torch.from_numpy(np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)))


def check_flow_targets(y, n: int, size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Validate flows against ``n`` pairs of ``size``; returns ``([n,2,H,W], valid [n,H,W])``."""
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape != (n, size[0], size[1], 2):
        raise ValueError(f"y must have shape {(n, *size, 2)}, got {arr.shape}")
    if np.isinf(arr).any():
        raise ValueError("y contains Inf; use NaN for unknown flow")
    valid = ~np.isnan(arr).any(axis=-1)
    flow = np.nan_to_num(arr, nan=0.0).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(flow)), torch.from_numpy(valid)


class NeuFlowEstimator(BaseEstimator):
    """Optical-flow regressor with ``fit``/``predict``/``score``.

    ``score`` returns the negative mean end-point error so that larger is
    better, as model-selection utilities expect.
    """

    def __init__(
        self,
        preset: str = "tiny",
        config_overrides: dict | None = None,
        steps: int = 2000,
        batch_size: int = 4,
        lr: float = 4e-4,
        weight_decay: float = 1e-4,
        resolution: str = "full",
        seed: int = 0,
        device: str | None = None,
    ):
        self.preset = preset
        self.config_overrides = config_overrides
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.resolution = resolution
        self.seed = seed
        self.device = device

    def _config(self) -> NeuFlowConfig:
        overrides = dict(self.config_overrides or {})
        overrides.setdefault("seed", self.seed)
        if self.preset == "base":
            return NeuFlowConfig.base(**overrides)
        if self.preset == "tiny":
            return NeuFlowConfig.tiny(**overrides)
        raise ValueError(f"unknown preset {self.preset!r}")

    def fit(self, X, y):
        pairs = check_image_pairs(X)
        flow, valid = check_flow_targets(y, pairs.shape[0], tuple(pairs.shape[-2:]))
        samples = [
            FlowSample(pairs[i, 0], pairs[i, 1], flow[i], valid[i], f"fit-{i:04d}")
            for i in range(pairs.shape[0])
        ]
        schedule = Schedule(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                            weight_decay=self.weight_decay, seed=self.seed, log_every=0)
        state = fit(self._config(), samples, schedule, device=self.device or default_device())
        self.model_ = state.model.eval()
        self.config_ = state.model.config
        self.history_ = state.history
        self.n_pairs_fit_ = len(samples)
        return self

    def _check_resolution(self) -> bool:
        if self.resolution not in ("full", "eighth"):
            raise ValueError(f"resolution must be 'full' or 'eighth', got {self.resolution!r}")
        return self.resolution == "full"

    @torch.no_grad()
    def predict(self, X) -> np.ndarray:
        """Flow ``[n, H, W, 2]`` (or the 1/8 grid when ``resolution='eighth'``)."""
        check_is_fitted(self, "model_")
        full = self._check_resolution()
        pairs = check_image_pairs(X)
        model: NeuFlow = self.model_
        device = next(model.parameters()).device
        out = []
        with deterministic():
            for i in range(pairs.shape[0]):
                pred = model(pairs[i, 0].to(device), pairs[i, 1].to(device), full)
                f = pred.flow_full if full else pred.flow8
                out.append(f[0].cpu().permute(1, 2, 0).numpy())
        return np.stack(out)

    def score(self, X, y) -> float:
        full = self._check_resolution()
        pairs = check_image_pairs(X)
        flow, valid = check_flow_targets(y, pairs.shape[0], tuple(pairs.shape[-2:]))
        pred = torch.from_numpy(self.predict(X)).permute(0, 3, 1, 2)
        errors = []
        for i in range(pairs.shape[0]):
            gt, v = (flow[i], valid[i]) if full else downsample_gt(flow[i], valid[i], 8)
            value = epe(pred[i], gt, v)
            if value is not None:
                errors.append(value)
        if not errors:
            raise ValueError("no valid ground-truth pixels to score against")
        return -float(np.mean(errors))
