"""End-point-error evaluation and latency benchmarking."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSpec, FlowSample, load_dataset
from .model import FlowPrediction, NeuFlow, deterministic

log = logging.getLogger(__name__)

RESOLUTIONS = ("full", "eighth")


def epe(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None) -> float | None:
    """Mean Euclidean error over valid pixels; ``None`` when nothing is valid.

    Flows are ``[..., 2, H, W]``; ``valid`` is ``[..., H, W]``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = torch.linalg.vector_norm((pred - gt).double(), dim=-3)
    if valid is None:
        return float(err.mean())
    valid = valid.bool()
    if not valid.any():
        return None
    return float(err[valid].mean())


def downsample_gt(flow: torch.Tensor, valid: torch.Tensor, factor: int = 8) -> tuple[torch.Tensor, torch.Tensor]:
    """Ground truth on the ``1/factor`` grid: bilinear resampling, values divided by ``factor``.

    The grid is ``ceil(H / factor)``; a coarse pixel is valid only if every
    fine pixel it covers is valid.
    """
    h, w = flow.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    f = F.pad(flow[None], (0, pw, 0, ph), mode="replicate")[0] if (ph or pw) else flow
    v = F.pad(valid[None, None].float(), (0, pw, 0, ph))[0, 0] if (ph or pw) else valid.float()
    size = (f.shape[-2] // factor, f.shape[-1] // factor)
    coarse = F.interpolate(f[None], size=size, mode="bilinear", align_corners=False)[0] / factor
    cvalid = F.avg_pool2d(v[None, None], factor)[0, 0] >= 1.0
    return coarse, cvalid


@dataclass
class EpeReport:
    dataset: str
    resolution: str
    mean_epe: float | None
    per_sample: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    skipped: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


Predictor = Callable[[torch.Tensor, torch.Tensor, bool], FlowPrediction]


@torch.no_grad()
def evaluate(
    model: Predictor,
    dataset: DatasetSpec | Sequence[FlowSample],
    resolution: str = "full",
    device: torch.device | str | None = None,
) -> EpeReport:
    """Per-sample EPE at full or 1/8 resolution."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}")
    data = load_dataset(dataset) if isinstance(dataset, DatasetSpec) else dataset
    if len(data) == 0:
        raise ValueError("evaluation dataset is empty")
    name = getattr(data, "name", "") or "samples"
    if isinstance(model, torch.nn.Module):
        model.eval()
        if device is None:
            device = next(model.parameters()).device
    full = resolution == "full"
    report = EpeReport(dataset=name, resolution=resolution, mean_epe=None)
    with deterministic():
        for i in range(len(data)):
            s = data[i]
            pred = model(s.img1[None].to(device), s.img2[None].to(device), full)
            if full:
                out, gt, valid = pred.flow_full, s.flow, s.valid
            else:
                out = pred.flow8
                gt, valid = downsample_gt(s.flow, s.valid, 8)
            out = out[0].cpu()
            if out.shape != gt.shape:
                log.warning("sample %s: prediction %s vs gt %s, skipped", s.id, tuple(out.shape), tuple(gt.shape))
                report.skipped += 1
                continue
            value = epe(out, gt, valid)
            if value is None:
                report.skipped += 1
                continue
            report.per_sample.append(value)
            report.ids.append(s.id)
    if report.per_sample:
        report.mean_epe = float(np.mean(report.per_sample))
    return report


@dataclass
class BenchReport:
    size: tuple[int, int]  # (width, height)
    resolution: str
    warmup: int
    runs: int
    mean: float
    median: float
    p95: float
    params: int
    samples: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def summary(self) -> str:
        w, h = self.size
        return (
            f"{w}x{h} {self.resolution:>6}  mean {self.mean * 1e3:8.2f} ms  "
            f"median {self.median * 1e3:8.2f} ms  p95 {self.p95 * 1e3:8.2f} ms  "
            f"params {self.params / 1e6:.2f}M  ({self.runs} runs)"
        )


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


@torch.no_grad()
def benchmark(
    model: NeuFlow,
    size: tuple[int, int] = (512, 384),
    output_full: bool = True,
    runs: int = 10,
    warmup: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Wall-clock latency of one forward pass on random inputs.

    ``size`` is (width, height). Mixed precision is never enabled; the
    device is synchronised before and after every timed call.
    """
    if runs < 10:
        raise ValueError("runs must be >= 10")
    if warmup < 3:
        raise ValueError("warmup must be >= 3")
    model.eval()
    device = next(model.parameters()).device
    w, h = size
    gen = torch.Generator().manual_seed(seed)
    img1 = (torch.rand(1, 3, h, w, generator=gen) * 2 - 1).to(device)
    img2 = (torch.rand(1, 3, h, w, generator=gen) * 2 - 1).to(device)
    for _ in range(warmup):
        model(img1, img2, output_full)
    times = []
    for _ in range(runs):
        _sync(device)
        t0 = time.perf_counter()
        model(img1, img2, output_full)
        _sync(device)
        times.append(time.perf_counter() - t0)
    return BenchReport(
        size=(w, h),
        resolution="full" if output_full else "eighth",
        warmup=warmup,
        runs=runs,
        mean=statistics.fmean(times),
        median=statistics.median(times),
        p95=float(np.percentile(times, 95)),
        params=sum(p.numel() for p in model.parameters()),
        samples=times,
    )


def write_jsonl(records: Sequence[Any], path: str | Path) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def write_scatter_csv(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    """EPE-vs-latency rows (``name, resolution, epe, latency_s, fps, params``) for plotting."""
    fields = ["name", "resolution", "epe", "latency_s", "fps", "params"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            row = dict(row)
            lat = row.get("latency_s")
            row.setdefault("fps", 1.0 / lat if lat else None)
            writer.writerow({k: row.get(k) for k in fields})
