"""Multi-scale supervised training at desk scale."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch
import torch.nn.functional as F

from .config import NeuFlowConfig
from .data import DatasetSpec, FlowSample, load_dataset
from .model import (
    FlowPrediction,
    NeuFlow,
    _atomic_save,
    default_device,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOSS_WEIGHTS = (0.2, 0.5, 1.0)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    l16: torch.Tensor
    l8: torch.Tensor
    lfull: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float] = LOSS_WEIGHTS
    empty_mask: bool = False

    def as_dict(self) -> dict[str, float]:
        return {
            "l16": float(self.l16.detach()),
            "l8": float(self.l8.detach()),
            "lfull": float(self.lfull.detach()),
            "total": float(self.total.detach()),
        }


def upsample_to(flow: torch.Tensor, scale: int, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear ``scale``-times upsampling with value scaling, cropped to ``size``."""
    if scale == 1:
        return flow[..., : size[0], : size[1]]
    up = scale * F.interpolate(flow, scale_factor=scale, mode="bilinear", align_corners=False)
    return up[..., : size[0], : size[1]]


def _masked_l1(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    err = (pred - gt).abs().sum(dim=1)  # [B, H, W]
    return (err * valid).sum() / valid.sum()


def multiscale_loss(
    pred: FlowPrediction,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    weights: Sequence[float] = LOSS_WEIGHTS,
) -> LossBreakdown:
    """Weighted mean-L1 of each prediction upsampled to the ground-truth grid.

    ``gt`` is ``[B, 2, H, W]``; ``valid`` is ``[B, H, W]``. A missing
    full-resolution prediction contributes zero.
    """
    size = tuple(gt.shape[-2:])
    if valid is None:
        valid = torch.ones(gt.shape[0], *size, dtype=torch.bool, device=gt.device)
    v = valid.to(gt.dtype)
    zero = gt.new_zeros(())
    w16, w8, wf = (float(w) for w in weights)
    if v.sum() == 0:
        log.warning("no valid pixels in batch; loss defined as zero")
        return LossBreakdown(zero, zero, zero, zero, (w16, w8, wf), empty_mask=True)
    l16 = _masked_l1(upsample_to(pred.flow16, 16, size), gt, v)
    l8 = _masked_l1(upsample_to(pred.flow8, 8, size), gt, v)
    lfull = _masked_l1(upsample_to(pred.flow_full, 1, size), gt, v) if pred.flow_full is not None else zero
    total = w16 * l16 + w8 * l8 + wf * lfull
    return LossBreakdown(l16, l8, lfull, total, (w16, w8, wf))


@dataclass
class Schedule:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 4e-4
    weight_decay: float = 1e-4
    clip: float = 1.0
    val_every: int = 0
    log_every: int = 50
    seed: int = 0


@dataclass
class TrainState:
    model: NeuFlow
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    schedule: Schedule
    step: int = 0
    best_val_epe: float = math.inf
    history: list[dict[str, Any]] = field(default_factory=list)


def _cosine(total: int):
    def factor(step: int) -> float:
        if total <= 0:
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))

    return factor


def init_state(config: NeuFlowConfig, schedule: Schedule, device: torch.device | str | None = None) -> TrainState:
    model = NeuFlow(config).to(device or default_device())
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _cosine(schedule.steps))
    return TrainState(model, opt, sched, schedule)


def collate(batch: Sequence[FlowSample], device: torch.device | str | None = None):
    if not batch:
        raise ValueError("empty batch")
    sizes = {tuple(s.img1.shape[-2:]) for s in batch}
    if len(sizes) != 1:
        raise ValueError(f"batch mixes image sizes {sorted(sizes)}")
    img1 = torch.stack([s.img1 for s in batch]).to(device)
    img2 = torch.stack([s.img2 for s in batch]).to(device)
    flow = torch.stack([s.flow for s in batch]).to(device)
    valid = torch.stack([s.valid for s in batch]).to(device)
    return img1, img2, flow, valid


def batch_epe(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> float:
    err = torch.linalg.vector_norm(pred - gt, dim=1)
    n = valid.sum()
    return float((err * valid).sum() / n) if n > 0 else float("nan")


def train_step(state: TrainState, batch: Sequence[FlowSample]) -> tuple[TrainState, LossBreakdown]:
    """One AdamW update with gradient-norm clipping.

    Raises ``NonFiniteLossError`` before touching the weights if the loss
    is NaN or infinite.
    """
    model = state.model
    device = next(model.parameters()).device
    img1, img2, gt, valid = collate(batch, device)
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    pred = model(img1, img2, output_full=True)
    loss = multiscale_loss(pred, gt, valid)
    if not torch.isfinite(loss.total):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {loss.as_dict()}")
    if loss.total.requires_grad:
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), state.schedule.clip)
        state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    with torch.no_grad():
        loss.train_epe = batch_epe(pred.flow_full, gt, valid)  # type: ignore[attr-defined]
    return state, loss


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Sample indices for ``step``; a pure function so resumed runs see the same batches."""
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, k = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed * 1_000_003 + epoch))
    return perm[k * batch_size : (k + 1) * batch_size].tolist()


def save_train_state(path: str | Path, state: TrainState) -> None:
    save_checkpoint(path, state.model, extra={"step": state.step, "best_val_epe": state.best_val_epe})
    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["optimizer"] = state.optimizer.state_dict()
    payload["scheduler"] = state.scheduler.state_dict()
    payload["schedule"] = dict(vars(state.schedule))
    _atomic_save(payload, path)


def load_train_state(path: str | Path, device: torch.device | str | None = None) -> TrainState:
    payload = read_checkpoint(path)
    if "optimizer" not in payload:
        raise ValueError(f"{path} holds model weights only, not a training state")
    schedule = Schedule(**payload["schedule"])
    state = init_state(NeuFlowConfig.from_dict(payload["config"]), schedule, device)
    state.model.load_state_dict(payload["params"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.scheduler.load_state_dict(payload["scheduler"])
    state.step = int(payload["extra"]["step"])
    state.best_val_epe = float(payload["extra"]["best_val_epe"])
    return state


@torch.no_grad()
def dataset_epe(model: NeuFlow, samples: Sequence[FlowSample], batch_size: int = 8) -> float:
    """Mean per-sample full-resolution EPE."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    epes = []
    for i in range(0, len(samples), batch_size):
        chunk = [samples[j] for j in range(i, min(i + batch_size, len(samples)))]
        img1, img2, gt, valid = collate(chunk, device)
        pred = model(img1, img2, output_full=True).flow_full
        for b in range(len(chunk)):
            epes.append(batch_epe(pred[b : b + 1], gt[b : b + 1], valid[b : b + 1]))
    model.train(was_training)
    epes = [e for e in epes if not math.isnan(e)]
    return sum(epes) / len(epes) if epes else float("nan")


def _retarget_schedule(state: TrainState, steps: int) -> None:
    """Stretch the cosine decay of a resumed run to a new total length."""
    log.warning("resuming with %d total steps instead of %d; cosine decay rescaled",
                steps, state.schedule.steps)
    state.schedule.steps = steps
    factor = _cosine(steps)
    state.scheduler = torch.optim.lr_scheduler.LambdaLR(state.optimizer, factor)
    state.scheduler.last_epoch = state.step
    for group, base in zip(state.optimizer.param_groups, state.scheduler.base_lrs):
        group["lr"] = base * factor(state.step)


def fit(
    config: NeuFlowConfig,
    dataset: DatasetSpec | Sequence[FlowSample],
    schedule: Schedule,
    out_dir: str | Path | None = None,
    val_dataset: DatasetSpec | Sequence[FlowSample] | None = None,
    resume: str | Path | None = None,
    device: torch.device | str | None = None,
    stop_at: int | None = None,
) -> TrainState:
    """Train for ``schedule.steps`` steps over seed-shuffled batches.

    With ``out_dir`` set, writes ``last.pt``, ``best.pt`` (by validation
    EPE, or training EPE when no validation set is given) and ``train_log.jsonl``.
    ``stop_at`` halts early without shortening the learning-rate schedule,
    which is how an interrupted run is reproduced.
    """
    train = load_dataset(dataset) if isinstance(dataset, DatasetSpec) else dataset
    if len(train) == 0:
        raise ValueError("training dataset is empty")
    samples = [train[i] for i in range(len(train))]
    val = load_dataset(val_dataset) if isinstance(val_dataset, DatasetSpec) else val_dataset
    val_samples = [val[i] for i in range(len(val))] if val is not None else samples

    state = load_train_state(resume, device) if resume else init_state(config, schedule, device)
    if resume and state.schedule.steps != schedule.steps:
        _retarget_schedule(state, schedule.steps)
    end = schedule.steps if stop_at is None else min(stop_at, schedule.steps)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train_log.jsonl", "a")
    try:
        while state.step < end:
            idx = batch_indices(len(samples), schedule.batch_size, schedule.seed, state.step)
            state, loss = train_step(state, [samples[i] for i in idx])
            record: dict[str, Any] = {"step": state.step, **loss.as_dict(), "val_epe": None}
            last = state.step == schedule.steps
            if (schedule.val_every and state.step % schedule.val_every == 0) or last:
                val_epe = dataset_epe(state.model, val_samples)
                record["val_epe"] = val_epe
                if val_epe < state.best_val_epe:
                    state.best_val_epe = val_epe
                    if out is not None:
                        save_train_state(out / "best.pt", state)
            record["train_epe"] = loss.train_epe  # type: ignore[attr-defined]
            state.history.append(record)
            if logf is not None:
                logf.write(json.dumps(record) + "\n")
            if schedule.log_every and (state.step % schedule.log_every == 0 or last):
                log.info(
                    "step %d total %.4f l16 %.4f l8 %.4f lfull %.4f epe %.3f",
                    state.step, record["total"], record["l16"], record["l8"], record["lfull"],
                    record["train_epe"],
                )
        if out is not None and state.step > 0:
            save_train_state(out / "last.pt", state)
    finally:
        if logf is not None:
            logf.close()
    return state
