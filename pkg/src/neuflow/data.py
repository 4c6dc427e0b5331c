"""Flow files, dataset layouts, the synthetic ground-truth generator and flow colouring."""

from __future__ import annotations

import logging
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
# Middlebury convention: components above this mark unknown flow
UNKNOWN_FLOW_THRESH = 1e9
UNKNOWN_FLOW = 1e10


class FloFormatError(ValueError):
    """Header does not describe a .flo file."""


class FloCorruptError(ValueError):
    """Header is readable but dimensions or payload are broken."""


# --------------------------------------------------------------------------
# .flo files


def read_flo(path: str | os.PathLike) -> np.ndarray:
    """Read a Middlebury ``.flo`` file into a float32 ``[H, W, 2]`` array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FloCorruptError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = np.frombuffer(raw, "<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FloFormatError(f"{path}: bad magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw, "<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FloCorruptError(f"{path}: degenerate dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FloCorruptError(f"{path}: expected {expected} bytes for {w}x{h}, found {len(raw)}")
    data = np.frombuffer(raw, "<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).astype(np.float32)


def write_flo(flow: np.ndarray | torch.Tensor, path: str | os.PathLike) -> None:
    """Write ``[H, W, 2]`` flow atomically (temp file + rename)."""
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be [H, W, 2], got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains NaN or Inf")
    h, w = flow.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("flow is empty")
    path = Path(path)
    payload = (
        np.array([FLO_MAGIC], "<f4").tobytes()
        + np.array([w, h], "<i4").tobytes()
        + np.ascontiguousarray(flow, dtype="<f4").tobytes()
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# images


def read_image(path: str | os.PathLike) -> torch.Tensor:
    """Decode to float RGB ``[3, H, W]`` in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{path}: empty image")
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def write_image(img: torch.Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write ``[3, H, W]`` in [-1, 1] or ``[H, W, 3]`` uint8."""
    if isinstance(img, torch.Tensor):
        arr = ((img.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
        arr = arr.permute(1, 2, 0).numpy()
    else:
        arr = np.asarray(img, dtype=np.uint8)
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# samples and datasets


@dataclass
class FlowSample:
    img1: torch.Tensor  # [3, H, W], [-1, 1]
    img2: torch.Tensor
    flow: torch.Tensor  # [2, H, W], pixels
    valid: torch.Tensor  # [H, W] bool
    id: str = ""

    def __post_init__(self) -> None:
        size = tuple(self.img1.shape[-2:])
        for name in ("img2", "flow", "valid"):
            if tuple(getattr(self, name).shape[-2:]) != size:
                raise ValueError(f"sample {self.id}: {name} size differs from img1 {size}")


def flow_sample_from_flo(img1: torch.Tensor, img2: torch.Tensor, flo: np.ndarray, sid: str) -> FlowSample:
    flow = torch.from_numpy(np.ascontiguousarray(flo)).permute(2, 0, 1)
    valid = (flow.abs() < UNKNOWN_FLOW_THRESH).all(dim=0)
    flow = torch.where(valid[None], flow, torch.zeros_like(flow))
    return FlowSample(img1, img2, flow, valid, sid)


LAYOUTS = ("chairs", "sintel", "synthetic")


@dataclass(frozen=True)
class DatasetSpec:
    root: str = "."
    layout: str = "chairs"
    split: str = "train"
    limit: int | None = None
    sintel_pass: str = "clean"
    # synthetic layout only
    seed: int = 0
    count: int = 16
    size: int | tuple[int, int] = 128
    motion: str = "mixed"

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")
        if self.limit is not None and self.limit < 1:
            raise ValueError("limit must be >= 1 when given")


class FlowDataset(Sequence[FlowSample]):
    """Lazy, ordered collection of samples.

    ``entries`` holds ``(id, loader)`` pairs; ``errors`` lists entries that
    were skipped because a counterpart file was missing.
    """

    def __init__(self, entries, errors: list[str] | None = None, name: str = ""):
        self._entries = list(entries)
        self.errors = errors or []
        self.name = name

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return FlowDataset(self._entries[i], self.errors, self.name)
        sid, loader = self._entries[i]
        sample = loader()
        sample.id = sid
        return sample

    @property
    def ids(self) -> list[str]:
        return [sid for sid, _ in self._entries]

    def __iter__(self) -> Iterator[FlowSample]:
        for i in range(len(self)):
            yield self[i]


class _MemoryLoader:
    def __init__(self, sample: FlowSample):
        self.sample = sample

    def __call__(self) -> FlowSample:
        return self.sample


class _FileLoader:
    def __init__(self, img1: Path, img2: Path, flo: Path):
        self.paths = (img1, img2, flo)

    def __call__(self) -> FlowSample:
        img1, img2, flo = self.paths
        return flow_sample_from_flo(read_image(img1), read_image(img2), read_flo(flo), "")


def _chairs_entries(root: Path, split: str) -> tuple[list, list[str]]:
    errors = []
    groups: dict[str, dict[str, Path]] = {}
    pattern = re.compile(r"^(\d+)_(img1|img2|flow)\.(ppm|png|flo)$")
    for p in sorted(root.iterdir()):
        m = pattern.match(p.name)
        if m:
            groups.setdefault(m.group(1), {})[m.group(2)] = p
    ids = sorted(groups)
    split_file = root / "FlyingChairs_train_val.txt"
    if split_file.exists():
        labels = split_file.read_text().split()
        wanted = "1" if split == "train" else "2"
        ids = [sid for k, sid in enumerate(ids) if k < len(labels) and labels[k] == wanted]
    entries = []
    for sid in ids:
        g = groups[sid]
        missing = [k for k in ("img1", "img2", "flow") if k not in g]
        if missing:
            errors.append(f"{sid}: missing {', '.join(missing)}")
            continue
        entries.append((sid, _FileLoader(g["img1"], g["img2"], g["flow"])))
    return entries, errors


def _sintel_entries(root: Path, sintel_pass: str) -> tuple[list, list[str]]:
    errors = []
    entries = []
    image_root = root / sintel_pass
    flow_root = root / "flow"
    if not image_root.is_dir():
        return entries, errors
    for scene in sorted(p for p in image_root.iterdir() if p.is_dir()):
        frames = sorted(scene.glob("frame_*.png"))
        for a, b in zip(frames, frames[1:]):
            sid = f"{sintel_pass}/{scene.name}/{a.stem}"
            flo = flow_root / scene.name / f"{a.stem}.flo"
            if not flo.exists():
                errors.append(f"{sid}: missing {flo}")
                continue
            entries.append((sid, _FileLoader(a, b, flo)))
    return entries, errors


def load_dataset(spec: DatasetSpec) -> FlowDataset:
    """Resolve a dataset spec into an ordered, lazily loaded sequence."""
    if spec.layout == "synthetic":
        count = spec.count if spec.limit is None else min(spec.count, spec.limit)
        samples = generate_synthetic(spec.seed, count, spec.size, spec.motion)
        return FlowDataset([(s.id, _MemoryLoader(s)) for s in samples], name="synthetic")
    root = Path(spec.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if spec.layout == "chairs":
        entries, errors = _chairs_entries(root, spec.split)
    else:
        entries, errors = _sintel_entries(root, spec.sintel_pass)
    entries.sort(key=lambda e: e[0])
    for err in errors:
        log.warning("skipping sample %s", err)
    if not entries:
        log.warning("no samples found under %s (layout %s)", root, spec.layout)
    if spec.limit is not None:
        entries = entries[: spec.limit]
    return FlowDataset(entries, errors, name=f"{spec.layout}:{root.name}")


def save_chairs_layout(samples: Sequence[FlowSample], out_dir: str | os.PathLike) -> Path:
    """Write samples as ``NNNNN_img1.ppm``/``NNNNN_img2.ppm``/``NNNNN_flow.flo`` triples.

    Invalid pixels are stored with the Middlebury unknown-flow marker.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        stem = out / f"{k:05d}"
        write_image(s.img1, f"{stem}_img1.ppm")
        write_image(s.img2, f"{stem}_img2.ppm")
        flow = torch.where(s.valid[None], s.flow, torch.full_like(s.flow, UNKNOWN_FLOW))
        write_flo(flow.permute(1, 2, 0), f"{stem}_flow.flo")
    return out


# --------------------------------------------------------------------------
# synthetic ground truth


MOTIONS = ("translation", "affine", "identity", "mixed")


def _texture(gen: torch.Generator, height: int, width: int) -> torch.Tensor:
    """Multi-octave smooth colour noise ``[1, 3, height, width]`` roughly in [-1, 1]."""
    tex = torch.zeros(1, 3, height, width)
    amp = 1.0
    for cells in (4, 8, 16, 32):
        gh = max(2, height * cells // max(height, width))
        gw = max(2, width * cells // max(height, width))
        noise = torch.rand(1, 3, gh, gw, generator=gen) * 2 - 1
        tex += amp * F.interpolate(noise, size=(height, width), mode="bicubic", align_corners=True)
        amp *= 0.6
    return torch.tanh(1.5 * tex)


def _sample_texture(tex: torch.Tensor, origin: float, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of the texture at image coordinates (texture offset by ``origin``)."""
    th, tw = tex.shape[-2:]
    gx = 2.0 * (x + origin) / (tw - 1) - 1.0
    gy = 2.0 * (y + origin) / (th - 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)[None]
    return F.grid_sample(tex, grid, mode="bilinear", padding_mode="border", align_corners=True)[0]


def synthesize_pair(
    gen: torch.Generator,
    size: tuple[int, int],
    matrix: Sequence[Sequence[float]] = ((1.0, 0.0), (0.0, 1.0)),
    translation: Sequence[float] = (0.0, 0.0),
    sid: str = "",
) -> FlowSample:
    """Render a textured pair related by ``p2 = c + A (p1 - c) + t`` about the image centre.

    Both frames are lookups into the same continuous texture, so the
    ground-truth flow ``A p + b - p`` is exact by construction.
    """
    h, w = size
    a = torch.tensor(matrix, dtype=torch.float64)
    t = torch.tensor(translation, dtype=torch.float64)
    centre = torch.tensor([(w - 1) / 2.0, (h - 1) / 2.0], dtype=torch.float64)
    margin = int(math.ceil(max(h, w) * 0.5)) + 4
    tex = _texture(gen, h + 2 * margin, w + 2 * margin)

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    p = torch.stack([xs, ys], dim=-1)  # [h, w, 2]
    mapped = centre + (p - centre) @ a.T + t
    flow = (mapped - p).permute(2, 0, 1).float()

    # img2(q) = img1(T^-1 q)
    inv = torch.linalg.inv(a)
    src = centre + (p - centre - t) @ inv.T
    img1 = _sample_texture(tex, margin, xs.float(), ys.float())
    img2 = _sample_texture(tex, margin, src[..., 0].float(), src[..., 1].float())

    valid = (
        (mapped[..., 0] >= 0) & (mapped[..., 0] <= w - 1) & (mapped[..., 1] >= 0) & (mapped[..., 1] <= h - 1)
    )
    return FlowSample(img1, img2, flow, valid, sid)


def _random_motion(gen: torch.Generator, kind: str) -> tuple[list[list[float]], list[float]]:
    def u(lo: float, hi: float) -> float:
        return float(lo + (hi - lo) * torch.rand((), generator=gen, dtype=torch.float64))

    if kind == "identity":
        return [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]
    if kind == "translation":
        return [[1.0, 0.0], [0.0, 1.0]], [u(-16, 16), u(-16, 16)]
    # mild affine: rotation up to 3 degrees, scale within 3 %, small shear
    theta = math.radians(u(-3, 3))
    s = 1.0 + u(-0.03, 0.03)
    k = u(-0.02, 0.02)
    c, sn = math.cos(theta), math.sin(theta)
    a = [[s * c, -s * sn + k], [s * sn, s * c]]
    return a, [u(-8, 8), u(-8, 8)]


def generate_synthetic(
    seed: int, count: int, size: int | tuple[int, int] = 128, motion: str = "mixed"
) -> list[FlowSample]:
    """``count`` textured pairs with analytic ground truth.

    ``motion="mixed"`` cycles identity, translation, affine, translation so
    every set of four contains one identity pair.
    """
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if h % 16 or w % 16:
        raise ValueError(f"synthetic size must be a multiple of 16, got {h}x{w}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion {motion!r}; expected one of {MOTIONS}")
    gen = torch.Generator().manual_seed(seed)
    cycle = ("identity", "translation", "affine", "translation")
    samples = []
    for i in range(count):
        kind = cycle[i % 4] if motion == "mixed" else motion
        a, t = _random_motion(gen, kind)
        samples.append(synthesize_pair(gen, (h, w), a, t, sid=f"syn-{i:04d}"))
    return samples


# --------------------------------------------------------------------------
# visualisation


def make_colorwheel() -> np.ndarray:
    """Middlebury colour wheel, ``[55, 3]`` in 0..255."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(flow: np.ndarray | torch.Tensor, max_radius: float | None = None) -> np.ndarray:
    """Colour-code ``[H, W, 2]`` (or ``[2, H, W]`` tensor) flow as ``[H, W, 3]`` uint8.

    Hue follows the flow direction, saturation the magnitude relative to
    ``max_radius`` (default: the largest magnitude present). Zero is white.
    """
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
        if flow.ndim == 3 and flow.shape[0] == 2 and flow.shape[-1] != 2:
            flow = flow.transpose(1, 2, 0)
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains NaN or Inf")
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u**2 + v**2)
    if max_radius is None:
        max_radius = float(rad.max())
    if max_radius > 0:
        u, v, rad = u / max_radius, v / max_radius, rad / max_radius
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = ((1 - frac) * wheel[k0] + frac * wheel[k1]) / 255.0
    r = np.minimum(rad, 1.0)[..., None]
    col = 1 - r * (1 - col)
    col = np.where(rad[..., None] > 1, col * 0.75, col)
    return np.floor(255 * col + 0.5).astype(np.uint8)


__all__ = [
    "FLO_MAGIC",
    "DatasetSpec",
    "FloCorruptError",
    "FloFormatError",
    "FlowDataset",
    "FlowSample",
    "flow_to_color",
    "generate_synthetic",
    "load_dataset",
    "read_flo",
    "read_image",
    "save_chairs_layout",
    "synthesize_pair",
    "write_flo",
    "write_image",
]
