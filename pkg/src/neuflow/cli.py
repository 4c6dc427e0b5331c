"""Command-line entry point: ``neuflow {train,eval,infer,bench,viz,gen}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs go to stderr;
the first log line of every command is the full invocation.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import torch

from .config import ConfigError, NeuFlowConfig, load_config

log = logging.getLogger("neuflow")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2)
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> tuple[int, int]:
    """``WxH`` or a single integer for square images."""
    try:
        if "x" in text:
            w, h = (int(v) for v in text.lower().split("x"))
        else:
            w = h = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH or N, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return w, h


def _model_config(args) -> NeuFlowConfig:
    cfg = load_config(args.config, preset=args.preset)
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    return cfg


def _add_model_flags(p: argparse.ArgumentParser, default_preset: str = "base") -> None:
    p.add_argument("--config", help="YAML file with model settings")
    p.add_argument("--preset", choices=("base", "tiny"), default=default_preset)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def _dataset_spec(args, split: str = "train"):
    from .data import DatasetSpec

    return DatasetSpec(root=args.data, layout=args.layout, split=split, limit=args.limit,
                       sintel_pass=getattr(args, "sintel_pass", "clean"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic chairs-layout dataset")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=_size, default=(128, 128))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motion", choices=("mixed", "translation", "affine", "identity"), default="mixed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_model_flags(p, default_preset="tiny")
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=("chairs", "sintel"), default="chairs")
    p.add_argument("--val-data")
    p.add_argument("--limit", type=int)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume")
    p.add_argument("--out", default="runs/train")

    p = sub.add_parser("eval", help="EPE of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=("chairs", "sintel"), default="chairs")
    p.add_argument("--sintel-pass", choices=("clean", "final"), default="clean")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--limit", type=int)
    p.add_argument("--res", choices=("full", "eighth"), default="full")
    p.add_argument("--out", help="directory for the JSONL report")

    p = sub.add_parser("infer", help="flow between two images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--out", required=True, help="output .flo path; a colour PNG is written beside it")
    p.add_argument("--res", choices=("full", "eighth"), default="full")

    p = sub.add_parser("bench", help="forward-pass latency")
    _add_model_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--size", type=_size, default=(512, 384))
    p.add_argument("--res", choices=("full", "eighth", "both"), default="both")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", help="directory for JSONL and CSV reports")

    p = sub.add_parser("viz", help="colour-code a .flo file as PNG")
    p.add_argument("flo")
    p.add_argument("--out", required=True)
    p.add_argument("--max-radius", type=float)
    return parser


# -- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    from .data import generate_synthetic, save_chairs_layout

    w, h = args.size
    samples = generate_synthetic(args.seed, args.count, (h, w), args.motion)
    out = save_chairs_layout(samples, args.out)
    log.info("wrote %d synthetic pairs to %s", len(samples), out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import DatasetSpec
    from .training import Schedule, dataset_epe, fit

    cfg = _model_config(args)
    schedule = Schedule(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                        weight_decay=args.weight_decay, val_every=args.val_every, seed=args.seed)
    train_spec = _dataset_spec(args)
    val_spec = DatasetSpec(root=args.val_data, layout=args.layout, split="val") if args.val_data else None
    state = fit(cfg, train_spec, schedule, out_dir=args.out, val_dataset=val_spec, resume=args.resume)
    from .data import load_dataset

    train = load_dataset(train_spec)
    final = dataset_epe(state.model, [train[i] for i in range(len(train))])
    record = {"step": state.step, "final_train_epe": final}
    with open(Path(args.out) / "train_log.jsonl", "a") as fh:
        fh.write(json.dumps(record) + "\n")
    log.info("final train EPE %.4f after %d steps", final, state.step)
    print(json.dumps(record))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DatasetSpec
    from .evalbench import evaluate, write_jsonl
    from .model import default_device, load_checkpoint

    model, _ = load_checkpoint(args.ckpt, default_device())
    spec = DatasetSpec(root=args.data, layout=args.layout, split=args.split, limit=args.limit,
                       sintel_pass=args.sintel_pass)
    report = evaluate(model, spec, args.res)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_jsonl([report], Path(args.out) / "eval.jsonl")
    print(f"{report.dataset} {report.resolution}: mean EPE {report.mean_epe} over "
          f"{len(report.per_sample)} samples ({report.skipped} skipped)")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import flow_to_color, read_image, write_flo, write_image
    from .model import default_device, deterministic, load_checkpoint

    device = default_device()
    model, _ = load_checkpoint(args.ckpt, device)
    img1, img2 = read_image(args.img1), read_image(args.img2)
    full = args.res == "full"
    with torch.no_grad(), deterministic():
        pred = model(img1.to(device), img2.to(device), full)
    flow = (pred.flow_full if full else pred.flow8)[0].cpu().permute(1, 2, 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_flo(flow, out)
    write_image(flow_to_color(flow.numpy()), out.with_suffix(".png"))
    log.info("wrote %s and %s", out, out.with_suffix(".png"))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evalbench import benchmark, write_jsonl, write_scatter_csv
    from .model import NeuFlow, default_device, load_checkpoint

    device = default_device()
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt, device)
    else:
        model = NeuFlow(_model_config(args)).to(device)
    modes = {"full": [True], "eighth": [False], "both": [False, True]}[args.res]
    reports = [benchmark(model, args.size, full, args.runs, args.warmup) for full in modes]
    for r in reports:
        print(r.summary())
        print(r.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(reports, out / "bench.jsonl")
        write_scatter_csv(
            [{"name": "neuflow", "resolution": r.resolution, "epe": None, "latency_s": r.mean,
              "params": r.params} for r in reports],
            out / "bench.csv",
        )
    return EXIT_OK


def cmd_viz(args) -> int:
    from .data import flow_to_color, read_flo, write_image

    write_image(flow_to_color(read_flo(args.flo), args.max_radius), args.out)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "bench": cmd_bench, "viz": cmd_viz}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format='{"time": "%(asctime)s", "level": "%(levelname)s", "logger": "%(name)s", "msg": %(message)r}',
        style="%",
    )
    log.info("invocation: neuflow %s", shlex.join(argv))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            print(f"neuflow: {exc}", file=sys.stderr)
            return EXIT_USAGE
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed: %s", exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
