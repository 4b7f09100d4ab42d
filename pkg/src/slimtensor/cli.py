"""Command-line entry point: ``slimtensor <command> [flags]``.

Exit codes: 0 success, 1 usage error (bad flags, missing input files),
2 runtime failure. ``SLIMTENSOR_THREADS`` caps BLAS threads (0 = library default).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

log = logging.getLogger("slimtensor")

COMMANDS = ("gen-scene", "train", "slim", "eval", "render", "sweep", "verify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slimtensor", description="Slimmable tensorial radiance fields on toy scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help: str, *flags: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        for f in flags:
            if f == "config":
                sp.add_argument("--config", type=Path, help="training config file (key = value)")
            elif f == "data":
                sp.add_argument("--data", type=Path, help="dataset directory")
            elif f == "model":
                sp.add_argument("--model", type=Path, help="checkpoint file")
            elif f == "out":
                sp.add_argument("--out", type=Path, help="output path")
            elif f == "rank":
                sp.add_argument("--rank", type=int, help="retained (or total) rank")
            elif f == "seed":
                sp.add_argument("--seed", type=int, help="random seed")
            elif f == "mode":
                sp.add_argument("--mode", choices=("train_trains", "trains", "baseline", "baseline_simultaneous"))
            elif f == "views":
                sp.add_argument("--views", type=int, help="number of views (gen-scene) or view index (render)")
            elif f == "size":
                sp.add_argument("--size", type=int, help="image size in pixels")
        return sp

    add("gen-scene", "generate a toy scene dataset", "seed", "out", "views", "size")
    add("train", "train a model", "config", "data", "out", "rank", "seed", "mode")
    add("slim", "truncate a checkpoint to a lower rank", "model", "rank", "out")
    add("eval", "mean test PSNR of a checkpoint", "model", "data", "rank")
    add("render", "render one view to PNG/PPM", "model", "data", "out", "rank", "views", "size")
    add("sweep", "PSNR and size for every retained rank", "model", "data", "out")
    add("verify", "empirical gradient-bound checks", "model", "data", "out", "seed")
    return p


def _require(args, *names: str) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {' '.join(missing)}")


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _thread_limit():
    raw = os.environ.get("SLIMTENSOR_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SLIMTENSOR_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_model(args):
    from .slim_eval import load, slim

    model = load(_existing(args.model, "checkpoint"))
    rank = getattr(args, "rank", None)
    return slim(model, rank) if rank is not None else model


def _dataset(args):
    from .scene import load_dataset

    return load_dataset(_existing(args.data, "dataset"))


def cmd_gen_scene(args) -> None:
    from .scene import generate_scene, make_dataset

    _require(args, "out")
    seed = 0 if args.seed is None else args.seed
    ds = make_dataset(
        generate_scene(seed), args.out,
        n_train=20 if args.views is None else args.views,
        size=32 if args.size is None else args.size,
        seed=seed,
    )
    print(f"wrote {len(ds.indices('train'))} train / {len(ds.indices('test'))} test views to {args.out}")


def cmd_train(args) -> None:
    from .slim_eval import evaluate, save
    from .train import TrainConfig, load_config, train

    _require(args, "data", "out")
    overrides = {"seed": args.seed, "mode": args.mode, "rank": args.rank}
    if args.config is not None:
        cfg = load_config(_existing(args.config, "config"), **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    ds = _dataset(args)
    result = train(cfg, ds)
    save(result.model, args.out)
    hist_path = args.out.with_suffix(".loss.csv")
    result.history.to_csv(hist_path)
    inc = ", ".join(f"{it}->{r}" for it, r in result.history.increments) or "none"
    print(f"mode={cfg.mode} iterations={len(result.history)} increments: {inc}")
    print(f"test PSNR {evaluate(result.model, ds.views('test')):.2f} dB; checkpoint {args.out}; losses {hist_path}")
    if result.flagged:
        print("FLAGGED: the rank gate never fired; the model stayed at rank 1", file=sys.stderr)


def cmd_slim(args) -> None:
    from .slim_eval import save

    _require(args, "model", "rank", "out")
    model = _load_model(args)
    n = save(model, args.out)
    print(f"rank {model.rank} checkpoint, {n} bytes -> {args.out}")


def cmd_eval(args) -> None:
    from .slim_eval import evaluate

    _require(args, "model", "data")
    model = _load_model(args)
    print(f"rank {model.rank}: test PSNR {evaluate(model, _dataset(args).views('test')):.4f} dB")


def cmd_render(args) -> None:
    from .renderer import render_image, save_image
    from .scene import sphere_cameras

    _require(args, "model", "out")
    model = _load_model(args)
    k = 0 if args.views is None else args.views
    if args.data is not None:
        views = _dataset(args).views("test")
        if not 0 <= k < len(views):
            raise UsageError(f"view index {k} outside [0, {len(views) - 1}]")
        cam = views[k][0]
    else:
        cam = sphere_cameras(max(k + 1, 1), 64 if args.size is None else args.size)[k]
    save_image(args.out, render_image(model, cam))
    print(f"wrote {args.out}")


def cmd_sweep(args) -> None:
    from .slim_eval import rank_sweep

    _require(args, "model", "data", "out")
    model = _load_model(args)
    ds = _dataset(args)
    scene_id = ds.scene.scene_id if ds.scene is not None else ""
    report = rank_sweep(model, ds.views("test"), scene_id=scene_id)
    report.to_csv(args.out)
    for r, p, b in zip(report.ranks, report.psnr_db, report.bytes):
        print(f"rank {r}: {p:.2f} dB, {b} bytes")


def cmd_verify(args) -> None:
    from .model import RadianceModel
    from .theory import check_lemma1, check_lemma2

    seed = 0 if args.seed is None else args.seed
    if args.model is not None:
        model = _load_model(args)
    else:
        model = RadianceModel.create((16, 16, 16), [[-1.0] * 3, [1.0] * 3], 4, np.random.default_rng(seed))
    rays = None
    if args.data is not None:
        rays = _dataset(args).rays("train")
    reports = [check_lemma1(model, seed=seed), check_lemma2(model, rays=rays, seed=seed)]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        print(rep.summary())
        if args.out is not None:
            rep.to_csv(args.out / f"{rep.name}.csv")
    if not all(r.passed for r in reports):
        raise RuntimeError("gradient bound violated")


HANDLERS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "slim": cmd_slim,
    "eval": cmd_eval,
    "render": cmd_render,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
