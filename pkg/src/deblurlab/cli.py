"""Command-line entry point: ``deblurlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

log = logging.getLogger("deblurlab")

DATA_ENV = "DEBLURLAB_DATA"
EXIT_ERROR = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _dataset_root(arg: Optional[str]) -> Path:
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise CliError(f"no dataset root given and {DATA_ENV} is unset", EXIT_USAGE)
    path = Path(root)
    if not path.is_dir():
        raise CliError(f"dataset root {path} does not exist", EXIT_USAGE)
    return path


def _split_dir(root: Path, split: Optional[str]) -> Path:
    if split is None:
        return root
    path = root / split
    if not path.is_dir():
        raise CliError(f"split {split!r} not found under {root}", EXIT_USAGE)
    return path


def _parse_override(text: str):
    if "=" not in text:
        raise CliError(f"override {text!r} must look like section.key=value", EXIT_USAGE)
    key, value = text.split("=", 1)
    return key, yaml.safe_load(value)


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    from .config import apply_overrides, load_config
    from .trainer import train

    cfg = load_config(args.config)
    overrides = dict(_parse_override(o) for o in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides["data.root"] = args.data
    if args.out is not None:
        overrides["output.dir"] = args.out
    if cfg.data.root is None and "data.root" not in overrides and os.environ.get(DATA_ENV):
        overrides["data.root"] = os.environ[DATA_ENV]
    cfg = apply_overrides(cfg, overrides)
    if cfg.data.root is None or not Path(cfg.data.root).is_dir():
        raise CliError(f"dataset root {cfg.data.root} does not exist", EXIT_USAGE)

    every = max(1, args.log_every)

    def on_step(it, loss):
        if it % every == 0:
            print(f"iter {it:6d}  loss {loss:.5f}", flush=True)

    res = train(cfg, resume_from=args.resume, on_step=on_step)
    print(f"wrote {res.final_checkpoint} and {res.manifest} "
          f"({res.state.iteration} iterations, {res.seconds:.1f} s)")
    return 0


def _provider_for(run_cfg: dict, split_root: Path, flow_dir: Optional[str]):
    from .flowwarp import CachedProvider, FileFlowProvider, SyntheticFlowProvider
    from .synth import load_trajectories

    flow = run_cfg.get("flow", {})
    if flow.get("mode", "none") == "none" or run_cfg["data"]["sequence_length"] == 1:
        return None
    if flow.get("source") == "synthetic":
        traj = load_trajectories(flow_dir or split_root)
        if not traj:
            raise CliError(f"no trajectory.json files under {flow_dir or split_root}")
        return SyntheticFlowProvider(traj)
    return CachedProvider(FileFlowProvider(flow_dir or split_root))


def cmd_eval(args) -> int:
    from .datapipe import scan_dataset
    from .evaluator import evaluate
    from .config import from_yaml_text
    from .trainer import _fingerprint, load_model, read_checkpoint

    root = _dataset_root(args.data)
    split_root = _split_dir(root, args.split)
    ckpt = read_checkpoint(args.checkpoint)
    run = ckpt.get("run_config")
    if run is None:
        raise CliError(f"{args.checkpoint} carries no run config; cannot infer input assembly")
    cfg = from_yaml_text(yaml.safe_dump(run))
    model = load_model(args.checkpoint)
    index = scan_dataset(split_root)
    provider = _provider_for(run, split_root, args.flow_dir)
    report = evaluate(model, index, cfg.flow.mode, provider, cfg.model.color_space, cfg.data.sequence_length,
                      cfg.model.ycbcr_standard, run_id=args.run_id or cfg.run_id, axes=cfg.axes(),
                      fingerprint=_fingerprint(cfg), with_mssim=not args.no_mssim)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    written = report.write(out, args.format)
    for s in report.per_sequence:
        print(f"{s.sequence_id:>12s}  PSNR {s.psnr:7.3f} dB  MSSIM {s.mssim:.4f}  ({s.frames} frames)")
    print(f"aggregate  PSNR {report.psnr:.3f} dB  MSSIM {report.mssim:.4f}")
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def _pairs(split_root: Path, limit: Optional[int] = None):
    from .datapipe import load_image, scan_dataset

    index = scan_dataset(split_root)
    pairs = []
    for seq in index.sequences.values():
        for b, s in zip(seq.blurry, seq.sharp):
            pairs.append((load_image(b), load_image(s)))
            if limit and len(pairs) >= limit:
                return pairs
    return pairs


def cmd_oracle(args) -> int:
    from .colorspace import oracle_bounds

    root = _dataset_root(args.data)
    pairs = _pairs(_split_dir(root, args.split), args.limit)
    inp, orc = oracle_bounds(pairs, args.standard)
    print(f"input PSNR     {inp:.2f} dB")
    print(f"Y-oracle PSNR  {orc:.2f} dB  ({args.standard}, {len(pairs)} frames)")
    return 0


def cmd_analyze(args) -> int:
    from .evaluator import gradient_statistics

    root = _dataset_root(args.data)
    pairs = _pairs(_split_dir(root, args.split))
    rng = np.random.default_rng(args.seed)
    blurry, sharp = [], []
    for i in rng.choice(len(pairs), size=args.crops, replace=len(pairs) < args.crops):
        b, s = pairs[i]
        h, w = b.shape[:2]
        c = min(args.crop_size, h, w)
        top, left = rng.integers(0, h - c + 1), rng.integers(0, w - c + 1)
        blurry.append(b[top:top + c, left:left + c])
        sharp.append(s[top:top + c, left:left + c])
    hist = gradient_statistics(blurry, sharp, args.scale, args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"gradients_scale{args.scale:g}"
    (out / f"{stem}.csv").write_text(hist.to_csv())
    hist.plot(out / f"{stem}.png")
    tb, ts = hist.tail_mass(args.threshold)
    print(f"scale {args.scale:g}: tail mass |g|>{args.threshold:g}  blurry {tb:.4f}  sharp {ts:.4f}  "
          f"ratio {hist.tail_ratio(args.threshold):.3f}")
    print(f"wrote {out / (stem + '.csv')} and {out / (stem + '.png')}")
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate

    spec = SynthSpec(sequences=args.sequences, frames=args.frames, height=args.height, width=args.width,
                     subframes=args.subframes, trajectory=args.trajectory, max_offset=args.max_offset,
                     seed=args.seed, gain=args.gain, exposure=args.exposure)
    for split in args.splits:
        path = generate(args.output, spec, split)
        print(f"wrote {spec.sequences} x {spec.frames} frames to {path}")
        spec.seed += 1
    return 0


def cmd_report(args) -> int:
    from .evaluator import MetricReport, ablation_report

    reports = [MetricReport.from_json(Path(p).read_text()) for p in args.reports]
    table = ablation_report(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(table.to_csv())
        (out / "ablation.md").write_text(table.to_markdown())
    print(table.to_markdown(), end="")
    return 0


def cmd_ablate(args) -> int:
    """Train and evaluate every run of a grid file, then tabulate.

    The grid file holds ``base`` (a config path, relative to the grid file)
    and ``runs``, a list of ``{run_id, overrides}`` in table order.
    """
    from .config import RunConfig, apply_overrides, load_config
    from .datapipe import scan_dataset
    from .evaluator import ablation_report, evaluate
    from .trainer import _fingerprint, make_provider, train

    grid_path = Path(args.grid)
    grid = yaml.safe_load(grid_path.read_text())
    if not isinstance(grid, dict) or "runs" not in grid:
        raise CliError(f"{grid_path}: grid needs a 'runs' list")
    base = load_config(grid_path.parent / grid["base"]) if grid.get("base") else None
    out_root = Path(args.out)
    reports = []
    for entry in grid["runs"]:
        run_id = entry["run_id"]
        over = dict(entry.get("overrides") or {})
        over.update({"run_id": run_id, "output.dir": str(out_root / run_id)})
        if args.seed is not None:
            over["seed"] = args.seed
        cfg = apply_overrides(base or RunConfig(), over)
        print(f"== {run_id}", flush=True)
        res = train(cfg)
        index = scan_dataset(cfg.data.root, cfg.eval.split)
        provider = make_provider(cfg, index)
        rep = evaluate(res.state.model, index, cfg.flow.mode, provider, cfg.model.color_space,
                       cfg.data.sequence_length, cfg.model.ycbcr_standard, run_id=run_id, axes=cfg.axes(),
                       fingerprint=_fingerprint(cfg))
        rep.write(out_root / run_id / "eval", "both")
        reports.append(rep)
    table = ablation_report(reports)
    (out_root / "ablation.csv").write_text(table.to_csv())
    (out_root / "ablation.md").write_text(table.to_markdown())
    print(table.to_markdown(), end="")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deblurlab", description="Video deblurring training and ablation lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    data_help = f"dataset root (default: ${DATA_ENV})"

    t = sub.add_parser("train", help="train from a YAML run config")
    t.add_argument("config", help="run config file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--data", help="override data.root")
    t.add_argument("--out", help="override output.dir")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra override, e.g. model.head=sigmoid")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="?", help=data_help)
    e.add_argument("--split", default=None, help="subdirectory of the dataset root")
    e.add_argument("--format", choices=("csv", "json", "both"), default="both")
    e.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    e.add_argument("--flow-dir", help="flow files directory (default: the split itself)")
    e.add_argument("--run-id")
    e.add_argument("--no-mssim", action="store_true", help="skip MSSIM")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="input and Y-oracle PSNR bounds of a dataset")
    o.add_argument("data", nargs="?", help=data_help)
    o.add_argument("--split", default=None)
    o.add_argument("--standard", choices=("bt601_full", "bt601_studio"), default="bt601_full")
    o.add_argument("--limit", type=int, default=None, help="use at most this many frames")
    o.set_defaults(func=cmd_oracle)

    a = sub.add_parser("analyze", help="gradient histograms of blurry vs sharp crops")
    a.add_argument("data", nargs="?", help=data_help)
    a.add_argument("--split", default=None)
    a.add_argument("--scale", type=float, default=1.0)
    a.add_argument("--bins", type=int, default=201)
    a.add_argument("--crops", type=int, default=300)
    a.add_argument("--crop-size", type=int, default=128)
    a.add_argument("--threshold", type=float, default=0.1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="write a synthetic dataset with exact flow")
    s.add_argument("output")
    s.add_argument("--sequences", type=int, default=4)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--subframes", type=int, default=7)
    s.add_argument("--trajectory", default="linear", help="'linear', 'static' or 'dx,dy'")
    s.add_argument("--max-offset", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gain", type=float, default=1.0, help="radiance gain before sensor clipping")
    s.add_argument("--exposure", choices=("fixed", "varying"), default="fixed",
                   help="varying draws a per-frame exposure length")
    s.add_argument("--splits", nargs="+", default=["train"])
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="ablation table from report.json files")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("ablate", help="train and evaluate a grid of runs")
    g.add_argument("grid", help="grid YAML with 'base' and 'runs'")
    g.add_argument("--out", default="runs/ablation")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .config import ConfigError
    from .datapipe import DatasetError
    from .flowwarp import FlowError
    from .trainer import TrainingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, DatasetError, FlowError, TrainingError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
