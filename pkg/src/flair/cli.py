"""Command-line entry point: one task per invocation.

Exit codes: 0 success, 2 configuration or input error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import analysis, tasks
from .activations import Kind, Task
from .config import RunConfig
from .imageio import read_image, read_occupancy, write_png
from .inrnet import InrModel
from .tensorgraph import ContractError, DimensionError, TrainingDivergence
from .wege import build_energy_map, sample_guidance

log = logging.getLogger("flair")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
COMMANDS = ("fit", "sr", "denoise", "occupancy", "analyze-ntk", "analyze-stft", "analyze-basis")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="JSON run config; flags override its values")
    a("--image", help="input image (PNG or binary PGM/PPM)")
    a("--grid", help="OCC1 occupancy grid, or 'sphere[:N]' for a synthetic solid sphere")
    a("--model", help="trained FLR1 model (analyze-stft)")
    a("--scale", type=float, help="super-resolution factor")
    a("--activation", action="append", choices=[k.value for k in Kind],
      help="activation kind; repeat for analyze-* to compare several")
    a("--iters", type=int, help="training iterations")
    a("--lr", type=float, help="Adam learning rate")
    a("--seed", type=int, help="RNG seed")
    a("--wege", choices=["guided", "bilateral", "none"], help="wavelet energy channel filter")
    a("--wege-r", type=int, help="guided filter radius")
    a("--wege-reg", type=float, help="guided filter regularizer")
    a("--out-dir", help="output directory")
    a("--hidden-layers", type=int, help="hidden layer count (default 4)")
    a("--hidden-width", type=int, help="hidden width (default 256)")
    a("--dtype", choices=["float64", "float32"], help="training precision")
    a("--row", type=int, help="scan line for analyze-stft (default: middle row)")
    a("--checkpoint", type=int, action="append", dest="checkpoints",
      help="also record metrics at this iteration (repeatable)")
    a("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flair", description="Band-limited coordinate networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) overlaid with command-line flags."""
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        raw = json.loads(path.read_text())
    cfg = RunConfig.model_validate(raw).model_dump(mode="json", by_alias=True)
    cfg["task"] = args.command

    simple = {"image": "image", "grid": "grid", "model": "model", "scale": "scale", "iters": "iterations",
              "lr": "lr", "seed": "seed", "out_dir": "out_dir", "hidden_layers": "hidden_layers",
              "hidden_width": "hidden_width", "dtype": "dtype", "checkpoints": "checkpoints"}
    for flag, key in simple.items():
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    if args.activation:
        if args.activation[0] != cfg["activation"]["kind"]:
            cfg["activation"] = {"kind": args.activation[0]}
        cfg["compare"] = args.activation[1:]
    if args.wege is not None:
        cfg["wege"]["enabled"] = args.wege != "none"
        cfg["wege"]["filter"] = args.wege
    if args.wege_r is not None:
        cfg["wege"]["r"] = args.wege_r
    if args.wege_reg is not None:
        cfg["wege"]["reg"] = args.wege_reg
    if args.row is not None:
        cfg["stft"]["row"] = args.row
    return RunConfig.model_validate(cfg)


def _need(value, what: str):
    if value is None:
        raise UsageError(f"{what} is required for this command")
    return value


def _load_grid(spec: str) -> np.ndarray:
    if spec.startswith("sphere"):
        n = int(spec.split(":", 1)[1]) if ":" in spec else 64
        return tasks.sphere_grid(n).voxels
    return read_occupancy(spec)


def _summary(report: tasks.TaskReport) -> str:
    parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.metrics.items()]
    return f"{report.task}: " + " ".join(parts)


def _train_task(cfg: RunConfig, out: Path) -> tasks.TaskReport:
    if cfg.task == "fit":
        return tasks.fit_image(read_image(_need(cfg.image, "--image")), cfg)
    if cfg.task == "sr":
        hr = read_image(_need(cfg.image, "--image"))
        lr = tasks.downsample(hr, cfg.scale)
        report = tasks.super_resolve(lr, cfg.scale, cfg, hr)
        report.images["low_res"] = lr
        report.images["bicubic"] = tasks.bicubic_upsample(lr, hr.shape[:2])
        return report
    if cfg.task == "denoise":
        clean = read_image(_need(cfg.image, "--image"))
        nseed = cfg.noise.seed if cfg.noise.seed is not None else cfg.seed
        noisy = tasks.add_noise(clean, cfg.noise.poisson_level, cfg.noise.gaussian_sigma, nseed)
        return tasks.denoise(noisy, clean, cfg)
    if cfg.task == "occupancy":
        return tasks.fit_occupancy(_load_grid(_need(cfg.grid, "--grid")), cfg)
    raise UsageError(f"unknown task {cfg.task}")


def _kinds(cfg: RunConfig) -> list:
    specs = [cfg.activation.spec(Task.FITTING)]
    for kind in cfg.compare:
        specs.append(cfg.activation.model_copy(update={"kind": kind, "T": None, "sigma": None,
                                                       "zeta": None, "omega0": None}).spec(Task.FITTING))
    return specs


def _analyze(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    summary = {"task": cfg.task, "seed": cfg.seed, "config": cfg.echo(), "outputs": {}, "metrics": {}}
    if cfg.task == "analyze-ntk":
        for spec in _kinds(cfg):
            ks = analysis.empirical_ntk(spec, cfg.ntk.n_inputs, cfg.ntk.n_neurons, cfg.ntk.n_seeds, cfg.seed)
            name = spec.kind.value
            summary["outputs"][name] = str(analysis.write_ntk_csv(out / f"ntk_eigs_{name}.csv", ks))
            summary["metrics"][name] = {"lambda_1": float(ks.eigenvalues[0]),
                                        "ratio_half": ks.ratio(cfg.ntk.n_inputs // 2)}
    elif cfg.task == "analyze-stft":
        image = read_image(_need(cfg.image, "--image"))
        sg = analysis.stft_line(image, cfg.stft.row, cfg.stft.window, cfg.stft.hop)
        summary["outputs"]["image"] = str(analysis.write_stft_csv(out / "stft.csv", sg))
        if cfg.model is not None:
            model = InrModel.load(_need_file(cfg.model))
            h, w = image.shape[:2]
            coords = tasks.pixel_grid(h, w)
            if model.input_dim == 3:
                wc = cfg.wege
                emap = build_energy_map(image, wc.filter if wc.filter != "none" else "guided", wc.r, wc.reg,
                                        wc.norm_eps, wc.spatial_sigma, wc.range_sigma, wc.energy)
                coords = np.hstack([coords, sample_guidance(emap, coords)])
            recon = np.clip(model.predict(coords), 0, 1).reshape(h, w, -1)
            write_png(out / "model_reconstruction.png", recon)
            msg = analysis.stft_line(recon, cfg.stft.row, cfg.stft.window, cfg.stft.hop)
            summary["outputs"]["model"] = str(analysis.write_stft_csv(out / "stft_model.csv", msg))
    elif cfg.task == "analyze-basis":
        rows = []
        for spec in _kinds(cfg):
            res = analysis.uncertainty_product(spec, cfg.basis.domain_halfwidth, cfg.basis.samples)
            rows.append((spec, res))
            summary["metrics"][spec.kind.value] = dict(zip(("sigma_t", "sigma_f", "product"), res))
        summary["outputs"]["uncertainty"] = str(analysis.write_uncertainty_csv(out / "uncertainty.csv", rows))
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    return summary


def _need_file(path: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _thread_limit():
    value = os.environ.get("FLAIR_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    n = int(value)
    if n < 1:
        raise ValueError("FLAIR_THREADS must be a positive integer")
    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        with _thread_limit():
            if cfg.task.startswith("analyze"):
                summary = _analyze(cfg, out)
                print(f"{cfg.task}: wrote {', '.join(summary['outputs'].values())}")
                return EXIT_OK
            try:
                report = _train_task(cfg, out)
            except TrainingDivergence as exc:
                partial = getattr(exc, "report", None)
                if partial is not None:
                    partial.write(out)
                print(f"error: training diverged at iteration {exc.iteration}", file=sys.stderr)
                return EXIT_DIVERGED
            path = report.write(out)
            print(_summary(report))
            print(f"report: {path}")
            return EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, json.JSONDecodeError, UsageError, ContractError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
