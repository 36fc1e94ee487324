"""Training pipelines: image fitting, super-resolution, denoising, occupancy."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import metrics as M
from .activations import Kind, Task
from .config import RunConfig
from .inrnet import InrModel, build_model
from .tensorgraph import Adam, ContractError, TrainingDivergence
from .wege import EnergyMap, build_energy_map, dump_maps, sample_guidance

log = logging.getLogger(__name__)

MIN_SCALE = 1e-3  # floor for learned T and sigma
OCC_BATCH = 16384


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def pixel_grid(h: int, w: int) -> np.ndarray:
    """``(H*W, 2)`` pixel-centre coordinates ``(x, y)`` in [-1, 1], row-major."""
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def voxel_grid(d: int, h: int, w: int) -> np.ndarray:
    """``(D*H*W, 3)`` voxel-centre coordinates ``(x, y, z)``; x runs along W."""
    zs = (np.arange(d) + 0.5) / d * 2 - 1
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class ImageSignal:
    pixels: np.ndarray                 # H x W x C in [0, 1]
    coords: np.ndarray                 # N x 2
    targets: np.ndarray                # N x C
    guidance: np.ndarray | None = None  # N x 1

    @classmethod
    def from_image(cls, image: np.ndarray, emap: EnergyMap | None = None) -> "ImageSignal":
        image = _as_hwc(image)
        h, w, c = image.shape
        coords = pixel_grid(h, w)
        guidance = sample_guidance(emap, coords) if emap is not None else None
        return cls(image, coords, image.reshape(-1, c), guidance)

    @property
    def inputs(self) -> np.ndarray:
        if self.guidance is None:
            return self.coords
        return np.hstack([self.coords, self.guidance])


@dataclass
class OccupancyGrid:
    voxels: np.ndarray  # D x H x W of {0, 1}

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or not np.isin(v, (0, 1)).all():
            raise ContractError("occupancy grid must be 3-D with values in {0, 1}")
        self.voxels = v.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


def sphere_grid(n: int = 64, radius: float = 0.5) -> OccupancyGrid:
    """Centred solid sphere; voxels whose centre lies within ``radius`` are occupied."""
    pts = voxel_grid(n, n, n)
    inside = (pts ** 2).sum(axis=1) <= radius * radius
    return OccupancyGrid(inside.reshape(n, n, n).astype(np.uint8))


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ContractError(f"image must be H x W or H x W x C, got {image.shape}")
    return image


def downsample(hr: np.ndarray, scale: float) -> np.ndarray:
    """Box average for integer scales, bicubic otherwise."""
    hr = _as_hwc(hr)
    h, w, c = hr.shape
    s = int(round(scale))
    if abs(scale - s) < 1e-9:
        if h % s or w % s:
            raise ContractError(f"HR size {h}x{w} not divisible by scale {s}")
        return hr.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))
    lh, lw = int(round(h / scale)), int(round(w / scale))
    out = ndimage.zoom(hr, (lh / h, lw / w, 1), order=3, mode="nearest")
    return np.clip(out, 0, 1)


def bicubic_upsample(lr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    lr = _as_hwc(lr)
    h, w = shape
    out = ndimage.zoom(lr, (h / lr.shape[0], w / lr.shape[1], 1), order=3, mode="nearest", grid_mode=True)
    return np.clip(out, 0, 1)


def add_noise(image: np.ndarray, poisson_level: float = 30.0, gaussian_sigma: float = 2.0,
              seed: int = 0) -> np.ndarray:
    """Photon-count noise: Poisson(level*pixel) + N(0, sigma), rescaled by 1/level and clipped."""
    if not poisson_level > 0:
        raise ContractError("poisson_level must be positive")
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ContractError("image must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(poisson_level * image).astype(np.float64)
    counts += rng.normal(0.0, gaussian_sigma, size=image.shape)
    return np.clip(counts / poisson_level, 0.0, 1.0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """``(1/N) sum_i ||pred_i - target_i||^2`` over rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ContractError("mse over zero samples")
    diff = (pred - target).reshape(pred.shape[0], -1)
    return float(np.sum(diff * diff) / pred.shape[0])


def count_loss_spikes(curve, factor: float = 10.0, window: int = 25) -> list[int]:
    """Iterations whose loss exceeds ``factor`` x the median of the preceding window."""
    curve = np.asarray(curve, dtype=np.float64)
    spikes = []
    for i in range(window, len(curve)):
        if curve[i] > factor * np.median(curve[i - window:i]):
            spikes.append(i + 1)
    return spikes


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class TaskReport:
    task: str
    seed: int
    config: dict
    loss_curve: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    learned_params: list[dict] = field(default_factory=list)
    checkpoints: dict[int, dict] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    seconds: float = 0.0
    # not serialized
    model: InrModel | None = field(default=None, repr=False)
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    energy_map: EnergyMap | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "status": self.status,
            "seed": self.seed,
            "iterations_run": len(self.loss_curve),
            "metrics": self.metrics,
            "checkpoints": {str(k): v for k, v in sorted(self.checkpoints.items())},
            "learned_params": self.learned_params,
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "outputs": self.outputs,
            "seconds": self.seconds,
            "config": self.config,
        }

    def write(self, out_dir) -> Path:
        """Write images, model, loss.csv and report.json; returns the report path."""
        from .imageio import write_png

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, img in self.images.items():
            path = out / f"{name}.png"
            write_png(path, img)
            self.outputs[name] = str(path)
        if self.model is not None:
            path = out / "model.flr"
            self.model.save(path)
            self.outputs["model"] = str(path)
        if self.energy_map is not None and self.config.get("wege", {}).get("dump"):
            for p in dump_maps(self.energy_map, out):
                self.outputs[p.stem + p.suffix.replace(".", "_")] = str(p)
        with open(out / "loss.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "mse"])
            for i, v in enumerate(self.loss_curve, 1):
                wr.writerow([i, repr(float(v))])
        self.outputs["loss"] = str(out / "loss.csv")
        report = out / "report.json"
        self.outputs["report"] = str(report)
        report.write_text(json.dumps(self.as_dict(), indent=2))
        return report


# ---------------------------------------------------------------------------
# training core
# ---------------------------------------------------------------------------

def make_model(config: RunConfig, input_dim: int, output_dim: int, task: Task) -> InrModel:
    spec = config.activation.spec(task)
    pe = config.pe_bands if spec.kind is Kind.RELU_PE else 0
    return build_model(input_dim, output_dim, spec, config.hidden_layers, config.hidden_width,
                       pe_bands=pe, seed=config.seed, dtype=np.dtype(config.dtype))


def train(model: InrModel, inputs: np.ndarray, targets: np.ndarray, iterations: int, lr: float = 5e-4,
          batch_size: int | None = None, seed: int = 0, loss: str = "mse",
          on_step: Callable[[int], None] | None = None, curve: list | None = None) -> list[float]:
    """Adam on the tape's loss; returns the per-iteration loss curve.

    With ``batch_size=None`` every step sees all rows. Otherwise rows are drawn
    uniformly with replacement from a generator seeded by ``seed``. Raises
    :class:`TrainingDivergence` on a non-finite loss; ``curve`` (if given)
    keeps the losses recorded up to that point.
    """
    graph = model.build_tape(with_loss=True, loss=loss)
    tape = graph.tape
    enc = model.encode(inputs)
    tgt = np.asarray(targets, dtype=model.dtype)
    params = tape.params
    opt = Adam([tape.param_value(i) for i in params], lr=lr)
    thetas = [layer.theta for layer in model.layers if layer.theta is not None]
    rng = np.random.default_rng(seed + 7919)
    curve = [] if curve is None else curve
    full = {graph.coords: enc, graph.target: tgt}
    for it in range(1, iterations + 1):
        if batch_size is None or batch_size >= enc.shape[0]:
            feed = full
        else:
            idx = rng.integers(0, enc.shape[0], size=batch_size)
            feed = {graph.coords: enc[idx], graph.target: tgt[idx]}
        value = float(tape.forward(feed)[0, 0])
        if not np.isfinite(value):
            raise TrainingDivergence("non-finite loss", it)
        curve.append(value)
        grads = tape.backward(graph.loss)
        opt.step([grads[i] for i in params])
        for th in thetas:
            np.maximum(th[:, :2], MIN_SCALE, out=th[:, :2])
        if on_step is not None:
            on_step(it)
    return curve


def _image_metrics(recon: np.ndarray, reference: np.ndarray) -> dict:
    out = {"psnr": M.psnr(recon, reference)}
    if min(reference.shape[:2]) >= M.SSIM_WIN:
        out["ssim"] = M.ssim(recon, reference)
    return out


def _energy_for(image: np.ndarray, config: RunConfig) -> EnergyMap | None:
    wc = config.wege
    if not wc.enabled:
        return None
    return build_energy_map(image, method=wc.filter, r=wc.r, reg=wc.reg, norm_eps=wc.norm_eps,
                            spatial_sigma=wc.spatial_sigma, range_sigma=wc.range_sigma, mode=wc.energy)


def _run(report: TaskReport, model: InrModel, inputs, targets, config: RunConfig, batch_size=None,
         evaluate: Callable[[], dict] | None = None):
    wanted = set(config.checkpoints)

    def on_step(it):
        if it in wanted and evaluate is not None:
            report.checkpoints[it] = evaluate()

    t0 = time.perf_counter()
    try:
        train(model, inputs, targets, config.iterations, config.lr, batch_size, config.seed,
              config.loss, on_step, report.loss_curve)
    except TrainingDivergence as exc:
        report.status = f"diverged at iteration {exc.iteration}"
        report.learned_params = model.learned_params()
        report.seconds = time.perf_counter() - t0
        exc.report = report
        raise
    report.seconds = time.perf_counter() - t0
    report.learned_params = model.learned_params()
    report.model = model


def _new_report(config: RunConfig) -> TaskReport:
    return TaskReport(task=config.task, seed=config.seed, config=config.echo())


def fit_image(image: np.ndarray, config: RunConfig, task: Task = Task.FITTING) -> TaskReport:
    """Fit an INR to every pixel of ``image``; metrics against the same image."""
    image = _as_hwc(image)
    emap = _energy_for(image, config)
    signal = ImageSignal.from_image(image, emap)
    model = make_model(config, signal.inputs.shape[1], image.shape[2], task)
    report = _new_report(config)
    report.energy_map = emap

    def reconstruct():
        return np.clip(model.predict(signal.inputs), 0, 1).reshape(image.shape)

    _run(report, model, signal.inputs, signal.targets, config,
         evaluate=lambda: _image_metrics(reconstruct(), image))
    recon = reconstruct()
    report.metrics = _image_metrics(recon, image)
    report.metrics["parameters"] = model.parameter_count()
    report.images["reconstruction"] = recon
    return report


def super_resolve(lr_image: np.ndarray, scale: float, config: RunConfig,
                  hr_image: np.ndarray | None = None) -> TaskReport:
    """Train on LR pixels, query the dense HR grid, score against ``hr_image``."""
    if not scale >= 1:
        raise ContractError("scale must be >= 1")
    lr_image = _as_hwc(lr_image)
    lh, lw, c = lr_image.shape
    hh, hw = int(round(lh * scale)), int(round(lw * scale))
    if hr_image is not None:
        hr_image = _as_hwc(hr_image)
        if hr_image.shape != (hh, hw, c):
            raise ContractError(f"HR shape {hr_image.shape} inconsistent with LR {lr_image.shape} x {scale}")
    emap = _energy_for(lr_image, config)
    signal = ImageSignal.from_image(lr_image, emap)
    hr_coords = pixel_grid(hh, hw)
    hr_inputs = hr_coords if emap is None else np.hstack([hr_coords, sample_guidance(emap, hr_coords)])
    model = make_model(config, signal.inputs.shape[1], c, Task.RESTORATION)
    report = _new_report(config)
    report.energy_map = emap

    def upscale():
        return np.clip(model.predict(hr_inputs), 0, 1).reshape(hh, hw, c)

    evaluate = (lambda: _image_metrics(upscale(), hr_image)) if hr_image is not None else None
    _run(report, model, signal.inputs, signal.targets, config, evaluate=evaluate)
    hr_pred = upscale()
    report.images["super_resolved"] = hr_pred
    if hr_image is not None:
        report.metrics = _image_metrics(hr_pred, hr_image)
        report.metrics["bicubic_psnr"] = M.psnr(bicubic_upsample(lr_image, (hh, hw)), hr_image)
    report.metrics["scale"] = scale
    return report


def denoise(noisy: np.ndarray, clean: np.ndarray, config: RunConfig) -> TaskReport:
    """Fit the noisy image (restoration init), score the fit against ``clean``."""
    noisy = _as_hwc(noisy)
    clean = _as_hwc(clean)
    if noisy.shape != clean.shape:
        raise ContractError("noisy and clean images differ in shape")
    emap = _energy_for(noisy, config)
    signal = ImageSignal.from_image(noisy, emap)
    model = make_model(config, signal.inputs.shape[1], noisy.shape[2], Task.RESTORATION)
    report = _new_report(config)
    report.energy_map = emap

    def reconstruct():
        return np.clip(model.predict(signal.inputs), 0, 1).reshape(clean.shape)

    _run(report, model, signal.inputs, signal.targets, config,
         evaluate=lambda: _image_metrics(reconstruct(), clean))
    recon = reconstruct()
    report.metrics = _image_metrics(recon, clean)
    report.metrics["noisy_psnr"] = M.psnr(noisy, clean)
    report.metrics["loss_spikes"] = len(count_loss_spikes(report.loss_curve))
    report.images["denoised"] = recon
    report.images["noisy"] = noisy
    return report


def fit_occupancy(grid: OccupancyGrid | np.ndarray, config: RunConfig) -> TaskReport:
    """Regress {0, 1} occupancy at sampled voxel centres; IoU at threshold 0.5."""
    if not isinstance(grid, OccupancyGrid):
        grid = OccupancyGrid(grid)
    d, h, w = grid.dims
    coords = voxel_grid(d, h, w)
    targets = grid.voxels.reshape(-1, 1).astype(np.float64)
    model = make_model(config, 3, 1, Task.FITTING)
    report = _new_report(config)
    batch = config.batch_size if config.batch_size is not None else OCC_BATCH

    def volume():
        out = model.predict(coords).reshape(d, h, w)
        if config.loss == "bce":
            out = 0.5 * (1 + np.tanh(0.5 * out))
        return out

    def evaluate():
        vol = volume()
        return {"iou": M.iou((vol >= 0.5).astype(np.uint8), grid.voxels),
                "psnr": M.psnr(np.clip(vol, 0, 1), grid.voxels)}

    _run(report, model, coords, targets, config, batch_size=batch, evaluate=evaluate)
    report.metrics = evaluate()
    report.metrics["parameters"] = model.parameter_count()
    return report
