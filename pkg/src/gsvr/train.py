"""Per-GOP fitting: initialization, L2 loss, Adam and quantization-aware fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .deform import GopModel, TriPlane, deform_with_grad, spatial_resolution, temporal_resolution
from .gaussian import Gaussians
from .quant import BitPlan, fake_quantize
from .raster import CUTOFF_SIGMA, DEFAULT_TILE, render, render_backward

log = logging.getLogger(__name__)

PARAMS_PER_GAUSSIAN = 15
DEFAULT_EPOCHS = 300


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    num_gaussians: int = 512
    iterations: int | None = None  # None -> DEFAULT_EPOCHS sweeps over the GOP frames
    lr_position: float = 0.0025
    lr_other: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    qat_iterations: int | None = None  # None -> a tenth of the training budget
    seed: int = 0
    motion: str = "hybrid"
    xy_resolution: tuple[int, int] | None = None  # (long, short); None -> 32x16
    dtype: str = "float32"
    tile_size: int = DEFAULT_TILE
    eval_every: int | None = 100  # keep the best checkpoint by exact GOP PSNR; None -> keep the last

    def __post_init__(self):
        if self.lr_position <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.num_gaussians < 1:
            raise ValueError("num_gaussians must be >= 1")

    def steps_for(self, frame_count: int) -> int:
        return self.iterations if self.iterations is not None else DEFAULT_EPOCHS * frame_count

    def qat_steps_for(self, frame_count: int) -> int:
        if self.qat_iterations is not None:
            return self.qat_iterations
        return max(1, self.steps_for(frame_count) // 10)


@dataclass
class History:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def add(self, it: int, loss: float):
        self.iteration.append(it)
        self.loss.append(loss)

    @property
    def psnr(self) -> list[float]:
        return [loss_to_psnr(v) for v in self.loss]

    def smoothed(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.loss, dtype=np.float64)
        if len(x) == 0:
            return x
        window = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "psnr"])
            for it, loss, p in zip(self.iteration, self.loss, self.psnr):
                w.writerow([it, f"{loss:.9g}", f"{p:.6f}"])


def loss_to_psnr(mse: float, cap: float = 100.0) -> float:
    return cap if mse <= 0 else min(cap, 10.0 * math.log10(1.0 / mse))


class Adam:
    """Adam with bias-corrected moments and a learning rate per parameter name."""

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps=1e-8):
        self.lrs = lrs
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lrs[k] / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def init_gop(config: TrainConfig, frame_range: tuple[int, int], width: int, height: int,
             num_gaussians: int | None = None, fitted_frames: int | None = None) -> GopModel:
    """Random Gaussians and a flat tri-plane for one GOP.

    ``fitted_frames`` is how many frames the GOP will be trained on when that
    is fewer than its span (held-out interpolation frames); the temporal plane
    resolution follows it, so a sparse GOP does not get one time node per frame.
    """
    first, last = frame_range
    count = last - first + 1
    if count < 1:
        raise ValueError("a GOP needs at least one frame")
    if fitted_frames is not None:
        if not 1 <= fitted_frames <= count:
            raise ValueError(f"fitted_frames must be in 1..{count}, got {fitted_frames}")
        count = fitted_frames
    n = num_gaussians or config.num_gaussians
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    g = Gaussians(
        mu=rng.uniform(-1.0, 1.0, (n, 2)).astype(dtype),
        s_raw=np.zeros((n, 2), dtype),
        theta_raw=np.zeros(n, dtype),
        color=rng.uniform(-0.5, 0.5, (n, 3)).astype(dtype),
        poly=np.zeros((n, 3, 2), dtype),
        alpha_raw=np.zeros(n, dtype),
    )
    if config.xy_resolution is None:
        nx, ny = spatial_resolution(width, height)
    else:
        nx, ny = spatial_resolution(width, height, *config.xy_resolution)
    tp = TriPlane.initial(nx, ny, temporal_resolution(count), dtype)
    return GopModel(g, tp, (first, last), config.motion, {"width": width, "height": height})


def l2_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt.astype(pred.dtype, copy=False)
    n = diff.size
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / n) * diff


def _learning_rates(config: TrainConfig) -> dict[str, float]:
    names = ("mu", "s_raw", "theta_raw", "color", "poly", "alpha_raw", "plane_xy", "plane_xt", "plane_yt")
    return {k: (config.lr_position if k == "mu" else config.lr_other) for k in names}


def loss_and_grads(gop: GopModel, frame: np.ndarray, t: float, tile_size: int = DEFAULT_TILE,
                   cutoff: float = CUTOFF_SIGMA):
    """One forward/backward pass: (loss, parameter gradients, rendered frame).

    ``cutoff=np.inf`` drops the footprint truncation, which makes the loss
    smooth for finite-difference checks.
    """
    h, w = frame.shape[:2]
    deformed, backward = deform_with_grad(gop, t)
    pred = render(deformed, w, h, tile_size=tile_size, cutoff=cutoff)
    loss, dpred = l2_loss(pred, frame)
    rg = render_backward(deformed, dpred, tile_size=tile_size, cutoff=cutoff)
    return loss, backward(rg.mu, rg.scale, rg.theta, rg.color), pred


def _frame_times(gop: GopModel, frames: np.ndarray, frame_ids: Sequence[int] | None):
    if frame_ids is None:
        frame_ids = range(gop.frame_range[0], gop.frame_range[0] + len(frames))
    frame_ids = list(frame_ids)
    if len(frame_ids) != len(frames):
        raise ValueError("need one frame id per frame")
    for f in frame_ids:
        if not gop.contains(f):
            raise ValueError(f"frame {f} outside GOP range {gop.frame_range}")
    return [gop.time_of(f) for f in frame_ids]


def visit_order(count: int) -> list[int]:
    """Bit-reversal permutation of ``range(count)``: 0, 8, 4, 12, 2, ... for 16 frames.

    Consecutive steps see frames far apart in time, so the temporal fields
    are not dragged along by a sweep in one direction.
    """
    bits = max(1, (count - 1).bit_length())
    rev = [int(format(i, f"0{bits}b")[::-1], 2) for i in range(1 << bits)]
    return [r for r in rev if r < count]


def _score(model, targets, times, tile_size) -> float:
    h, w = targets[0].shape[:2]
    from .deform import deform
    from .videoio import psnr
    return float(np.mean([psnr(np.clip(render(deform(model, t), w, h, tile_size=tile_size), 0, 1), f)
                          for f, t in zip(targets, times)]))


def _fit(gop, frames, frame_ids, config, steps, plan: BitPlan | None, history: History | None):
    frames = np.asarray(frames)
    times = _frame_times(gop, frames, frame_ids)
    dtype = gop.gaussians.dtype
    targets = [np.ascontiguousarray(f, dtype=dtype) for f in frames]
    order = visit_order(len(targets))
    params = gop.params()
    opt = Adam(_learning_rates(config), config.betas, config.eps)

    def current():
        if plan is None:
            return gop
        # straight-through: forward on quantized values, update the float ones
        return GopModel.from_params(fake_quantize(params, plan), gop.frame_range, gop.motion)

    best_score, best = -math.inf, None
    every = config.eval_every
    for it in range(steps):
        k = order[it % len(order)]
        model = current()
        if every and it % every == 0:
            score = _score(model, targets, times, config.tile_size)
            if score > best_score:
                best_score, best = score, {n: v.copy() for n, v in params.items()}
        loss, grads, _ = loss_and_grads(model, targets[k], times[k], config.tile_size)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite loss/gradient at iteration {it} (frame {k})")
        opt.step(params, grads)
        if history is not None:
            history.add(it, loss)
    if best is not None and _score(current(), targets, times, config.tile_size) < best_score:
        for n, v in best.items():
            params[n][...] = v
    return gop


def train_gop(gop: GopModel, frames, config: TrainConfig, frame_ids: Sequence[int] | None = None,
              iterations: int | None = None) -> tuple[GopModel, History]:
    """Fit a copy of ``gop`` to ``frames`` with Adam, cycling through frames in bit-reversed order."""
    model = gop.copy()
    steps = config.steps_for(len(frames)) if iterations is None else iterations
    hist = History()
    _fit(model, frames, frame_ids, config, steps, None, hist)
    log.info("trained GOP %s for %d steps", gop.frame_range, steps)
    return model, hist


def qat_finetune(gop: GopModel, frames, config: TrainConfig, plan: BitPlan | None = None,
                 frame_ids: Sequence[int] | None = None, iterations: int | None = None
                 ) -> tuple[GopModel, History]:
    """Continue training with min-max quantization simulated in every forward pass."""
    plan = plan or BitPlan()
    model = gop.copy()
    steps = config.qat_steps_for(len(frames)) if iterations is None else iterations
    hist = History()
    _fit(model, frames, frame_ids, config, steps, plan, hist)
    return model, hist


def quantized_model(gop: GopModel, plan: BitPlan | None = None) -> GopModel:
    plan = plan or BitPlan()
    return GopModel.from_params(fake_quantize(gop.params(), plan), gop.frame_range, gop.motion, gop.meta)


def render_frame(gop: GopModel, frame: float, width: int, height: int, tile_size: int = DEFAULT_TILE) -> np.ndarray:
    from .deform import deform
    return render(deform(gop, gop.time_of(frame)), width, height, tile_size=tile_size)


def evaluate(gop: GopModel, frames, frame_ids: Sequence[int] | None = None) -> float:
    """Mean PSNR over frames, each clamped to [0, 1] before comparison."""
    from .videoio import psnr
    frames = np.asarray(frames)
    if frame_ids is None:
        frame_ids = range(gop.frame_range[0], gop.frame_range[0] + len(frames))
    h, w = frames.shape[1:3]
    vals = [psnr(np.clip(render_frame(gop, f, w, h), 0, 1), frames[i]) for i, f in enumerate(frame_ids)]
    return float(np.mean(vals))
