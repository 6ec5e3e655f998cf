"""End-to-end orchestration: slice, train each GOP, fine-tune with QAT, encode; and the decode side."""

from __future__ import annotations

import logging
import math
import multiprocessing
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import codec, slicer
from .codec import Container
from .deform import GopModel, deform
from .quant import BitPlan
from .raster import DEFAULT_TILE, render, set_threads
from .train import DivergenceError, TrainConfig, evaluate, init_gop, qat_finetune, train_gop
from .videoio import VideoBuffer, psnr, write_metrics_csv

log = logging.getLogger(__name__)

GAUSSIANS_PER_FRAME = 32  # default total budget: 512 per 16 frames
MIN_GAUSSIANS_PER_GOP = 16


@dataclass
class EncodeConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    gaussians: int | None = None  # total budget split evenly over GOPs; None -> GAUSSIANS_PER_FRAME per frame
    gop_threshold: float | None = None
    gop_fixed: int | None = None
    gop_count: int | None = None  # adaptive slicing tuned to this many GOPs
    min_len: int = slicer.DEFAULT_MIN_LEN
    max_len: int = slicer.DEFAULT_MAX_LEN
    flow_dir: str | None = None
    qat: bool = True
    plan: BitPlan = field(default_factory=BitPlan)
    codec: str = "png"
    jobs: int = 1  # >1 trains GOPs in worker processes

    def __post_init__(self):
        chosen = [x is not None for x in (self.gop_threshold, self.gop_fixed, self.gop_count)]
        if sum(chosen) > 1:
            raise ValueError("choose at most one of gop_threshold, gop_fixed, gop_count")
        if self.gaussians is not None and self.gaussians < 1:
            raise ValueError("gaussians must be >= 1")


@dataclass
class EncodeResult:
    container: Container  # decoder view: quantized and dequantized
    data: bytes
    plan: slicer.GopPlan
    rows: list[dict]
    psnr: float
    float_psnr: float

    @property
    def bpp(self) -> float:
        c = self.container
        return codec.bits_per_pixel(len(self.data), c.width, c.height, c.frame_count)


def plan_gops(frames: np.ndarray, config: EncodeConfig) -> slicer.GopPlan:
    n = len(frames)
    if config.gop_fixed is not None:
        return slicer.fixed_gops(n, config.gop_fixed)
    if n < 2:
        return slicer.GopPlan([(0, n - 1)])
    if config.flow_dir is not None:
        trace = slicer.trace_from_flow_dir(config.flow_dir, n)
    else:
        trace = slicer.motion_trace(frames)
    min_len = min(config.min_len, n)
    if config.gop_count is not None:
        threshold = slicer.threshold_for_count(trace, config.gop_count, min_len, config.max_len)
    else:
        threshold = config.gop_threshold if config.gop_threshold is not None else slicer.DEFAULT_THRESHOLD
    return slicer.slice_gops(trace, threshold, min_len, config.max_len)


def gaussian_budget(plan: slicer.GopPlan, total: int) -> list[int]:
    """One Gaussian count for every GOP: ``total`` split evenly, whatever the GOP lengths.

    Each GOP re-learns the whole frame, so a short GOP needs as many
    Gaussians as a long one; a long still GOP needs no more.
    """
    return [max(MIN_GAUSSIANS_PER_GOP, total // len(plan))] * len(plan)


def _train_one(args):
    index, (a, b), frames, count, width, height, tcfg, qat, bit_plan = args
    cfg = replace(tcfg, seed=tcfg.seed + index)
    ids = list(range(a, b + 1))
    t0 = time.perf_counter()
    model, hist = train_gop(init_gop(cfg, (a, b), width, height, count), frames, cfg, ids)
    t1 = time.perf_counter()
    float_psnr = evaluate(model, frames, ids)
    if qat:
        model, _ = qat_finetune(model, frames, cfg, bit_plan, ids)
    t2 = time.perf_counter()
    return model, hist, float_psnr, t1 - t0, t2 - t1


def encode_video(video: VideoBuffer | np.ndarray, config: EncodeConfig | None = None,
                 output: str | Path | None = None, metrics: str | Path | None = None,
                 history: str | Path | None = None) -> EncodeResult:
    config = config or EncodeConfig()
    buf = video if isinstance(video, VideoBuffer) else VideoBuffer(np.asarray(video, np.float32))
    frames = buf.frames
    if len(frames) < 2:
        raise ValueError("encoding needs at least 2 frames")
    height, width = frames.shape[1:3]
    plan = plan_gops(frames, config)
    total = config.gaussians if config.gaussians is not None else GAUSSIANS_PER_FRAME * len(frames)
    counts = gaussian_budget(plan, total)
    log.info("GOP plan %s, Gaussians %s", plan.ranges, counts)

    jobs = [(i, r, frames[r[0]:r[1] + 1], n, width, height, config.train, config.qat, config.plan)
            for i, (r, n) in enumerate(zip(plan, counts))]
    if config.jobs > 1 and len(jobs) > 1:
        # spawn, not fork: the parent may already be running an OpenMP thread pool
        with ProcessPoolExecutor(config.jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = []
        for job in jobs:
            try:
                results.append(_train_one(job))
            except DivergenceError as e:
                raise DivergenceError(f"GOP {job[0]} (frames {job[1][0]}..{job[1][1]}): {e}") from e

    models = [r[0] for r in results]
    for m in models:
        m.meta.update(width=width, height=height)
    container = Container(width, height, len(frames), models, config.plan, buf.fps, config.codec)
    data = codec.encode_container(container)
    decoded = codec.decode_container(data)

    rows, all_psnr = [], []
    bpp = codec.bits_per_pixel(len(data), width, height, len(frames))
    bpparam = codec.bits_per_param(len(data), decoded.param_count)
    for i, ((a, b), gop, res) in enumerate(zip(plan, decoded.gops, results)):
        recon = decode_frames(decoded, range(a, b + 1))
        per_frame = [psnr(recon[k], frames[a + k]) for k in range(b - a + 1)]
        all_psnr.extend(per_frame)
        rows.append(dict(gop=i, start=a, end=b, gaussians=len(gop.gaussians), float_psnr=round(res[2], 6),
                         psnr=round(float(np.mean(per_frame)), 6), train_s=round(res[3], 3),
                         qat_s=round(res[4], 3), bpp=round(bpp, 6), bits_per_param=round(bpparam, 6)))
    result = EncodeResult(decoded, data, plan, rows, float(np.mean(all_psnr)),
                          float(np.average([r[2] for r in results], weights=plan.lengths)))
    if output is not None:
        Path(output).write_bytes(data)
    if metrics is not None:
        write_metrics_csv(rows, metrics)
    if history is not None:
        write_metrics_csv([dict(gop=i, iteration=it, loss=f"{loss:.9g}")
                           for i, r in enumerate(results) for it, loss in zip(r[1].iteration, r[1].loss)], history)
    return result


def load_container(source: str | Path | bytes | Container) -> Container:
    if isinstance(source, Container):
        return source
    if isinstance(source, (bytes, bytearray)):
        return codec.decode_container(bytes(source))
    return codec.decode_container(Path(source).read_bytes())


def _locate(container: Container, frame: float) -> GopModel:
    if not 0 <= frame <= container.frame_count - 1:
        raise IndexError(f"frame {frame} outside 0..{container.frame_count - 1}")
    try:
        return container.gop_for_frame(frame)
    except IndexError:
        raise IndexError(f"frame {frame} falls between GOPs; no trained time covers it") from None


def render_at(container: Container, frame: float, tile_size: int = DEFAULT_TILE) -> np.ndarray:
    """Render global (possibly fractional) frame position ``frame``, clamped to [0, 1]."""
    gop = _locate(container, frame)
    img = render(deform(gop, gop.time_of(frame)), container.width, container.height, tile_size=tile_size)
    return np.clip(img, 0.0, 1.0)


def decode_frames(source, frames=None) -> np.ndarray:
    """Decode the requested frame indices (all by default), each independently of the others."""
    c = load_container(source)
    ids = range(c.frame_count) if frames is None else frames
    out = [render_at(c, int(i)) for i in ids]
    if not out:
        return np.zeros((0, c.height, c.width, 3), np.float32)
    return np.stack(out)


def decode_video(source, frames=None) -> VideoBuffer:
    c = load_container(source)
    ids = list(range(c.frame_count) if frames is None else frames)
    return VideoBuffer(decode_frames(c, ids), c.fps, indices=ids)


def interpolate(source, frame: float) -> np.ndarray:
    """Frame at fractional global position ``frame``: plain decode at a non-integer time."""
    return render_at(load_container(source), float(frame))


def upsample_positions(container: Container, factor: int) -> list[float]:
    """Positions for a ``factor``-times frame rate; points between GOPs snap to the nearest trained frame."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n = container.frame_count
    out = []
    for k in range((n - 1) * factor + 1):
        pos = k / factor
        try:
            container.gop_for_frame(pos)
        except IndexError:
            pos = float(round(pos)) if pos % 1 != 0.5 else math.floor(pos)
        out.append(pos)
    return out


def upsample(source, factor: int = 2) -> np.ndarray:
    c = load_container(source)
    return np.stack([render_at(c, p) for p in upsample_positions(c, factor)])


@dataclass
class BenchReport:
    fps_mean: float
    fps_std: float
    passes: int
    frames: int
    width: int
    height: int
    gaussians: int
    threads: int

    def summary(self) -> str:
        return (f"{self.fps_mean:.1f} +- {self.fps_std:.1f} FPS over {self.passes} passes "
                f"({self.frames} frames at {self.width}x{self.height}, {self.gaussians} Gaussians, "
                f"{self.threads} threads; deform + render, no I/O)")


def benchmark_decode(source, passes: int = 100, threads: int | None = None, warmup: int = 1) -> BenchReport:
    """Wall-clock FPS of deform + render for every frame; each pass decodes the whole video."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    c = load_container(source)
    n_threads = set_threads(threads)
    ids = range(c.frame_count)
    for _ in range(warmup):
        decode_frames(c, ids)
    fps = []
    for _ in range(passes):
        t0 = time.perf_counter()
        for i in ids:
            gop = c.gop_for_frame(i)
            render(deform(gop, gop.time_of(i)), c.width, c.height)
        fps.append(c.frame_count / (time.perf_counter() - t0))
    std = statistics.stdev(fps) if len(fps) > 1 else 0.0
    return BenchReport(statistics.fmean(fps), std, passes, c.frame_count, c.width, c.height,
                       sum(len(g.gaussians) for g in c.gops), n_threads)
