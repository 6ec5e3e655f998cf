"""Motion-driven GOP segmentation.

Motion degree per frame transition is the mean absolute optical flow
component (a uniform one-pixel horizontal shift gives 0.5).  Frames are
grouped greedily: the degree is accumulated from zero and a GOP is closed
once the sum exceeds the threshold.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"
DEFAULT_MIN_LEN = 4
DEFAULT_MAX_LEN = 120
DEFAULT_THRESHOLD = 8.0
FLOW_LONG_SIDE = 256


class FlowFormatError(ValueError):
    pass


@dataclass
class GopPlan:
    ranges: list[tuple[int, int]]

    def __len__(self):
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)

    @property
    def lengths(self) -> list[int]:
        return [b - a + 1 for a, b in self.ranges]

    def gop_of(self, frame: int) -> int:
        for i, (a, b) in enumerate(self.ranges):
            if a <= frame <= b:
                return i
        raise IndexError(f"frame {frame} outside the plan")


def mean_gop_length(plan: GopPlan, first: int, last: int) -> float:
    """Mean length of the GOPs whose midpoint lies in frames ``first..last``."""
    lengths = [n for (a, b), n in zip(plan, plan.lengths) if first <= (a + b) / 2 <= last]
    return float(np.mean(lengths)) if lengths else float("nan")


def motion_degree(flow: np.ndarray) -> float:
    """Mean |component| over an (H, W, 2) flow field."""
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return float(np.mean(np.abs(flow)))


def _gray(frame):
    f = np.asarray(frame, dtype=np.float32)
    return f.mean(axis=-1) if f.ndim == 3 else f


def estimate_flow_blockmatch(frame_a: np.ndarray, frame_b: np.ndarray, block: int = 8, radius: int = 4) -> np.ndarray:
    """Integer block-matching flow from ``frame_a`` to ``frame_b``.

    Each block of ``frame_a`` is matched against ``frame_b`` within
    +-``radius`` pixels by sum of absolute differences, ties going to the
    smallest displacement, then to the lexicographically smallest (dy, dx).
    The per-block vector (u, v) is broadcast to its pixels.
    """
    a, b = _gray(frame_a), _gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    bh, bw = min(block, h), min(block, w)
    # candidates sorted so that the first minimum is the preferred tie-break
    cands = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                   key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    flow = np.zeros((h, w, 2), dtype=np.float32)
    for y0 in range(0, h, bh):
        for x0 in range(0, w, bw):
            y1, x1 = min(y0 + bh, h), min(x0 + bw, w)
            ref = a[y0:y1, x0:x1]
            best, best_d = np.inf, (0, 0)
            for dy, dx in cands:
                if y0 + dy < 0 or y1 + dy > h or x0 + dx < 0 or x1 + dx > w:
                    continue
                sad = float(np.abs(ref - b[y0 + dy:y1 + dy, x0 + dx:x1 + dx]).sum())
                if sad < best:
                    best, best_d = sad, (dy, dx)
            flow[y0:y1, x0:x1, 0] = best_d[1]
            flow[y0:y1, x0:x1, 1] = best_d[0]
    return flow


def _downscale(frame, long_side):
    h, w = frame.shape[:2]
    factor = max(h, w) / long_side
    if factor <= 1:
        return frame, 1.0
    size = (max(1, round(w / factor)), max(1, round(h / factor)))
    return cv2.resize(np.asarray(frame, np.float32), size, interpolation=cv2.INTER_AREA), factor


def motion_trace(frames: np.ndarray, estimator: Callable | None = None, long_side: int = FLOW_LONG_SIDE,
                 **kwargs) -> list[float]:
    """Motion degree per transition, measured in full-resolution pixels."""
    estimator = estimator or estimate_flow_blockmatch
    small = [_downscale(f, long_side) for f in frames]
    return [motion_degree(estimator(a, b, **kwargs)) * fa for (a, fa), (b, _) in zip(small, small[1:])]


def slice_gops(trace: Sequence[float], threshold: float = DEFAULT_THRESHOLD, min_len: int = DEFAULT_MIN_LEN,
               max_len: int = DEFAULT_MAX_LEN) -> GopPlan:
    """Greedy GOP segmentation of ``len(trace) + 1`` frames.

    The transition into frame k+1 is added to the running sum; once the sum
    exceeds ``threshold`` (and the GOP has ``min_len`` frames) or the GOP
    reaches ``max_len`` frames, the GOP ends at frame k+1 and the sum resets.
    The transition between two GOPs is not counted.  A trailing remainder
    shorter than ``min_len`` is merged into the previous GOP.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if min_len < 1 or max_len < min_len:
        raise ValueError("need 1 <= min_len <= max_len")
    trace = [float(d) for d in trace]
    if any(d < 0 or not math.isfinite(d) for d in trace):
        raise ValueError("motion degrees must be finite and non-negative")
    n_frames = len(trace) + 1
    ranges: list[tuple[int, int]] = []
    start, acc = 0, 0.0
    k = 0
    while k < n_frames - 1:
        if k + 1 == start:  # transition leading into a new GOP
            k += 1
            continue
        acc += trace[k]
        length = k + 2 - start
        if (acc > threshold and length >= min_len) or length >= max_len:
            ranges.append((start, k + 1))
            start, acc = k + 2, 0.0
        k += 1
    if start <= n_frames - 1:
        if n_frames - start < min_len and ranges:
            ranges[-1] = (ranges[-1][0], n_frames - 1)
        else:
            ranges.append((start, n_frames - 1))
    return GopPlan(ranges)


def fixed_gops(n_frames: int, length: int) -> GopPlan:
    """Consecutive GOPs of ``length`` frames; a short tail joins the previous GOP."""
    if length < 1:
        raise ValueError("length must be >= 1")
    ranges = [(s, min(s + length, n_frames) - 1) for s in range(0, n_frames, length)]
    if len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] + 1 < length // 2:
        last = ranges.pop()
        ranges[-1] = (ranges[-1][0], last[1])
    return GopPlan(ranges)


def equal_gops(n_frames: int, count: int) -> GopPlan:
    """``count`` GOPs of (nearly) equal length."""
    bounds = np.linspace(0, n_frames, count + 1).round().astype(int)
    return GopPlan([(int(a), int(b) - 1) for a, b in zip(bounds, bounds[1:])])


def threshold_for_count(trace: Sequence[float], count: int, min_len: int = DEFAULT_MIN_LEN,
                        max_len: int = DEFAULT_MAX_LEN, iters: int = 60) -> float:
    """Smallest threshold (by bisection) whose plan has at most ``count`` GOPs."""
    total = float(np.sum(trace)) + 1.0
    lo, hi = 1e-9, total
    if len(slice_gops(trace, hi, min_len, max_len)) > count:
        raise ValueError(f"cannot reach {count} GOPs within max_len={max_len}")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if len(slice_gops(trace, mid, min_len, max_len)) > count:
            lo = mid
        else:
            hi = mid
    return hi


def write_flow_file(path: str | Path, flow: np.ndarray):
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_TAG)
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.reshape(h, w, 2).tobytes())


def load_flow_file(path: str | Path) -> np.ndarray:
    """Read a Middlebury ``.flo`` file: tag, width, height, row-major float32 (u, v)."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    if data[:4] != FLO_TAG:
        raise FlowFormatError(f"{path}: bad magic {data[:4]!r}")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: bad dimensions {w}x{h}")
    need = 12 + w * h * 2 * 4
    if len(data) != need:
        raise FlowFormatError(f"{path}: expected {need} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def trace_from_flow_dir(flow_dir: str | Path, n_frames: int) -> list[float]:
    """Motion trace from one ``.flo`` file per transition, in name order."""
    files = sorted(Path(flow_dir).glob("*.flo"))
    if len(files) != n_frames - 1:
        raise FlowFormatError(f"{flow_dir}: found {len(files)} flow files, need {n_frames - 1}")
    return [motion_degree(load_flow_file(f)) for f in files]
