"""Frame ingestion/emission and quality metrics.

Inputs are directories of numbered lossless images or a raw planar RGB file
with a JSON sidecar ``{"width", "height", "count"[, "bit_depth"]}``.  Videos
in container formats can be converted beforehand, e.g.
``ffmpeg -i in.mp4 frames/frame_%05d.png``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

PSNR_CAP = 100.0
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".ppm", ".pgm")
_NUM = re.compile(r"(\d+)(?!.*\d)")


class FrameSequenceError(ValueError):
    pass


@dataclass
class VideoBuffer:
    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    fps: float = 30.0
    source: str | None = None
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise FrameSequenceError(f"frames must be (F, H, W, 3), got {self.frames.shape}")
        if not self.indices:
            self.indices = list(range(len(self.frames)))

    def __len__(self):
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FrameSequenceError(f"cannot read image {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        img = img[..., :3]
    img = img[..., ::-1]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float32) / np.float32(scale)


def center_crop(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = frames.shape[1:3]
    if height > h or width > w:
        raise FrameSequenceError(f"crop {height}x{width} larger than frames {h}x{w}")
    y0, x0 = (h - height) // 2, (w - width) // 2
    return frames[:, y0:y0 + height, x0:x0 + width]


def load_frames(source: str | Path, fps: float = 30.0, crop: tuple[int, int] | None = None) -> VideoBuffer:
    """Load a numbered image directory or a raw planar RGB file with sidecar."""
    src = Path(source)
    if src.is_file():
        frames = _load_raw(src)
        indices = list(range(len(frames)))
    elif src.is_dir():
        numbered = {}
        for p in src.iterdir():
            m = _NUM.search(p.stem)
            if p.suffix.lower() in IMAGE_SUFFIXES and m:
                idx = int(m.group(1))
                if idx in numbered:
                    raise FrameSequenceError(f"duplicate frame index {idx}")
                numbered[idx] = p
        if not numbered:
            raise FrameSequenceError(f"no numbered images in {src}")
        indices = sorted(numbered)
        gaps = sorted(set(range(indices[0], indices[-1] + 1)) - set(indices))
        if gaps:
            raise FrameSequenceError(f"missing frame index {gaps[0]} (gaps: {gaps})")
        imgs = [_read_image(numbered[i]) for i in indices]
        shapes = {im.shape for im in imgs}
        if len(shapes) > 1:
            raise FrameSequenceError(f"mixed frame dimensions: {sorted(shapes)}")
        frames = np.stack(imgs)
        indices = list(range(len(frames)))
    else:
        raise FrameSequenceError(f"no such file or directory: {src}")
    if crop is not None:
        frames = center_crop(frames, *crop)
    return VideoBuffer(frames, fps, str(src), indices)


def _load_raw(path: Path) -> np.ndarray:
    side = path.with_suffix(".json")
    if not side.exists():
        raise FrameSequenceError(f"raw input {path} needs a sidecar {side.name}")
    meta = json.loads(side.read_text())
    w, h, n = int(meta["width"]), int(meta["height"]), int(meta["count"])
    bits = int(meta.get("bit_depth", 8))
    dtype = np.dtype("<u2") if bits == 16 else np.uint8
    data = np.fromfile(path, dtype=dtype)
    if data.size != n * 3 * h * w:
        raise FrameSequenceError(f"raw file holds {data.size} samples, expected {n * 3 * h * w}")
    planar = data.reshape(n, 3, h, w).transpose(0, 2, 3, 1)
    return planar.astype(np.float32) / np.float32((1 << bits) - 1)


def write_raw(frames: np.ndarray, path: str | Path, bit_depth: int = 8):
    path = Path(path)
    levels = (1 << bit_depth) - 1
    q = np.floor(np.clip(frames, 0, 1) * levels + 0.5)
    q = q.astype("<u2" if bit_depth == 16 else np.uint8)
    q.transpose(0, 3, 1, 2).tofile(path)
    n, h, w = frames.shape[:3]
    path.with_suffix(".json").write_text(json.dumps({"width": w, "height": h, "count": n, "bit_depth": bit_depth}))


def to_codes(frame: np.ndarray, bit_depth: int = 16) -> np.ndarray:
    levels = (1 << bit_depth) - 1
    q = np.floor(np.clip(np.asarray(frame, np.float64), 0.0, 1.0) * levels + 0.5)
    return q.astype(np.uint16 if bit_depth == 16 else np.uint8)


def write_frame(frame: np.ndarray, path: str | Path, bit_depth: int = 16) -> Path:
    path = Path(path)
    if not cv2.imwrite(str(path), np.ascontiguousarray(to_codes(frame, bit_depth)[..., ::-1])):
        raise OSError(f"failed to write {path}")
    return path


def write_frames(buffer: VideoBuffer | np.ndarray, out_dir: str | Path, bit_depth: int = 16,
                 prefix: str = "frame_", indices=None) -> list[Path]:
    """Clamp to [0, 1] and write numbered PNG files."""
    frames = buffer.frames if isinstance(buffer, VideoBuffer) else np.asarray(buffer)
    if indices is None:
        indices = buffer.indices if isinstance(buffer, VideoBuffer) else range(len(frames))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [write_frame(f, out / f"{prefix}{i:05d}.png", bit_depth) for i, f in zip(indices, frames)]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for signals in [0, 1]; identical inputs give PSNR_CAP."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def video_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of per-frame PSNR."""
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


def write_metrics_csv(rows: list[dict], path: str | Path):
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
