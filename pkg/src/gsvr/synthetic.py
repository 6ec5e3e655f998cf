"""Synthetic test videos with analytically known content and motion."""

from __future__ import annotations

import numpy as np


def textured_background(width: int, height: int) -> np.ndarray:
    """Smooth deterministic RGB texture in roughly [0.2, 0.8]."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = x / width, y / height
    r = 0.5 + 0.2 * np.sin(2 * np.pi * (u + 0.5 * v))
    g = 0.5 + 0.2 * np.cos(2 * np.pi * (0.7 * u - v))
    b = 0.45 + 0.15 * np.sin(2 * np.pi * 1.5 * v) * np.cos(2 * np.pi * u)
    return np.stack([r, g, b], axis=-1)


def _square_mask(width, height, cx, cy, side, soft=0.75):
    """Anti-aliased coverage of an axis-aligned square centred at (cx, cy) in pixel units."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    half = side / 2.0
    mx = np.clip((half - np.abs(x - cx)) / soft + 0.5, 0, 1)
    my = np.clip((half - np.abs(y - cy)) / soft + 0.5, 0, 1)
    return mx * my


def square_path(frame_count: int, width: int, travel: float = 20.0, t0: float = 0.0, t1: float = 1.0):
    """Linear left-to-right trajectory of the square centre, (F, 2) pixel coords."""
    t = np.linspace(t0, t1, frame_count)
    cx = width / 2.0 - travel / 2.0 + travel * t - 0.5
    cy = np.full_like(t, width / 2.0 - 0.5)
    return np.stack([cx, cy], axis=1)


def moving_square_video(width: int = 64, height: int = 64, frame_count: int = 16, side: float = 14.0,
                        travel: float = 20.0, color=(0.9, 0.25, 0.15), centers: np.ndarray | None = None):
    """Static textured background with one square crossing it.

    Returns ``(frames (F, H, W, 3) float32, centers (F, 2), masks (F, H, W))``.
    """
    bg = textured_background(width, height)
    if centers is None:
        centers = square_path(frame_count, width, travel)
        centers[:, 1] = height / 2.0 - 0.5
    frames, masks = [], []
    col = np.asarray(color, np.float64)
    for cx, cy in centers:
        m = _square_mask(width, height, cx, cy, side)
        frames.append(bg * (1 - m[..., None]) + col * m[..., None])
        masks.append(m)
    return np.stack(frames).astype(np.float32), np.asarray(centers), np.stack(masks)


def static_then_moving_video(width: int = 32, height: int = 32, static_frames: int = 32, moving_frames: int = 32,
                             side: float = 8.0, radius: float = 9.0, turns: float = 2.0):
    """A still scene followed by a square circling fast around the centre."""
    n = static_frames + moving_frames
    centers = np.zeros((n, 2))
    c = (width / 2.0 - 0.5, height / 2.0 - 0.5)
    centers[:static_frames] = (c[0] + radius, c[1])
    phase = np.linspace(0.0, 2 * np.pi * turns, moving_frames + 1)[1:]
    centers[static_frames:, 0] = c[0] + radius * np.cos(phase)
    centers[static_frames:, 1] = c[1] + radius * np.sin(phase)
    return moving_square_video(width, height, n, side=side, centers=centers)


def mask_centroid(weights: np.ndarray) -> np.ndarray:
    """Weighted centroid (x, y) in pixel coordinates."""
    w = np.clip(weights, 0, None)
    y, x = np.mgrid[0:w.shape[0], 0:w.shape[1]]
    s = w.sum()
    return np.array([(w * x).sum() / s, (w * y).sum() / s])
