"""Accumulation-blending rasterizer for 2D Gaussians and its analytic adjoint.

Positions are normalized screen coordinates; scales (and therefore the
covariance) are measured in pixels, so the quadratic form is evaluated on
pixel-space displacements.  Every pixel receives the plain sum of ``color * exp(-sigma)`` over the
Gaussians whose 3-sigma ellipse covers it.  There is no opacity and no depth
order.  Gaussians are put in a canonical order before binning so the result
is bit-identical under any permutation of the input list.

Work is split into square tiles.  The forward kernel writes disjoint pixel
blocks per tile; the backward kernel writes per (tile, Gaussian) partial
gradients that are reduced serially, so results do not depend on the thread
count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .gaussian import DET_EPS, DegenerateGaussianError, DeformedGaussians, build_covariance, invert_covariance


def _omp_ok() -> bool:
    try:
        from numba.np.ufunc import omppool  # noqa: F401
    except ImportError:
        return False
    return True


log = logging.getLogger(__name__)

if numba.config.THREADING_LAYER == "default":
    # the bundled TBB is often too old and numba warns on every import
    numba.config.THREADING_LAYER = "omp" if _omp_ok() else "workqueue"

DEFAULT_TILE = 16
CUTOFF_SIGMA = 4.5  # sigma >= 4.5 is outside the 3-sigma ellipse


@dataclass
class RenderStats:
    skipped: int = 0
    calls: int = 0


@dataclass
class TileIndex:
    """CSR list of Gaussian ids per tile, tiles in row-major order."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (tiles_x * tiles_y + 1,)
    ids: np.ndarray

    def tile(self, tx: int, ty: int) -> np.ndarray:
        k = ty * self.tiles_x + tx
        return self.ids[self.offsets[k]:self.offsets[k + 1]]


@dataclass
class Gradients:
    mu: np.ndarray
    scale: np.ndarray
    theta: np.ndarray
    color: np.ndarray
    extra: dict = field(default_factory=dict)


def pixel_centers(width: int, height: int, dtype=np.float64):
    """Normalized coordinates of pixel centres: (xs (W,), ys (H,))."""
    xs = (2.0 * (np.arange(width) + 0.5) / width - 1.0).astype(dtype)
    ys = (2.0 * (np.arange(height) + 0.5) / height - 1.0).astype(dtype)
    return xs, ys


def to_pixels(mu: np.ndarray, width: int, height: int) -> np.ndarray:
    """Normalized positions -> pixel coordinates where pixel (i, j) has centre (j, i)."""
    out = np.empty(mu.shape, dtype=np.float64)
    out[:, 0] = (mu[:, 0] + 1.0) * (width / 2.0) - 0.5
    out[:, 1] = (mu[:, 1] + 1.0) * (height / 2.0) - 0.5
    return out


def canonical_order(g: DeformedGaussians) -> np.ndarray:
    keys = (g.color[:, 2], g.color[:, 1], g.color[:, 0], g.theta,
            g.scale[:, 1], g.scale[:, 0], g.mu[:, 1], g.mu[:, 0])
    return np.lexsort(keys)


def _geometry(g: DeformedGaussians):
    """Per-Gaussian kernel inputs, axis-aligned standard deviations and validity.

    The kernels evaluate sigma in the Gaussian's own frame,
    u = c dx + s dy, v = -s dx + c dy, sigma = (u^2 / sx^2 + v^2 / sy^2) / 2,
    which equals the inverse-covariance quadratic form but cannot go negative
    through cancellation.  Columns: cos, sin, 1/sx^2, 1/sy^2, 1/sx^3, 1/sy^3.
    """
    theta = g.theta.astype(np.float64)
    sx = g.scale[:, 0].astype(np.float64)
    sy = g.scale[:, 1].astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    det = (sx * sy) ** 2
    valid = (det >= DET_EPS) & np.isfinite(det) & np.isfinite(theta) & np.all(np.isfinite(g.mu), axis=1)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        p, q = 1.0 / (sx * sx), 1.0 / (sy * sy)
        geom = np.stack([c, s, p, q, p / sx, q / sy], axis=1)
    geom[~valid] = 0.0
    std_x = np.sqrt(c * c * sx * sx + s * s * sy * sy)
    std_y = np.sqrt(s * s * sx * sx + c * c * sy * sy)
    return geom, std_x, std_y, valid


def _pixel_boxes(mu_pix, std_x, std_y, valid, width, height, cutoff):
    """Inclusive pixel boxes (x0, x1, y0, y1); empty boxes have x0 > x1."""
    radius = np.sqrt(2.0 * cutoff) if np.isfinite(cutoff) else np.inf
    cx, cy = mu_pix[:, 0], mu_pix[:, 1]
    # one pixel of slack; the kernels apply the exact ellipse test
    ex = radius * std_x.astype(np.float64) + 1.0
    ey = radius * std_y.astype(np.float64) + 1.0
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.floor(cx - ex), 0, width)
        x1 = np.clip(np.ceil(cx + ex), -1, width - 1)
        y0 = np.clip(np.floor(cy - ey), 0, height)
        y1 = np.clip(np.ceil(cy + ey), -1, height - 1)
    boxes = np.stack([x0, x1, y0, y1], axis=1)
    boxes = np.nan_to_num(boxes, nan=0.0).astype(np.int64)
    boxes[~valid] = (1, 0, 1, 0)
    return boxes


@njit(cache=True)
def _bin_tiles(boxes, tile_size, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    n = boxes.shape[0]
    for i in range(n):
        x0, x1, y0, y1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile_size, y1 // tile_size + 1):
            for tx in range(x0 // tile_size, x1 // tile_size + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        x0, x1, y0, y1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile_size, y1 // tile_size + 1):
            for tx in range(x0 // tile_size, x1 // tile_size + 1):
                k = ty * tiles_x + tx
                ids[fill[k]] = i
                fill[k] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def _forward_kernel(mu, geom, color, boxes, offsets, ids, tile_size, tiles_x, cutoff, out):
    height, width = out.shape[0], out.shape[1]
    n_tiles = offsets.shape[0] - 1
    zero = out[0, 0, 0] * 0
    for tile in prange(n_tiles):
        start, stop = offsets[tile], offsets[tile + 1]
        m = stop - start
        tx = tile % tiles_x
        ty = tile // tiles_x
        # gather the tile's Gaussians into contiguous rows (same canonical order)
        loc = np.empty((m, 7), dtype=mu.dtype)
        box = np.empty((m, 4), dtype=np.int64)
        for k in range(m):
            n = ids[start + k]
            loc[k, 0] = mu[n, 0]
            loc[k, 1] = mu[n, 1]
            for c in range(4):
                loc[k, 2 + c] = geom[n, c]
                box[k, c] = boxes[n, c]
            loc[k, 6] = 0
        active = np.empty(m, dtype=np.int64)
        for i in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            # outside its pixel box a Gaussian is past the cutoff, so skipping it changes nothing
            na = 0
            for k in range(m):
                if box[k, 2] <= i and i <= box[k, 3]:
                    active[na] = k
                    na += 1
            for j in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                r = zero
                gr = zero
                bl = zero
                for a in range(na):
                    k = active[a]
                    if j < box[k, 0] or j > box[k, 1]:
                        continue
                    n = ids[start + k]
                    dx = j - loc[k, 0]
                    dy = i - loc[k, 1]
                    u = loc[k, 2] * dx + loc[k, 3] * dy
                    v = loc[k, 2] * dy - loc[k, 3] * dx
                    sig = 0.5 * (u * u * loc[k, 4] + v * v * loc[k, 5])
                    if sig < cutoff:
                        w = np.exp(-sig)
                        r += color[n, 0] * w
                        gr += color[n, 1] * w
                        bl += color[n, 2] * w
                out[i, j, 0] = r
                out[i, j, 1] = gr
                out[i, j, 2] = bl


@njit(parallel=True, cache=True)
def _backward_kernel(mu, geom, color, offsets, ids, tile_size, tiles_x, cutoff, grad_out, partial):
    # partial[k] holds (dmu_x, dmu_y, dsx, dsy, dtheta, dc0, dc1, dc2) for tile entry k, mu in pixels
    height, width = grad_out.shape[0], grad_out.shape[1]
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start, stop = offsets[tile], offsets[tile + 1]
        tx = tile % tiles_x
        ty = tile // tiles_x
        for i in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for j in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                g0, g1, g2 = grad_out[i, j, 0], grad_out[i, j, 1], grad_out[i, j, 2]
                if g0 == 0 and g1 == 0 and g2 == 0:
                    continue
                for k in range(start, stop):
                    n = ids[k]
                    dx = j - mu[n, 0]
                    dy = i - mu[n, 1]
                    c, s, p, q = geom[n, 0], geom[n, 1], geom[n, 2], geom[n, 3]
                    u = c * dx + s * dy
                    v = c * dy - s * dx
                    sig = 0.5 * (u * u * p + v * v * q)
                    if sig < cutoff:
                        w = np.exp(-sig)
                        partial[k, 5] += g0 * w
                        partial[k, 6] += g1 * w
                        partial[k, 7] += g2 * w
                        dsig = -w * (g0 * color[n, 0] + g1 * color[n, 1] + g2 * color[n, 2])
                        up = u * p
                        vq = v * q
                        partial[k, 0] -= dsig * (c * up - s * vq)
                        partial[k, 1] -= dsig * (s * up + c * vq)
                        partial[k, 2] -= dsig * u * u * geom[n, 4]
                        partial[k, 3] -= dsig * v * v * geom[n, 5]
                        partial[k, 4] += dsig * u * v * (p - q)


@njit(cache=True)
def _reduce_partials(ids, partial, n):
    out = np.zeros((n, 8), dtype=partial.dtype)
    for k in range(ids.shape[0]):
        for c in range(8):
            out[ids[k], c] += partial[k, c]
    return out


@dataclass
class _Prepared:
    order: np.ndarray
    g: DeformedGaussians
    mu_pix: np.ndarray
    geom: np.ndarray
    valid: np.ndarray
    boxes: np.ndarray
    tiles: TileIndex


def _prepare(gaussians, width, height, tile_size, cutoff, stats):
    if width < 1 or height < 1:
        raise ValueError("frame dimensions must be positive")
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    order = canonical_order(gaussians)
    g = gaussians.subset(order)
    geom, std_x, std_y, valid = _geometry(g)
    skipped = int((~valid).sum())
    if skipped:
        log.debug("skipping %d degenerate Gaussians", skipped)
    if stats is not None:
        stats.skipped += skipped
        stats.calls += 1
    mu_pix = to_pixels(g.mu, width, height)
    boxes = _pixel_boxes(mu_pix, std_x, std_y, valid, width, height, cutoff)
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    offsets, ids = _bin_tiles(boxes, tile_size, tiles_x, tiles_y)
    return _Prepared(order, g, mu_pix, geom, valid, boxes, TileIndex(tile_size, tiles_x, tiles_y, offsets, ids))


def build_tiles(gaussians: DeformedGaussians, width: int, height: int, tile_size: int = DEFAULT_TILE,
                cutoff: float = CUTOFF_SIGMA) -> TileIndex:
    """Tile index over the caller's Gaussian ids (not the canonical order)."""
    prep = _prepare(gaussians, width, height, tile_size, cutoff, None)
    t = prep.tiles
    return TileIndex(t.tile_size, t.tiles_x, t.tiles_y, t.offsets, prep.order[t.ids])


def render(gaussians: DeformedGaussians, width: int, height: int, *, tile_size: int = DEFAULT_TILE,
           cutoff: float = CUTOFF_SIGMA, stats: RenderStats | None = None) -> np.ndarray:
    """Render an (H, W, 3) frame; accumulation precision follows the input dtype."""
    dtype = np.result_type(gaussians.mu.dtype, gaussians.color.dtype, np.float32)
    out = np.zeros((height, width, 3), dtype=dtype)
    if len(gaussians) == 0:
        return out
    prep = _prepare(gaussians, width, height, tile_size, cutoff, stats)
    _forward_kernel(prep.mu_pix.astype(dtype), prep.geom.astype(dtype), np.ascontiguousarray(prep.g.color, dtype),
                    prep.boxes, prep.tiles.offsets, prep.tiles.ids, tile_size, prep.tiles.tiles_x, dtype.type(cutoff), out)
    return out


def render_backward(gaussians: DeformedGaussians, frame_grad: np.ndarray, *, tile_size: int = DEFAULT_TILE,
                    cutoff: float = CUTOFF_SIGMA) -> Gradients:
    """Gradients of sum(frame_grad * render(gaussians)) w.r.t. mu, scale, theta, color."""
    height, width = frame_grad.shape[:2]
    if frame_grad.shape != (height, width, 3):
        raise ValueError(f"frame_grad must be (H, W, 3), got {frame_grad.shape}")
    n = len(gaussians)
    dtype = np.result_type(gaussians.mu.dtype, gaussians.color.dtype, np.float32)
    if n == 0:
        z = np.zeros((0, 2), dtype)
        return Gradients(z, z.copy(), np.zeros(0, dtype), np.zeros((0, 3), dtype))
    prep = _prepare(gaussians, width, height, tile_size, cutoff, None)
    partial = np.zeros((prep.tiles.ids.shape[0], 8), dtype=dtype)
    with np.errstate(over="ignore"):
        geom = prep.geom.astype(dtype)
    _backward_kernel(prep.mu_pix.astype(dtype), geom, np.ascontiguousarray(prep.g.color, dtype),
                     prep.tiles.offsets, prep.tiles.ids, tile_size, prep.tiles.tiles_x, dtype.type(cutoff),
                     np.ascontiguousarray(frame_grad, dtype), partial)
    acc = _reduce_partials(prep.tiles.ids, partial, n)
    acc[~prep.valid] = 0
    acc[:, 0] *= width / 2.0
    acc[:, 1] *= height / 2.0
    inv = np.empty_like(prep.order)
    inv[prep.order] = np.arange(n)
    acc = acc[inv]
    return Gradients(mu=acc[:, 0:2], scale=acc[:, 2:4], theta=acc[:, 4], color=acc[:, 5:8])


def render_dense(gaussians: DeformedGaussians, width: int, height: int, cutoff: float = np.inf) -> np.ndarray:
    """Brute-force all-pairs render in float64 through the explicit inverse covariance; reference only."""
    g = gaussians
    out = np.zeros((height, width, 3))
    if len(g) == 0:
        return out
    X, Y = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    mu_pix = to_pixels(np.asarray(g.mu, np.float64), width, height)
    for n in range(len(g)):
        cov = build_covariance(np.asarray(g.scale[n], np.float64), float(g.theta[n]))
        try:
            inv = invert_covariance(cov)
        except DegenerateGaussianError:
            continue
        dx = X - mu_pix[n, 0]
        dy = Y - mu_pix[n, 1]
        sig = 0.5 * (inv[0, 0] * dx * dx + inv[1, 1] * dy * dy) + inv[0, 1] * dx * dy
        w = np.where(sig < cutoff, np.exp(-sig), 0.0)
        out += w[..., None] * np.asarray(g.color[n], np.float64)
    return out


def set_threads(n: int | None) -> int:
    """Cap rasterizer worker threads; returns the effective count."""
    if n is None or n <= 0:
        n = numba.config.NUMBA_NUM_THREADS
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
