"""Hybrid deformation field: tri-plane grids fused with quadratic motion.

The planes are sampled at the canonical position and the GOP-local time
``t`` in [0, 1].  The three interpolated 8-vectors are multiplied
elementwise and the channels become offsets for position (0-1), scale
(2-3), rotation (4) and color (5-7).  Position additionally gets a
per-Gaussian quadratic trajectory, blended with the plane offset by the
sigmoid of the dynamic indicator.  No learned decoder is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gaussian import (COLOR, NUM_DELTA_CHANNELS, POS, ROT, SCALE, SCALE_EPS, DeformedGaussians, Gaussians,
                       activate_attributes, sigmoid)

MOTION_MODES = ("hybrid", "plane", "poly")
PLANE_NAMES = ("plane_xy", "plane_xt", "plane_yt")


@dataclass
class TriPlane:
    """Feature planes of shape (C, N_x, N_y), (C, N_x, N_t) and (C, N_y, N_t)."""

    xy: np.ndarray
    xt: np.ndarray
    yt: np.ndarray

    def __post_init__(self):
        c = {self.xy.shape[0], self.xt.shape[0], self.yt.shape[0]}
        if c != {NUM_DELTA_CHANNELS}:
            raise ValueError(f"all planes need {NUM_DELTA_CHANNELS} channels, got {sorted(c)}")
        nx, ny = self.xy.shape[1:]
        if self.xt.shape[1] != nx or self.yt.shape[1] != ny or self.xt.shape[2] != self.yt.shape[2]:
            raise ValueError("inconsistent plane resolutions")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.xy.shape[1], self.xy.shape[2], self.xt.shape[2]

    @classmethod
    def initial(cls, nx: int, ny: int, nt: int, dtype=np.float32) -> "TriPlane":
        # xy = 0 makes the product vanish while its gradient (xt * yt = 1) stays alive
        return cls(
            np.zeros((NUM_DELTA_CHANNELS, nx, ny), dtype),
            np.ones((NUM_DELTA_CHANNELS, nx, nt), dtype),
            np.ones((NUM_DELTA_CHANNELS, ny, nt), dtype),
        )

    def copy(self) -> "TriPlane":
        return TriPlane(self.xy.copy(), self.xt.copy(), self.yt.copy())

    def astype(self, dtype) -> "TriPlane":
        return TriPlane(self.xy.astype(dtype), self.xt.astype(dtype), self.yt.astype(dtype))


def temporal_resolution(frame_count: int) -> int:
    return max(1, math.ceil(frame_count / 2))


def spatial_resolution(width: int, height: int, long_side: int = 32, short_side: int = 16) -> tuple[int, int]:
    """(N_x, N_y), the longer grid axis following the longer frame axis."""
    return (long_side, short_side) if width >= height else (short_side, long_side)


@dataclass
class GopModel:
    gaussians: Gaussians
    triplane: TriPlane
    frame_range: tuple[int, int]
    motion: str = "hybrid"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.motion not in MOTION_MODES:
            raise ValueError(f"motion must be one of {MOTION_MODES}")
        self.frame_range = (int(self.frame_range[0]), int(self.frame_range[1]))
        if self.frame_range[1] < self.frame_range[0]:
            raise ValueError(f"bad frame range {self.frame_range}")

    @property
    def frame_count(self) -> int:
        return self.frame_range[1] - self.frame_range[0] + 1

    def time_of(self, frame: float) -> float:
        """GOP-local time: first frame -> 0, last frame -> 1, linear between."""
        first, last = self.frame_range
        if last == first:
            return 0.0
        return (frame - first) / (last - first)

    def contains(self, frame: float) -> bool:
        return self.frame_range[0] <= frame <= self.frame_range[1]

    def params(self) -> dict[str, np.ndarray]:
        p = self.gaussians.arrays()
        p.update(plane_xy=self.triplane.xy, plane_xt=self.triplane.xt, plane_yt=self.triplane.yt)
        return p

    def copy(self) -> "GopModel":
        return GopModel(self.gaussians.copy(), self.triplane.copy(), self.frame_range, self.motion, dict(self.meta))

    def astype(self, dtype) -> "GopModel":
        return GopModel(self.gaussians.astype(dtype), self.triplane.astype(dtype), self.frame_range,
                        self.motion, dict(self.meta))

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], frame_range, motion="hybrid", meta=None) -> "GopModel":
        g = Gaussians(**{k: params[k] for k in ("mu", "s_raw", "theta_raw", "color", "poly", "alpha_raw")})
        tp = TriPlane(params["plane_xy"], params["plane_xt"], params["plane_yt"])
        return cls(g, tp, frame_range, motion, dict(meta or {}))


def _grid_coord(v, n):
    """Map v in [-1, 1] (or [0, 1] when ``n`` is temporal) to clamped grid coordinates."""
    u = np.clip(v, 0.0, n - 1.0)
    inside = (v > 0.0) & (v < n - 1.0)
    return u, inside


def _bilinear(plane, u, v):
    """Sample plane (C, Nu, Nv) at grid coords u, v (N,) -> values (N, C) and a cache."""
    nu, nv = plane.shape[1], plane.shape[2]
    i0 = np.minimum(np.floor(u).astype(np.int64), max(nu - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(nv - 2, 0))
    i1 = np.minimum(i0 + 1, nu - 1)
    j1 = np.minimum(j0 + 1, nv - 1)
    fu = (u - i0).astype(plane.dtype)
    fv = (v - j0).astype(plane.dtype)
    v00, v01 = plane[:, i0, j0].T, plane[:, i0, j1].T
    v10, v11 = plane[:, i1, j0].T, plane[:, i1, j1].T
    fu_, fv_ = fu[:, None], fv[:, None]
    out = (1 - fu_) * (1 - fv_) * v00 + (1 - fu_) * fv_ * v01 + fu_ * (1 - fv_) * v10 + fu_ * fv_ * v11
    return out, (i0, i1, j0, j1, fu, fv, v00, v01, v10, v11)


def _bilinear_backward(plane_shape, dtype, cache, grad):
    """Scatter grad (N, C) into a plane-shaped array; also d/du, d/dv per sample."""
    i0, i1, j0, j1, fu, fv, v00, v01, v10, v11 = cache
    fu_, fv_ = fu[:, None], fv[:, None]
    dplane = np.zeros(plane_shape, dtype)
    for (ii, jj, w) in ((i0, j0, (1 - fu_) * (1 - fv_)), (i0, j1, (1 - fu_) * fv_),
                        (i1, j0, fu_ * (1 - fv_)), (i1, j1, fu_ * fv_)):
        np.add.at(dplane.transpose(1, 2, 0), (ii, jj), grad * w)
    du = np.sum(grad * ((1 - fv_) * (v10 - v00) + fv_ * (v11 - v01)), axis=1)
    dv = np.sum(grad * ((1 - fu_) * (v01 - v00) + fu_ * (v11 - v10)), axis=1)
    return dplane, du, dv


class _PlaneQuery:
    """Tri-plane lookup that keeps what the backward pass needs."""

    def __init__(self, tp: TriPlane, mu: np.ndarray, t: float):
        nx, ny, nt = tp.resolution
        dtype = tp.xy.dtype
        gx = (mu[:, 0].astype(np.float64) + 1.0) * 0.5 * (nx - 1)
        gy = (mu[:, 1].astype(np.float64) + 1.0) * 0.5 * (ny - 1)
        gt = np.full(mu.shape[0], float(t) * (nt - 1))
        self.ux, in_x = _grid_coord(gx, nx)
        self.uy, in_y = _grid_coord(gy, ny)
        self.ut, _ = _grid_coord(gt, nt)
        self.dx_scale = np.where(in_x, 0.5 * (nx - 1), 0.0)
        self.dy_scale = np.where(in_y, 0.5 * (ny - 1), 0.0)
        self.tp = tp
        self.vxy, self.cxy = _bilinear(tp.xy, self.ux, self.uy)
        self.vxt, self.cxt = _bilinear(tp.xt, self.ux, self.ut)
        self.vyt, self.cyt = _bilinear(tp.yt, self.uy, self.ut)
        self.value = (self.vxy * self.vxt * self.vyt).astype(dtype, copy=False)

    def backward(self, grad):
        """grad (N, 8) -> (d plane_xy, d plane_xt, d plane_yt, d mu (N, 2))."""
        tp = self.tp
        gxy, dxa, dya = _bilinear_backward(tp.xy.shape, tp.xy.dtype, self.cxy, grad * self.vxt * self.vyt)
        gxt, dxb, _ = _bilinear_backward(tp.xt.shape, tp.xt.dtype, self.cxt, grad * self.vxy * self.vyt)
        gyt, dyb, _ = _bilinear_backward(tp.yt.shape, tp.yt.dtype, self.cyt, grad * self.vxy * self.vxt)
        dmu = np.stack([(dxa + dxb) * self.dx_scale, (dya + dyb) * self.dy_scale], axis=1)
        return gxy, gxt, gyt, dmu


def query_triplane(tp: TriPlane, mu: np.ndarray, t: float) -> np.ndarray:
    """Elementwise product of the three bilinearly sampled plane features, shape (N, 8)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=tp.xy.dtype))
    return _PlaneQuery(tp, mu, t).value


def poly_offset(g: Gaussians, t: float) -> np.ndarray:
    """a2 t^2 + a1 t + a0 for every Gaussian, shape (N, 2)."""
    a = g.poly
    return (a[:, 2] * t + a[:, 1]) * t + a[:, 0]


def fuse_position(g: Gaussians, dmu_plane: np.ndarray, dmu_poly: np.ndarray) -> np.ndarray:
    alpha = g.alpha[:, None]
    return g.mu + alpha * dmu_poly + (1 - alpha) * dmu_plane


def _check_t(t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


def deform(gop: GopModel, t: float) -> DeformedGaussians:
    """Deformed Gaussians of ``gop`` at GOP-local time ``t``."""
    return deform_with_grad(gop, t, need_grad=False)[0]


def deform_with_grad(gop: GopModel, t: float, need_grad: bool = True
                     ) -> tuple[DeformedGaussians, Callable[..., dict[str, np.ndarray]] | None]:
    """Deform and return a closure mapping deformed-attribute gradients to parameter gradients."""
    _check_t(t)
    g = gop.gaussians
    t = g.dtype.type(t)
    n = len(g)
    if gop.motion == "poly":
        query = None
        deltas = np.zeros((n, NUM_DELTA_CHANNELS), g.dtype)
    else:
        query = _PlaneQuery(gop.triplane, g.mu, t)
        deltas = query.value
    dmu_poly = poly_offset(g, t)
    alpha = g.alpha
    if gop.motion == "hybrid":
        mu_t = fuse_position(g, deltas[:, POS], dmu_poly)
    elif gop.motion == "plane":
        mu_t = g.mu + deltas[:, POS]
    else:
        mu_t = g.mu + dmu_poly
    out = activate_attributes(g, deltas, mu_t=mu_t.astype(g.dtype, copy=False))
    if not need_grad:
        return out, None

    unclamped = (g.scale + deltas[:, SCALE]) > SCALE_EPS

    def backward(d_mu, d_scale, d_theta, d_color) -> dict[str, np.ndarray]:
        d_scale = d_scale * unclamped
        grads = {
            "s_raw": d_scale * g.scale,
            "theta_raw": d_theta * np.pi * (1 - np.tanh(g.theta_raw) ** 2),
            "color": d_color.copy(),
        }
        if gop.motion == "hybrid":
            w_poly, w_plane = alpha, 1 - alpha
        elif gop.motion == "plane":
            w_poly, w_plane = np.zeros_like(alpha), np.ones_like(alpha)
        else:
            w_poly, w_plane = np.ones_like(alpha), np.zeros_like(alpha)
        powers = np.array([1, t, t * t], dtype=g.dtype)
        grads["poly"] = (d_mu * w_poly[:, None])[:, None, :] * powers[None, :, None]
        if gop.motion == "hybrid":
            spread = np.sum(d_mu * (dmu_poly - deltas[:, POS]), axis=1)
            grads["alpha_raw"] = spread * alpha * (1 - alpha)
        else:
            grads["alpha_raw"] = np.zeros_like(alpha)
        d_mu_canon = d_mu.copy()
        if query is not None:
            d_deltas = np.zeros_like(deltas)
            d_deltas[:, POS] = d_mu * w_plane[:, None]
            d_deltas[:, SCALE] = d_scale
            d_deltas[:, ROT] = d_theta
            d_deltas[:, COLOR] = d_color
            gxy, gxt, gyt, dmu_plane = query.backward(d_deltas)
            d_mu_canon += dmu_plane
        else:
            gxy, gxt, gyt = (np.zeros_like(p) for p in (gop.triplane.xy, gop.triplane.xt, gop.triplane.yt))
        grads.update(mu=d_mu_canon, plane_xy=gxy, plane_xt=gxt, plane_yt=gyt)
        return {k: np.asarray(v, dtype=g.dtype) for k, v in grads.items()}

    return out, backward


def split_by_indicator(gop: GopModel, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian ids with sigmoid(alpha_raw) above / not above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    alpha = sigmoid(gop.gaussians.alpha_raw.astype(np.float64))
    dynamic = alpha > threshold
    return np.flatnonzero(dynamic), np.flatnonzero(~dynamic)
