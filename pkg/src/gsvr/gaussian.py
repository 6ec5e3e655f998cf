"""Canonical 2D Gaussians: attribute storage, activations and covariance math.

Gaussians are stored as a structure of arrays so that every operation is
vectorised over the Gaussian axis.  Positions live in normalized screen
coordinates ([-1, 1] per axis) and scales are expressed in the same units.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

SCALE_EPS = 1e-6
DET_EPS = 1e-12

# column layout of the 8-channel deformation vector
POS = slice(0, 2)
SCALE = slice(2, 4)
ROT = 4
COLOR = slice(5, 8)
NUM_DELTA_CHANNELS = 8


class InvalidParameterError(ValueError):
    pass


class DegenerateGaussianError(ValueError):
    pass


@dataclass
class Gaussians:
    """Canonical (time independent) Gaussian parameters, one row per Gaussian.

    mu: (N, 2) position, s_raw: (N, 2) log-scale, theta_raw: (N,) pre-tanh
    rotation, color: (N, 3), poly: (N, 3, 2) position polynomial coefficients
    ordered a0, a1, a2, alpha_raw: (N,) pre-sigmoid dynamic indicator.
    """

    mu: np.ndarray
    s_raw: np.ndarray
    theta_raw: np.ndarray
    color: np.ndarray
    poly: np.ndarray
    alpha_raw: np.ndarray

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def dtype(self):
        return self.mu.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "Gaussians":
        return Gaussians(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "Gaussians":
        return Gaussians(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def subset(self, idx) -> "Gaussians":
        return Gaussians(**{k: v[idx] for k, v in self.arrays().items()})

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.s_raw)

    @property
    def theta(self) -> np.ndarray:
        return np.pi * np.tanh(self.theta_raw)

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_raw)


@dataclass
class DeformedGaussians:
    """Gaussians at one timestamp, ready for rasterization."""

    mu: np.ndarray
    scale: np.ndarray
    theta: np.ndarray
    color: np.ndarray

    def __len__(self) -> int:
        return self.mu.shape[0]

    def subset(self, idx) -> "DeformedGaussians":
        return DeformedGaussians(self.mu[idx], self.scale[idx], self.theta[idx], self.color[idx])

    def with_color(self, color: np.ndarray) -> "DeformedGaussians":
        return replace(self, color=color)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidParameterError("non-finite Gaussian parameter")


def build_covariance(scale, theta) -> np.ndarray:
    """Sigma = R S S^T R^T for scale (..., 2) and rotation theta (...).

    Returns an array of shape (..., 2, 2).
    """
    scale = np.asarray(scale)
    theta = np.asarray(theta)
    _check_finite(scale, theta)
    if np.any(scale <= 0):
        raise InvalidParameterError("scale must be positive")
    c, s = np.cos(theta), np.sin(theta)
    sx2, sy2 = scale[..., 0] ** 2, scale[..., 1] ** 2
    cov = np.empty(scale.shape[:-1] + (2, 2), dtype=np.result_type(scale, theta))
    cov[..., 0, 0] = c * c * sx2 + s * s * sy2
    cov[..., 0, 1] = cov[..., 1, 0] = c * s * (sx2 - sy2)
    cov[..., 1, 1] = s * s * sx2 + c * c * sy2
    return cov


def invert_covariance(cov) -> np.ndarray:
    """Closed-form 2x2 inverse; raises on near-singular input."""
    cov = np.asarray(cov)
    a, b, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * d - b * b
    if np.any(det < DET_EPS):
        raise DegenerateGaussianError(f"covariance determinant below {DET_EPS}")
    inv = np.empty_like(cov)
    inv[..., 0, 0] = d / det
    inv[..., 1, 1] = a / det
    inv[..., 0, 1] = inv[..., 1, 0] = -b / det
    return inv


def gaussian_weight(cov, mu, x):
    """exp(-0.5 (x - mu)^T cov^-1 (x - mu)); broadcasts over leading axes."""
    inv = invert_covariance(cov)
    d = np.asarray(x) - np.asarray(mu)
    sigma = 0.5 * (inv[..., 0, 0] * d[..., 0] ** 2
                   + 2.0 * inv[..., 0, 1] * d[..., 0] * d[..., 1]
                   + inv[..., 1, 1] * d[..., 1] ** 2)
    return np.exp(-sigma)


def activate_attributes(g: Gaussians, deltas: np.ndarray, mu_t: np.ndarray | None = None) -> DeformedGaussians:
    """Apply activations and additive deltas (N, 8) to canonical attributes.

    Position is passed through unchanged unless ``mu_t`` is given; fusing the
    position offsets is the deformation field's job.
    """
    deltas = np.asarray(deltas)
    scale_t = np.maximum(g.scale + deltas[:, SCALE], SCALE_EPS).astype(g.dtype, copy=False)
    theta_t = g.theta + deltas[:, ROT]
    color_t = g.color + deltas[:, COLOR]
    return DeformedGaussians(
        mu=g.mu.copy() if mu_t is None else mu_t,
        scale=scale_t,
        theta=theta_t,
        color=color_t,
    )
