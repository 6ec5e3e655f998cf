"""Min-max quantization shared by quantization-aware fine-tuning and the codec."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

VALID_BITS = (8, 16, 32)

# attribute -> bit class
ATTRIBUTE_CLASS = {
    "mu": "position",
    "color": "color",
    "s_raw": "other",
    "theta_raw": "other",
    "poly": "other",
    "alpha_raw": "other",
    "plane_xy": "plane",
    "plane_xt": "plane",
    "plane_yt": "plane",
}


@dataclass(frozen=True)
class BitPlan:
    position: int = 16
    color: int = 16
    other: int = 8
    plane: int = 16

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v not in VALID_BITS:
                raise ValueError(f"{k} bits must be one of {VALID_BITS}, got {v}")

    def bits_for(self, name: str) -> int:
        return getattr(self, ATTRIBUTE_CLASS[name])

    @classmethod
    def lossless(cls) -> "BitPlan":
        return cls(32, 32, 32, 32)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_minmax(values, bits: int, vmin: float | None = None, vmax: float | None = None):
    """Map values onto integer codes 0 .. 2**bits - 1.

    Returns ``(codes, vmin, vmax)``.  A degenerate range gives all-zero codes.
    """
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    levels = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    if hi <= lo:
        return np.zeros(v.shape, dtype), lo, hi
    codes = round_half_away((v - lo) / (hi - lo) * levels)
    return np.clip(codes, 0, levels).astype(dtype), lo, hi


def dequantize_minmax(codes, bits: int, vmin: float, vmax: float, dtype=np.float32) -> np.ndarray:
    levels = (1 << bits) - 1
    c = np.asarray(codes, dtype=np.float64)
    if vmax <= vmin:
        return np.full(c.shape, vmin, dtype=dtype)
    return (vmin + c / levels * (vmax - vmin)).astype(dtype)


def channel_view(name: str, arr: np.ndarray) -> np.ndarray:
    """2D view (channels, samples): planes per feature channel, Gaussian attributes per column."""
    if name.startswith("plane_"):
        return arr.reshape(arr.shape[0], -1)
    return arr.reshape(arr.shape[0], -1).T


def channel_ranges(name: str, arr: np.ndarray) -> np.ndarray:
    """(channels, 2) float32 min/max, as stored in the container."""
    v = channel_view(name, arr).astype(np.float64)
    lo, hi = v.min(axis=1), v.max(axis=1)
    lo32, hi32 = lo.astype(np.float32), hi.astype(np.float32)
    # round outward so every value stays inside the stored float32 range
    lo32 = np.where(lo32 > lo, np.nextafter(lo32, np.float32(-np.inf)), lo32)
    hi32 = np.where(hi32 < hi, np.nextafter(hi32, np.float32(np.inf)), hi32)
    return np.stack([lo32, hi32], axis=1)


def quantize_array(name: str, arr: np.ndarray, bits: int):
    """Per-channel codes (channels, samples) and float32 ranges (channels, 2)."""
    ranges = channel_ranges(name, arr)
    view = channel_view(name, arr)
    codes = np.stack([quantize_minmax(view[c], bits, ranges[c, 0], ranges[c, 1])[0] for c in range(view.shape[0])])
    return codes, ranges


def dequantize_array(name: str, codes: np.ndarray, ranges: np.ndarray, bits: int, shape, dtype=np.float32):
    chans = np.stack([dequantize_minmax(codes[c], bits, float(ranges[c, 0]), float(ranges[c, 1]), dtype)
                      for c in range(codes.shape[0])])
    if name.startswith("plane_"):
        return chans.reshape(shape)
    return chans.T.reshape(shape)


def fake_quantize(params: dict[str, np.ndarray], plan: BitPlan) -> dict[str, np.ndarray]:
    """Quantize-dequantize every parameter; 32-bit classes pass through untouched."""
    out = {}
    for name, arr in params.items():
        bits = plan.bits_for(name)
        if bits == 32:
            out[name] = arr
            continue
        codes, ranges = quantize_array(name, arr, bits)
        out[name] = dequantize_array(name, codes, ranges, bits, arr.shape, arr.dtype)
    return out
