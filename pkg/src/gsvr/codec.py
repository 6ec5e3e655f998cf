"""Compressed container for trained GOP models.

Attributes are min-max quantized per channel, Gaussians are sorted along a
Morton curve of their quantized positions and written row-major into square
grids. Grids of the same bit depth are stacked into one lossless image, and
each tri-plane is stored as its own image.
The byte layout is described in FORMAT.md.
"""

from __future__ import annotations

import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field

import cv2
import numpy as np

from .deform import MOTION_MODES, GopModel
from .gaussian import Gaussians
from .quant import BitPlan, dequantize_array, quantize_array, quantize_minmax

log = logging.getLogger(__name__)

MAGIC = b"GSVR"
GOP_TAG = b"GOPB"
VERSION = (1, 0)
CODECS = {"png": 0, "deflate": 1}

GAUSSIAN_ATTRS = ("mu", "s_raw", "theta_raw", "color", "poly", "alpha_raw")
PLANE_ATTRS = ("plane_xy", "plane_xt", "plane_yt")
ATTR_CHANNELS = {"mu": 2, "s_raw": 2, "theta_raw": 1, "color": 3, "poly": 6, "alpha_raw": 1}
ATTR_SHAPES = {"mu": (2,), "s_raw": (2,), "theta_raw": (), "color": (3,), "poly": (3, 2), "alpha_raw": ()}


class ContainerError(ValueError):
    """Corrupt or unsupported container; ``section`` names where decoding failed."""

    def __init__(self, section: str, message: str):
        super().__init__(f"{section}: {message}")
        self.section = section


@dataclass
class Container:
    width: int
    height: int
    frame_count: int
    gops: list[GopModel]
    plan: BitPlan = field(default_factory=BitPlan)
    fps: float = 30.0
    codec: str = "png"

    def gop_for_frame(self, frame: float) -> GopModel:
        for g in self.gops:
            if g.contains(frame):
                return g
        raise IndexError(f"frame {frame} outside all GOP ranges")

    @property
    def param_count(self) -> int:
        return sum(param_count(g) for g in self.gops)


def param_count(gop: GopModel) -> int:
    return sum(int(np.prod(v.shape)) for v in gop.params().values())


# ---------------------------------------------------------------- packing

def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x33333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x55555555)
    return v


def morton_codes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Interleave two 16-bit integer arrays into 32-bit Z-order keys (x in the even bits)."""
    return _spread_bits(x) | (_spread_bits(y) << np.uint64(1))


def morton_order(mu: np.ndarray) -> np.ndarray:
    """Stable permutation sorting Gaussians along the Z curve of 16-bit quantized positions."""
    qx = quantize_minmax(mu[:, 0], 16)[0]
    qy = quantize_minmax(mu[:, 1], 16)[0]
    return np.argsort(morton_codes(qx, qy), kind="stable")


def grid_side(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def pack_grid(channel: np.ndarray) -> np.ndarray:
    """Write a 1-D channel row-major into a side x side grid; padding repeats the last value."""
    n = channel.shape[0]
    side = grid_side(n)
    out = np.empty(side * side, dtype=channel.dtype)
    out[:n] = channel
    out[n:] = channel[-1] if n else 0
    return out.reshape(side, side)


def unpack_grid(grid: np.ndarray, n: int) -> np.ndarray:
    return grid.reshape(-1)[:n]


# ---------------------------------------------------------------- quantized model

@dataclass
class QuantizedGop:
    """Integer codes (channels, samples) and float32 ranges per attribute, Gaussians in Morton order."""

    frame_range: tuple[int, int]
    motion: str
    resolution: tuple[int, int, int]
    n: int
    codes: dict[str, np.ndarray]
    ranges: dict[str, np.ndarray]
    plan: BitPlan

    def dequantize(self, dtype=np.float32) -> GopModel:
        params = {}
        nx, ny, nt = self.resolution
        shapes = {"plane_xy": (8, nx, ny), "plane_xt": (8, nx, nt), "plane_yt": (8, ny, nt)}
        for name, codes in self.codes.items():
            bits = self.plan.bits_for(name)
            shape = shapes.get(name, (self.n,) + ATTR_SHAPES.get(name, ()))
            if bits == 32:
                params[name] = _raw_to_array(name, codes, shape).astype(dtype)
            else:
                params[name] = dequantize_array(name, codes, self.ranges[name], bits, shape, dtype)
        return GopModel.from_params(params, self.frame_range, self.motion)


def _array_to_raw(name, arr):
    """32-bit passthrough: channels x samples float32."""
    a = np.asarray(arr, np.float32)
    return a.reshape(a.shape[0], -1) if name.startswith("plane_") else a.reshape(a.shape[0], -1).T.copy()


def _raw_to_array(name, chans, shape):
    return chans.reshape(shape) if name.startswith("plane_") else chans.T.reshape(shape)


def quantize_gop(gop: GopModel, plan: BitPlan | None = None) -> QuantizedGop:
    plan = plan or BitPlan()
    order = morton_order(gop.gaussians.mu)
    g = gop.gaussians.subset(order)
    arrays = dict(g.arrays())
    arrays.update(plane_xy=gop.triplane.xy, plane_xt=gop.triplane.xt, plane_yt=gop.triplane.yt)
    codes, ranges = {}, {}
    for name in GAUSSIAN_ATTRS + PLANE_ATTRS:
        bits = plan.bits_for(name)
        if bits == 32:
            codes[name] = _array_to_raw(name, arrays[name])
            ranges[name] = np.zeros((codes[name].shape[0], 2), np.float32)
        else:
            codes[name], ranges[name] = quantize_array(name, arrays[name], bits)
    return QuantizedGop(gop.frame_range, gop.motion, gop.triplane.resolution, len(g), codes, ranges, plan)


# ---------------------------------------------------------------- images

def _encode_image(img: np.ndarray, codec: str) -> bytes:
    img = np.ascontiguousarray(img)
    if codec == "deflate" or img.dtype == np.float32:
        return zlib.compress(img.astype(img.dtype.newbyteorder("<")).tobytes(), 9)
    ok, buf = cv2.imencode(".png", img, [cv2.IMWRITE_PNG_COMPRESSION, 9])
    if not ok:
        raise ContainerError("image", "PNG encoding failed")
    return buf.tobytes()


def _decode_image(blob: bytes, shape, dtype, codec: str, section: str) -> np.ndarray:
    dtype = np.dtype(dtype)
    if codec == "deflate" or dtype == np.float32:
        try:
            raw = zlib.decompress(blob)
        except zlib.error as e:
            raise ContainerError(section, f"corrupt deflate blob ({e})") from None
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<"))
        if arr.size != int(np.prod(shape)):
            raise ContainerError(section, "blob size mismatch")
        return arr.reshape(shape).astype(dtype)
    img = cv2.imdecode(np.frombuffer(blob, np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None or img.shape != tuple(shape) or img.dtype != dtype:
        raise ContainerError(section, "corrupt or mismatched PNG image")
    return img


def _code_dtype(bits):
    return {8: np.uint8, 16: np.uint16, 32: np.float32}[bits]


# ---------------------------------------------------------------- writer

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def blob(self, data: bytes):
        self.pack("I", len(data))
        self.buf.write(data)

    def getvalue(self):
        return self.buf.getvalue()


def _encode_gop(q: QuantizedGop, codec: str) -> bytes:
    w = _Writer()
    w.buf.write(GOP_TAG)
    side = grid_side(q.n)
    w.pack("IIB3x", q.n, side, MOTION_MODES.index(q.motion))
    w.pack("III", *q.resolution)
    for name in GAUSSIAN_ATTRS + PLANE_ATTRS:
        for lo, hi in q.ranges[name]:
            w.pack("ff", lo, hi)
    blobs = []
    for bits, names in attribute_groups(q.plan):
        grids = [pack_grid(chan) for name in names for chan in q.codes[name]]
        blobs.append(_encode_image(np.concatenate(grids, axis=0), codec))
    for name in PLANE_ATTRS:
        c = q.codes[name]
        blobs.append(_encode_image(c.reshape(-1, _plane_cols(name, q.resolution)), codec))
    w.pack("I", len(blobs))
    for b in blobs:
        w.blob(b)
    return w.getvalue()


def attribute_groups(plan: BitPlan) -> list[tuple[int, list[str]]]:
    """Gaussian attributes grouped by bit depth (ascending), attribute order kept within a group."""
    depths = sorted({plan.bits_for(n) for n in GAUSSIAN_ATTRS})
    return [(b, [n for n in GAUSSIAN_ATTRS if plan.bits_for(n) == b]) for b in depths]


def _plane_cols(name, res):
    nx, ny, nt = res
    return {"plane_xy": ny, "plane_xt": nt, "plane_yt": nt}[name]


def _plane_rows(name, res):
    nx, ny, nt = res
    return {"plane_xy": nx, "plane_xt": nx, "plane_yt": ny}[name]


def encode_container(container: Container, quantized: list[QuantizedGop] | None = None) -> bytes:
    """Serialize all GOPs; float models are quantized with ``container.plan`` first."""
    if container.codec not in CODECS:
        raise ValueError(f"unknown codec {container.codec!r}")
    plan = container.plan
    qs = quantized or [quantize_gop(g, plan) for g in container.gops]
    blocks = []
    for i, q in enumerate(qs):
        try:
            blocks.append(_encode_gop(q, container.codec))
        except (OSError, cv2.error) as e:
            raise ContainerError(f"gop {i}", f"encoding failed: {e}") from e
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("BBH", VERSION[0], VERSION[1], 0)
    w.pack("IIIfI", container.width, container.height, container.frame_count, container.fps, len(qs))
    w.pack("BBBBB3x", plan.position, plan.color, plan.other, plan.plane, CODECS[container.codec])
    for q, b in zip(qs, blocks):
        w.pack("IIQ", q.frame_range[0], q.frame_range[1], len(b))
    for b in blocks:
        w.buf.write(b)
    return w.getvalue()


# ---------------------------------------------------------------- reader

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(section, "unexpected end of stream")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def _decode_gop(data: bytes, frame_range, plan: BitPlan, codec: str, section: str) -> QuantizedGop:
    r = _Reader(data)
    if r.take(4, section) != GOP_TAG:
        raise ContainerError(section, "missing GOP tag")
    n, side, motion = r.unpack("IIB3x", section)
    if motion >= len(MOTION_MODES) or side != grid_side(n) or n < 1:
        raise ContainerError(section, "inconsistent GOP header")
    res = r.unpack("III", section)
    ranges = {}
    for name in GAUSSIAN_ATTRS + PLANE_ATTRS:
        chans = ATTR_CHANNELS.get(name, 8)
        ranges[name] = np.array(r.unpack("ff" * chans, section), dtype=np.float32).reshape(chans, 2)
    (count,) = r.unpack("I", section)
    groups = attribute_groups(plan)
    expected = len(groups) + len(PLANE_ATTRS)
    if count != expected:
        raise ContainerError(section, f"expected {expected} images, found {count}")
    codes = {}
    for bits, names in groups:
        rows = sum(ATTR_CHANNELS[name] for name in names)
        (ln,) = r.unpack("I", section)
        label = f"{section} {bits}-bit attributes"
        img = _decode_image(r.take(ln, section), (rows * side, side), _code_dtype(bits), codec, label)
        grids = img.reshape(rows, side, side)
        k = 0
        for name in names:
            chans = ATTR_CHANNELS[name]
            codes[name] = np.stack([unpack_grid(grids[k + c], n) for c in range(chans)])
            k += chans
    for name in PLANE_ATTRS:
        dtype = _code_dtype(plan.bits_for(name))
        rows, cols = _plane_rows(name, res), _plane_cols(name, res)
        (ln,) = r.unpack("I", section)
        img = _decode_image(r.take(ln, section), (8 * rows, cols), dtype, codec, f"{section} {name}")
        codes[name] = img.reshape(8, rows * cols)
    if r.pos != len(data):
        raise ContainerError(section, "trailing bytes in GOP block")
    return QuantizedGop(tuple(frame_range), MOTION_MODES[motion], tuple(res), n, codes, ranges, plan)


def read_header(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(4, "header") != MAGIC:
        raise ContainerError("header", "bad magic")
    major, minor, _ = r.unpack("BBH", "header")
    if major != VERSION[0]:
        raise ContainerError("header", f"unsupported major version {major}")
    if minor > VERSION[1]:
        log.warning("container minor version %d is newer than %d; decoding anyway", minor, VERSION[1])
    width, height, frames, fps, n_gops = r.unpack("IIIfI", "header")
    pos, col, oth, pla, codec_id = r.unpack("BBBBB3x", "header")
    try:
        plan = BitPlan(pos, col, oth, pla)
    except ValueError as e:
        raise ContainerError("header", str(e)) from None
    codecs = {v: k for k, v in CODECS.items()}
    if codec_id not in codecs:
        raise ContainerError("header", f"unknown image codec id {codec_id}")
    table = [r.unpack("IIQ", "gop table") for _ in range(n_gops)]
    return dict(version=(major, minor), width=width, height=height, frame_count=frames, fps=fps,
                plan=plan, codec=codecs[codec_id], table=table, body_offset=r.pos)


def decode_quantized(data: bytes) -> tuple[dict, list[QuantizedGop]]:
    head = read_header(data)
    r = _Reader(data)
    r.pos = head["body_offset"]
    qs = []
    for i, (a, b, ln) in enumerate(head["table"]):
        block = r.take(ln, f"gop {i}")
        qs.append(_decode_gop(block, (a, b), head["plan"], head["codec"], f"gop {i}"))
    if r.pos != len(data):
        raise ContainerError("trailer", "trailing bytes after last GOP")
    return head, qs


def decode_container(data: bytes) -> Container:
    head, qs = decode_quantized(data)
    gops = []
    for q in qs:
        g = q.dequantize()
        g.meta.update(width=head["width"], height=head["height"])
        gops.append(g)
    return Container(head["width"], head["height"], head["frame_count"], gops, head["plan"], head["fps"],
                     head["codec"])


def quantize_container(container: Container) -> Container:
    """The model exactly as a decoder would see it."""
    gops = [quantize_gop(g, container.plan).dequantize() for g in container.gops]
    for g, src in zip(gops, container.gops):
        g.meta.update(src.meta)
    return Container(container.width, container.height, container.frame_count, gops, container.plan,
                     container.fps, container.codec)


def bits_per_pixel(nbytes: int, width: int, height: int, frames: int) -> float:
    return nbytes * 8 / (width * height * frames)


def bits_per_param(nbytes: int, params: int) -> float:
    return nbytes * 8 / params


def raw_size(container: Container) -> int:
    """Bytes of a plain float32 dump of every parameter."""
    return 4 * container.param_count


def stats(data: bytes) -> dict:
    c = decode_container(data)
    head = read_header(data)
    return {
        "version": "%d.%d" % head["version"],
        "width": c.width,
        "height": c.height,
        "frames": c.frame_count,
        "gops": [(g.frame_range[0], g.frame_range[1], len(g.gaussians)) for g in c.gops],
        "bytes": len(data),
        "params": c.param_count,
        "bpp": bits_per_pixel(len(data), c.width, c.height, c.frame_count),
        "bits_per_param": bits_per_param(len(data), c.param_count),
        "ratio": raw_size(c) / len(data),
    }
