"""Video representation and compression with deformable 2D Gaussians."""

from .codec import Container, ContainerError, decode_container, encode_container
from .deform import GopModel, TriPlane, deform
from .gaussian import DeformedGaussians, Gaussians
from .pipeline import EncodeConfig, benchmark_decode, decode_video, encode_video, interpolate
from .quant import BitPlan
from .raster import render, render_backward
from .slicer import GopPlan, slice_gops
from .train import TrainConfig, train_gop
from .videoio import VideoBuffer, load_frames, psnr, write_frames

__version__ = "0.1.0"

__all__ = [
    "BitPlan", "Container", "ContainerError", "DeformedGaussians", "EncodeConfig", "GopModel", "GopPlan",
    "Gaussians", "TrainConfig", "TriPlane", "VideoBuffer", "benchmark_decode", "decode_container", "decode_video",
    "deform", "encode_container", "encode_video", "interpolate", "load_frames", "psnr", "render", "render_backward",
    "slice_gops", "train_gop", "write_frames",
]
