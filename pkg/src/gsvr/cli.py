"""Command-line front end.  Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric divergence."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
THREADS_ENV = "GSVR_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _frame_range(text: str) -> tuple[int, int]:
    parts = text.split("..")
    try:
        if len(parts) == 1:
            a = b = int(parts[0])
        elif len(parts) == 2:
            a, b = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A..B, got {text!r}") from None
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"bad frame range {text!r}")
    return a, b


def _crop(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _add_slicing(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gop-threshold", type=float, metavar="X",
                   help="adaptive slicing: close a GOP once accumulated motion exceeds X (default: 8.0)")
    g.add_argument("--gop-fixed", type=int, metavar="L", help="fixed-length GOPs of L frames instead of adaptive slicing")
    g.add_argument("--gop-count", type=int, metavar="G", help="adaptive slicing tuned to produce at most G GOPs")
    p.add_argument("--min-len", type=int, default=4, help="shortest adaptive GOP in frames (default: 4)")
    p.add_argument("--max-len", type=int, default=120, help="longest adaptive GOP in frames (default: 120)")
    p.add_argument("--flow-dir", metavar="DIR", help="precomputed .flo files, one per transition (default: block matching)")
    p.add_argument("--fps", type=float, default=30.0, help="frame rate stored in the container (default: 30)")
    p.add_argument("--crop", type=_crop, metavar="HxW", help="center crop applied on load (default: none)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsvr", description="Video coding with deformable 2D Gaussians.")
    parser.add_argument("--threads", type=int, metavar="T",
                        help=f"worker thread cap for every subcommand (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    # --threads is also accepted after the subcommand; SUPPRESS keeps it from masking the global value
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, metavar="T", default=argparse.SUPPRESS,
                        help="same as the global --threads")

    p = sub.add_parser("encode", parents=[common], help="train and write a container")
    p.add_argument("--input", required=True, metavar="DIR", help="numbered frame images or raw .rgb with .json sidecar")
    p.add_argument("--output", required=True, metavar="FILE", help="container path")
    p.add_argument("--gaussians", type=int, metavar="N", help="total Gaussians, split evenly over GOPs (default: 32 per frame)")
    p.add_argument("--iters", type=int, metavar="K", help="training steps per GOP (default: 300 per frame)")
    p.add_argument("--qat-iters", type=int, metavar="K2", help="QAT fine-tuning steps per GOP (default: iters/10)")
    p.add_argument("--no-qat", action="store_true", help="skip QAT fine-tuning")
    p.add_argument("--seed", type=int, default=0, help="initialization seed (default: 0)")
    p.add_argument("--motion", choices=("hybrid", "plane", "poly"), default="hybrid",
                   help="position motion model (default: hybrid)")
    p.add_argument("--codec", choices=("png", "deflate"), default="png", help="lossless image codec (default: png)")
    p.add_argument("--jobs", type=int, default=1, help="GOPs trained in parallel processes (default: 1)")
    p.add_argument("--metrics", metavar="CSV", help="per-GOP PSNR, timing and rate CSV")
    p.add_argument("--history", metavar="CSV", help="per-step training loss CSV")
    _add_slicing(p)

    p = sub.add_parser("decode", parents=[common], help="render frames from a container")
    p.add_argument("--input", required=True, metavar="FILE", help="container path")
    p.add_argument("--output", required=True, metavar="DIR", help="directory for frame_NNNNN.png")
    p.add_argument("--frames", type=_frame_range, metavar="A..B", help="inclusive frame range (default: all)")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16, help="PNG bit depth (default: 16)")

    p = sub.add_parser("interpolate", parents=[common], help="render at fractional frame positions")
    p.add_argument("--input", required=True, metavar="FILE", help="container path")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--t", type=float, metavar="FLOAT", help="global frame position, e.g. 4.5; --output is a PNG")
    g.add_argument("--factor", type=int, metavar="N", help="multiply the frame rate by N; --output is a directory")
    p.add_argument("--output", required=True, metavar="PATH", help="PNG file (--t) or directory (--factor)")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16, help="PNG bit depth (default: 16)")

    p = sub.add_parser("bench", parents=[common], help="measure decode speed")
    p.add_argument("--input", required=True, metavar="FILE", help="container path")
    p.add_argument("--passes", type=int, default=100, help="timed passes over all frames (default: 100)")

    p = sub.add_parser("inspect", parents=[common], help="print header, GOP table and rates")
    p.add_argument("--input", required=True, metavar="FILE", help="container path")

    p = sub.add_parser("slice", parents=[common], help="print the GOP plan without training")
    p.add_argument("--input", required=True, metavar="DIR", help="numbered frame images or raw .rgb with .json sidecar")
    _add_slicing(p)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def _encode_config(args):
    from .pipeline import EncodeConfig
    from .train import TrainConfig
    tc = TrainConfig(iterations=args.iters, qat_iterations=args.qat_iters, seed=args.seed, motion=args.motion)
    return EncodeConfig(train=tc, gaussians=args.gaussians, gop_threshold=args.gop_threshold,
                        gop_fixed=args.gop_fixed, gop_count=args.gop_count, min_len=args.min_len,
                        max_len=args.max_len, flow_dir=args.flow_dir, qat=not args.no_qat, codec=args.codec,
                        jobs=args.jobs)


def cmd_encode(args, out):
    from .pipeline import encode_video
    from .videoio import load_frames
    video = load_frames(args.input, args.fps, args.crop)
    res = encode_video(video, _encode_config(args), args.output, args.metrics, args.history)
    for r in res.rows:
        print(f"gop {r['gop']}: frames {r['start']}..{r['end']}, {r['gaussians']} Gaussians, "
              f"PSNR {r['psnr']:.2f} dB (float {r['float_psnr']:.2f}), train {r['train_s']:.1f}s", file=out)
    print(f"wrote {args.output}: {len(res.data)} bytes, {res.bpp:.4f} bpp, PSNR {res.psnr:.2f} dB", file=out)


def cmd_decode(args, out):
    from .pipeline import decode_video, load_container
    from .videoio import write_frames
    c = load_container(args.input)
    frames = range(args.frames[0], args.frames[1] + 1) if args.frames else None
    if frames is not None and frames.stop > c.frame_count:
        raise UsageError(f"--frames {args.frames[0]}..{args.frames[1]} outside 0..{c.frame_count - 1}")
    paths = write_frames(decode_video(c, frames), args.output, args.bit_depth)
    print(f"wrote {len(paths)} frames to {args.output}", file=out)


def cmd_interpolate(args, out):
    from .pipeline import interpolate, load_container, upsample
    from .videoio import write_frame, write_frames
    c = load_container(args.input)
    if args.t is not None:
        try:
            img = interpolate(c, args.t)
        except IndexError as e:
            raise UsageError(str(e)) from None
        write_frame(img, args.output, args.bit_depth)
        print(f"wrote {args.output}", file=out)
    else:
        if args.factor < 1:
            raise UsageError("--factor must be >= 1")
        paths = write_frames(upsample(c, args.factor), args.output, args.bit_depth)
        print(f"wrote {len(paths)} frames to {args.output}", file=out)


def cmd_bench(args, out):
    from .pipeline import benchmark_decode
    if args.passes < 1:
        raise UsageError("--passes must be >= 1")
    print(benchmark_decode(args.input, args.passes, args.resolved_threads).summary(), file=out)


def cmd_inspect(args, out):
    from .codec import stats
    s = stats(Path(args.input).read_bytes())
    print(f"GSVR {s['version']}  {s['width']}x{s['height']}  {s['frames']} frames", file=out)
    print("gop  start  end  gaussians", file=out)
    for i, (a, b, n) in enumerate(s["gops"]):
        print(f"{i:3d}  {a:5d}  {b:3d}  {n:9d}", file=out)
    print(f"bytes {s['bytes']}  params {s['params']}  ratio {s['ratio']:.3f}", file=out)
    print(f"bpp {s['bpp']:.6f}  bits-per-param {s['bits_per_param']:.6f}", file=out)


def cmd_slice(args, out):
    from .pipeline import EncodeConfig, plan_gops
    from .videoio import load_frames
    video = load_frames(args.input, args.fps, args.crop)
    cfg = EncodeConfig(gop_threshold=args.gop_threshold, gop_fixed=args.gop_fixed, gop_count=args.gop_count,
                       min_len=args.min_len, max_len=args.max_len, flow_dir=args.flow_dir)
    plan = plan_gops(video.frames, cfg)
    for i, (a, b) in enumerate(plan):
        print(f"gop {i}: {a}..{b} ({b - a + 1} frames)", file=out)


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "interpolate": cmd_interpolate, "bench": cmd_bench,
            "inspect": cmd_inspect, "slice": cmd_slice}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.resolved_threads = _threads(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .codec import ContainerError
    from .raster import set_threads
    from .slicer import FlowFormatError
    from .train import DivergenceError
    from .videoio import FrameSequenceError
    try:
        set_threads(args.resolved_threads)
        COMMANDS[args.command](args, out)
    except UsageError as e:
        print(f"gsvr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"gsvr {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FrameSequenceError, ContainerError, FlowFormatError) as e:
        print(f"gsvr {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"gsvr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
