import csv
import io
import re
from pathlib import Path

import numpy as np
import pytest

from gsvr import pipeline
from gsvr.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main
from gsvr.codec import stats
from gsvr.pipeline import decode_frames
from gsvr.train import DivergenceError
from gsvr.videoio import VideoBuffer, load_frames, write_frames

README = Path(__file__).resolve().parents[1] / "README.md"


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def encoded(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    frames = np.clip(0.5 + 0.2 * rng.normal(size=(4, 12, 12, 3)), 0, 1).astype(np.float32)
    write_frames(VideoBuffer(frames), d / "in")
    code, text = run("--threads", 1, "encode", "--input", d / "in", "--output", d / "v.gsvr", "--gaussians", 24,
                     "--iters", 15, "--qat-iters", 3, "--gop-fixed", 2, "--metrics", d / "m.csv")
    assert code == EXIT_OK, text
    return d, text


def test_encode_reports_each_gop(encoded):
    d, text = encoded
    assert re.findall(r"gop (\d): frames (\d+)\.\.(\d+)", text) == [("0", "0", "1"), ("1", "2", "3")]
    assert "bpp" in text and (d / "v.gsvr").exists()


def test_decode_matches_library_within_16bit_rounding(encoded, tmp_path):
    d, _ = encoded
    assert run("decode", "--input", d / "v.gsvr", "--output", tmp_path)[0] == EXIT_OK
    written = load_frames(tmp_path).frames
    ref = decode_frames(d / "v.gsvr")
    assert written.shape == ref.shape == (4, 12, 12, 3)
    assert np.abs(written.astype(np.float64) - ref).max() <= 0.5 / 65535 + 1e-7


def test_decode_single_frame(encoded, tmp_path):
    d, _ = encoded
    code, text = run("decode", "--input", d / "v.gsvr", "--output", tmp_path, "--frames", "2..2")
    assert code == EXIT_OK and "wrote 1 frames" in text
    assert [p.name for p in tmp_path.iterdir()] == ["frame_00002.png"]  # named by source index


def test_decode_range_outside_video(encoded, tmp_path):
    d, _ = encoded
    assert run("decode", "--input", d / "v.gsvr", "--output", tmp_path, "--frames", "2..9")[0] == EXIT_USAGE
    assert run("decode", "--input", d / "v.gsvr", "--output", tmp_path, "--frames", "3..1")[0] == EXIT_USAGE


def test_inspect_rates_match_metrics(encoded):
    d, _ = encoded
    code, text = run("inspect", "--input", d / "v.gsvr")
    assert code == EXIT_OK
    bpp = float(re.search(r"bpp ([\d.]+)", text).group(1))
    bpparam = float(re.search(r"bits-per-param ([\d.]+)", text).group(1))
    rows = list(csv.DictReader(open(d / "m.csv")))
    assert bpp == pytest.approx(float(rows[0]["bpp"]), abs=1e-6)
    assert bpparam == pytest.approx(float(rows[0]["bits_per_param"]), abs=1e-6)
    s = stats((d / "v.gsvr").read_bytes())
    assert bpp == pytest.approx(s["bytes"] * 8 / (12 * 12 * 4), abs=1e-6)
    assert f"params {s['params']}" in text


def test_interpolate_commands(encoded, tmp_path):
    d, _ = encoded
    code, _ = run("interpolate", "--input", d / "v.gsvr", "--t", 0.5, "--output", tmp_path / "mid.png")
    assert code == EXIT_OK and (tmp_path / "mid.png").exists()
    code, text = run("interpolate", "--input", d / "v.gsvr", "--factor", 2, "--output", tmp_path / "up")
    assert code == EXIT_OK and "wrote 7 frames" in text
    assert run("interpolate", "--input", d / "v.gsvr", "--t", 9, "--output", tmp_path / "x.png")[0] == EXIT_USAGE
    assert run("interpolate", "--input", d / "v.gsvr", "--output", tmp_path / "x.png")[0] == EXIT_USAGE


def test_bench_accepts_threads_after_subcommand(encoded):
    d, _ = encoded
    code, text = run("bench", "--input", d / "v.gsvr", "--passes", 1, "--threads", 1)
    assert code == EXIT_OK and "FPS" in text and "1 threads" in text
    assert run("bench", "--input", d / "v.gsvr", "--passes", 0)[0] == EXIT_USAGE


def test_slice_prints_plan(encoded):
    d, _ = encoded
    code, text = run("slice", "--input", d / "in", "--gop-fixed", 3)
    assert code == EXIT_OK
    assert text.splitlines() == ["gop 0: 0..2 (3 frames)", "gop 1: 3..3 (1 frames)"]
    code, text = run("slice", "--input", d / "in", "--gop-fixed", 5)
    assert text.splitlines() == ["gop 0: 0..3 (4 frames)"]


def test_usage_errors(encoded, tmp_path, monkeypatch):
    d, _ = encoded
    assert run()[0] == EXIT_USAGE
    assert run("encode", "--input", d / "in")[0] == EXIT_USAGE
    assert run("encode", "--input", d / "in", "--output", tmp_path / "x", "--gop-fixed", 2,
               "--gop-count", 2)[0] == EXIT_USAGE
    assert run("decode", "--input", d / "v.gsvr", "--output", tmp_path, "--frames", "a..b")[0] == EXIT_USAGE
    monkeypatch.setenv("GSVR_THREADS", "many")
    assert run("inspect", "--input", d / "v.gsvr")[0] == EXIT_USAGE


def test_io_errors(tmp_path):
    assert run("inspect", "--input", tmp_path / "missing.gsvr")[0] == EXIT_IO
    (tmp_path / "bad.gsvr").write_bytes(b"GSVR\x01\x00")
    assert run("decode", "--input", tmp_path / "bad.gsvr", "--output", tmp_path / "o")[0] == EXIT_IO
    assert run("encode", "--input", tmp_path / "nothing", "--output", tmp_path / "o.gsvr")[0] == EXIT_IO


def test_divergence_exit_code(encoded, tmp_path, monkeypatch):
    d, _ = encoded

    def bad(*a, **k):
        raise DivergenceError("non-finite loss")
    monkeypatch.setattr(pipeline, "train_gop", bad)
    assert run("encode", "--input", d / "in", "--output", tmp_path / "x.gsvr")[0] == EXIT_DIVERGED


def test_help_exits_cleanly():
    assert run("--help")[0] == EXIT_OK
    assert run("encode", "--help")[0] == EXIT_OK


def _long_options():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and isinstance(a.choices, dict))
    opts = {s for a in parser._actions for s in a.option_strings if s.startswith("--")}
    for name, p in sub.choices.items():
        opts |= {s for a in p._actions for s in a.option_strings if s.startswith("--")}
    return set(sub.choices), opts - {"--help"}


def test_readme_documents_every_command_and_flag():
    text = README.read_text()
    commands, options = _long_options()
    for c in commands:
        assert f"gsvr {c}" in text, c
    missing = sorted(o for o in options if o not in text)
    assert not missing, missing
