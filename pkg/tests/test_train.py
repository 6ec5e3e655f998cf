import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsvr.deform import deform
from gsvr.gaussian import activate_attributes
from gsvr.quant import BitPlan
from gsvr.train import (Adam, DivergenceError, History, TrainConfig, evaluate, init_gop, l2_loss, loss_to_psnr,
                        qat_finetune, train_gop, visit_order)


def test_config_defaults():
    c = TrainConfig()
    assert (c.lr_position, c.lr_other, c.betas, c.eps) == (0.0025, 0.01, (0.9, 0.999), 1e-8)
    assert c.steps_for(16) == 4800 and c.qat_steps_for(16) == 480
    with pytest.raises(ValueError):
        TrainConfig(lr_other=0)


def test_init_gop():
    cfg = TrainConfig(num_gaussians=100, seed=3)
    gop = init_gop(cfg, (4, 19), 64, 48)
    g = gop.gaussians
    assert np.all(g.scale == 1.0) and not g.theta_raw.any() and not g.poly.any() and not g.alpha_raw.any()
    assert np.all(np.abs(g.mu) <= 1) and np.all(np.abs(g.color) <= 0.5)
    assert gop.triplane.resolution == (32, 16, 8)
    assert init_gop(cfg, (1, 15), 64, 48, fitted_frames=8).triplane.resolution == (32, 16, 4)
    with pytest.raises(ValueError):
        init_gop(cfg, (1, 15), 64, 48, fitted_frames=16)
    base = activate_attributes(g, np.zeros((100, 8)))
    for t in (0.0, 0.3, 1.0):
        d = deform(gop, t)
        np.testing.assert_array_equal(d.mu, base.mu)
        np.testing.assert_array_equal(d.color, base.color)
    again = init_gop(cfg, (4, 19), 64, 48)
    for k, v in gop.params().items():
        np.testing.assert_array_equal(v, again.params()[k])


def test_l2_loss():
    gt = np.random.default_rng(0).uniform(size=(4, 5, 3))
    loss, grad = l2_loss(gt.copy(), gt)
    assert loss == 0 and not grad.any()
    loss, _ = l2_loss(gt + 0.1, gt)
    assert loss == pytest.approx(0.01, rel=1e-12)
    with pytest.raises(ValueError):
        l2_loss(gt, gt[:2])


def test_l2_gradient_finite_differences():
    rng = np.random.default_rng(1)
    pred, gt = rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3, 3))
    _, grad = l2_loss(pred, gt)
    for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
        p, m = pred.copy(), pred.copy()
        p[idx] += 1e-6
        m[idx] -= 1e-6
        fd = (l2_loss(p, gt)[0] - l2_loss(m, gt)[0]) / 2e-6
        assert grad[idx] == pytest.approx(fd, abs=1e-6)


def test_adam_matches_hand_computation():
    p = {"x": np.array([1.0])}
    opt = Adam({"x": 0.1})
    expected = [0.90000000199999996, 0.93661035424056560281, 0.95027942033897641752]
    for g, e in zip((0.5, -1.0, 0.25), expected):
        opt.step(p, {"x": np.array([g])})
        assert p["x"][0] == pytest.approx(e, abs=1e-12)


def test_visit_order():
    assert visit_order(16) == [0, 8, 4, 12, 2, 10, 6, 14, 1, 9, 5, 13, 3, 11, 7, 15]
    assert visit_order(5) == [0, 4, 2, 1, 3]
    assert visit_order(1) == [0]


@given(st.integers(1, 300))
def test_visit_order_is_permutation(n):
    assert sorted(visit_order(n)) == list(range(n))


def test_history_csv(tmp_path):
    h = History()
    h.add(0, 0.01)
    h.add(1, 0.001)
    assert h.psnr == [pytest.approx(20.0), pytest.approx(30.0)]
    assert loss_to_psnr(0.0) == 100.0
    h.write_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["iteration", "loss", "psnr"] and len(rows) == 3


def test_zero_iterations_is_identity():
    cfg = TrainConfig(num_gaussians=16)
    gop = init_gop(cfg, (0, 1), 16, 16)
    frames = np.full((2, 16, 16, 3), 0.5, np.float32)
    model, hist = train_gop(gop, frames, cfg, iterations=0)
    assert not hist.loss
    for k, v in gop.params().items():
        np.testing.assert_array_equal(model.params()[k], v)


def test_uniform_frame_reaches_40db():
    cfg = TrainConfig(num_gaussians=64)
    frame = np.empty((1, 32, 32, 3), np.float32)
    frame[...] = (0.2, 0.6, 0.4)
    gop = init_gop(cfg, (0, 0), 32, 32)
    model, hist = train_gop(gop, frame, cfg, iterations=500)
    assert evaluate(model, frame) >= 40.0
    assert hist.smoothed(20)[-1] < hist.smoothed(20)[0]


def test_training_is_pure_and_deterministic():
    cfg = TrainConfig(num_gaussians=24, dtype="float64", eval_every=10)
    rng = np.random.default_rng(5)
    frames = rng.uniform(size=(3, 16, 16, 3))
    before = frames.copy()
    gop = init_gop(cfg, (0, 2), 16, 16)
    a, ha = train_gop(gop, frames, cfg, iterations=40)
    b, hb = train_gop(gop, frames, cfg, iterations=40)
    np.testing.assert_array_equal(frames, before)
    assert cfg == TrainConfig(num_gaussians=24, dtype="float64", eval_every=10)
    assert ha.loss == hb.loss
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])


def test_divergence_is_reported():
    cfg = TrainConfig(num_gaussians=8)
    frames = np.zeros((2, 8, 8, 3), np.float32)
    frames[1, 3, 3, 0] = np.nan
    with pytest.raises(DivergenceError, match="non-finite"):
        train_gop(init_gop(cfg, (0, 1), 8, 8), frames, cfg, iterations=4)


def test_frame_ids_must_lie_in_gop():
    cfg = TrainConfig(num_gaussians=8)
    with pytest.raises(ValueError):
        train_gop(init_gop(cfg, (0, 1), 8, 8), np.zeros((2, 8, 8, 3), np.float32), cfg, frame_ids=[0, 5])


def test_qat_with_lossless_plan_equals_plain_training():
    cfg = TrainConfig(num_gaussians=16, eval_every=5)
    rng = np.random.default_rng(2)
    frames = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
    gop = init_gop(cfg, (0, 1), 16, 16)
    plain, _ = train_gop(gop, frames, cfg, iterations=20)
    qat, _ = qat_finetune(gop, frames, cfg, BitPlan.lossless(), iterations=20)
    for k, v in plain.params().items():
        np.testing.assert_array_equal(qat.params()[k], v)
