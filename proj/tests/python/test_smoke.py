import os
import pathlib

import numpy as np
import pytest

import usdiff


@pytest.fixture
def work(tmp_path):
    root = os.environ.get("USDIFF_WORK")
    return pathlib.Path(root) if root else tmp_path


def test_schedule_and_plans():
    s = usdiff.build_schedule()
    assert s.T == 1000
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    ref = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 1000))
    np.testing.assert_allclose(s.alpha_bar[1:], ref, rtol=1e-12)

    plan = usdiff.select_steps(s, 10, "power(0.5)")
    assert plan.K == 10 and plan.steps[-1] == 1000
    gaps = np.diff(plan.steps)
    assert np.all(np.diff(gaps) <= 0)
    assert usdiff.select_steps(s, 10, "uniform").steps == list(range(100, 1001, 100))


def test_forward_and_ddim_round_trip():
    s = usdiff.build_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 3, 4, 4))
    eps = rng.standard_normal(x0.shape)
    xt = usdiff.forward_sample(x0, 400, eps, s)
    ab = s.alpha_bar[400]
    np.testing.assert_allclose(xt, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(usdiff.predict_x0(xt, eps, 400, s), x0, atol=1e-12)
    np.testing.assert_allclose(usdiff.ddim_step(xt, eps, 400, 0, s), x0, atol=1e-12)


def test_sandbox_gate():
    s = usdiff.build_schedule()
    r = usdiff.run_sandbox(usdiff.select_steps(s, 1000, "uniform"), s, n=20000, seed=1)
    assert r["denoiser_calls"] == 1000
    assert r["w1"] < 0.05


def test_scene_and_annotators():
    sc = usdiff.gen_scene(3, 32)
    assert sc["image"].shape == (3, 32, 32)
    assert sc["image"].min() >= -1 and sc["image"].max() <= 1
    for kind in ("edge", "seg", "depth"):
        m = usdiff.annotate(sc["image"], kind)
        assert m.shape == sc["image"].shape
        assert usdiff.rmse(m, m) == 0.0
    flat = np.zeros((3, 16, 16))
    np.testing.assert_array_equal(usdiff.annotate(flat, "edge"), -np.ones((3, 16, 16)))
    with pytest.raises(usdiff.ConfigError):
        usdiff.annotate(flat, "normal")


def test_metrics():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (60, 3, 8, 8))
    assert usdiff.frechet_proxy(a, a) < 1e-6
    assert usdiff.frechet_proxy(a, -a) > 0
    with pytest.raises(usdiff.ContractError):
        usdiff.frechet_proxy(a[:10], a[:10])
    assert usdiff.rmse(np.zeros(4), np.full(4, 0.5)) == pytest.approx(0.25)  # [-1,1] rescaled to [0,1]


def test_time_embed():
    e = usdiff.time_embed([0, 10], 8)
    assert e.shape == (2, 8)
    np.testing.assert_allclose(e[0], [0, 1] * 4, atol=1e-15)
    np.testing.assert_allclose(e[1, :2], [np.sin(10.0), np.cos(10.0)])


def test_config_errors():
    cfg = usdiff.resolve_config({"preset": "micro"})
    assert cfg["model.image_size"] == "8"
    with pytest.raises(usdiff.ConfigError):
        usdiff.resolve_config({"train.nope": "1"})


def test_train_and_sample(work):
    out = work / "micro"
    rows = usdiff.train({"preset": "micro", "train.steps": "6", "train.checkpoint_every": "0"}, out)
    assert [r["step"] for r in rows] == list(range(6))
    assert all(np.isfinite(r["total_loss"]) for r in rows)
    assert (out / "loss.csv").read_text().count("\n") == 7

    res = usdiff.sample(out / "model.usdf", "seg/map2image", n=3, K=10, seed=2, out=work / "samples")
    assert res["denoiser_calls"] == 10
    assert res["images"].shape == (3, 3, 8, 8)
    assert np.abs(res["images"]).max() <= 1.0
    assert len(list((work / "samples").glob("sample_*.ppm"))) == 3
    with pytest.raises(usdiff.IoError):
        usdiff.sample(work / "missing.usdf")
