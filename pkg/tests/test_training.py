import math

import numpy as np
import pytest

from mcstra import autodiff as ad
from mcstra.data import build_dataset
from mcstra.fourier import INFINITE
from mcstra.model import McstraConfig, McstraParams, forward
from mcstra.training import (
    ACCEL_SWEEP,
    SNR_SWEEP,
    OptimizerState,
    TrainLog,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    clip_global_norm,
    evaluate,
    make_batch,
    rmsprop_step,
    train,
)
from mcstra.validation import ShapeError


@pytest.fixture(scope="module")
def tiny():
    cfg = McstraConfig.toy(height=16, width=16, cascade_length=2, batch_size=2)
    ds = build_dataset(3, 2, 16, 16, 0.67, seed=0, accel=4.0, center_frac=0.08)
    return cfg, ds


def test_rmsprop_zero_gradient_is_noop():
    p = ad.parameter(np.array([1.0, -2.0]))
    before = p.data.copy()
    rmsprop_step([("p", p)], [np.zeros(2)], OptimizerState(lr=0.1))
    np.testing.assert_array_equal(p.data, before)


def test_rmsprop_matches_hand_update():
    p = ad.parameter(np.array([1.0]), dtype=np.float64)
    st = OptimizerState(lr=0.01, rho=0.9, eps=1e-8)
    rmsprop_step([("p", p)], [np.array([2.0])], st)
    v = 0.1 * 4.0
    assert p.data[0] == pytest.approx(1.0 - 0.01 * 2.0 / (math.sqrt(v) + 1e-8))
    assert st.step == 1 and np.all(st.sq_avg["p"] >= 0)


def test_rmsprop_descends_a_quadratic():
    p = ad.parameter(np.array([1.0]), dtype=np.float64)
    rmsprop_step([("p", p)], [2 * p.data], OptimizerState(lr=0.01))
    assert p.data[0] ** 2 < 1.0


def test_rmsprop_solves_least_squares():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 5))
    x_true = rng.normal(size=5)
    b = a @ x_true
    x = ad.parameter(np.zeros(5), dtype=np.float64)
    st = OptimizerState(lr=0.05)

    def loss_grad():
        r = a @ x.data - b
        return float(r @ r), 2 * a.T @ r

    first, _ = loss_grad()
    for t in range(200):
        if t == 100:
            st.lr = 0.005
        _, g = loss_grad()
        rmsprop_step([("x", x)], [g], st)
    assert loss_grad()[0] < 1e-3 * first


def test_rmsprop_aborts_on_nan_without_touching_params():
    a, b = ad.parameter(np.ones(2)), ad.parameter(np.ones(2))
    with pytest.raises(FloatingPointError):
        rmsprop_step([("a", a), ("b", b)], [np.ones(2), np.array([np.nan, 0])], OptimizerState(lr=0.1))
    np.testing.assert_array_equal(a.data, 1)


def test_global_norm_clip():
    g = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    assert math.sqrt(sum(float(x @ x) for x in clipped)) == pytest.approx(1.0)
    same, _ = clip_global_norm(g, 10.0)
    assert same[0] is g[0]


def test_train_log_rejects_non_finite():
    log = TrainLog()
    log.add(step=0, epoch=0, split="train", loss=1.0)
    with pytest.raises(FloatingPointError):
        log.add(step=1, epoch=0, split="train", loss=math.nan)
    assert log.to_csv().splitlines()[0] == "step,epoch,split,loss,nmse,psnr,ssim,stage"


def test_zero_epochs_keeps_initialization(tiny):
    cfg, ds = tiny
    params, log, _ = train(cfg, ds, epochs=0)
    assert len(log) == 0
    assert checkpoint_bytes(params) == checkpoint_bytes(McstraParams(cfg))


def test_training_is_deterministic_and_logs_stages(tiny):
    cfg, ds = tiny
    p1, log1, s1 = train(cfg, ds, max_steps=3)
    p2, log2, s2 = train(cfg, ds, max_steps=3)
    assert checkpoint_bytes(p1, s1) == checkpoint_bytes(p2, s2)
    assert log1.rows == log2.rows
    assert [r["step"] for r in log1.rows if r["split"] == "train"] == [0, 1, 2]
    assert set(log1.stage_nmse()) == {1, 2}


def test_checkpoint_roundtrip(tiny, tmp_path):
    cfg, ds = tiny
    params, _, state = train(cfg, ds, max_steps=2, validate=False)
    path = tmp_path / "m.mckp"
    checkpoint_save(params, state, path)
    p2, s2 = checkpoint_load(path, cfg)
    assert checkpoint_bytes(p2, s2) == path.read_bytes()
    assert s2.step == state.step
    y_full, y_hat = make_batch(ds.records[:2], [ds.mask_for(r.volume_id) for r in ds.records[:2]])
    masks = [ds.mask_for(r.volume_id) for r in ds.records[:2]]
    a = forward(params, cfg, y_hat, masks).x_tail.data
    b = forward(p2, cfg, y_hat, masks).x_tail.data
    np.testing.assert_array_equal(a, b)


def test_checkpoint_into_wrong_config_names_parameter(tiny, tmp_path):
    cfg, _ = tiny
    path = tmp_path / "m.mckp"
    checkpoint_save(McstraParams(cfg), None, path)
    with pytest.raises(ShapeError, match="theta_"):
        checkpoint_load(path, cfg.replace(cascade_dim=48))
    with pytest.raises(ShapeError, match="does not exist"):
        checkpoint_load(path, cfg.replace(ablation="A"))


def test_accel_sweep_rows(tiny):
    cfg, ds = tiny
    rep = evaluate(None, cfg, ds, "accel")
    n_val = len(ds.split("val"))
    assert len(rep.rows) == n_val * len(ACCEL_SWEEP)
    assert [p for _, p in rep.points()] == [str(a) for a in ACCEL_SWEEP]


def test_infinite_snr_matches_clean(tiny):
    cfg, ds = tiny
    params = McstraParams(cfg)
    clean = evaluate(params, cfg, ds, "clean").rows
    snr = evaluate(params, cfg, ds, "snr")
    inf_rows = snr.select("snr", "inf")
    for a, b in zip(clean, inf_rows):
        for k in ("nmse", "psnr", "ssim", "zf_nmse"):
            assert a[k] == b[k]
    assert len(snr.points()) == len(SNR_SWEEP)


def test_eval_summary_and_zero_filled_columns(tiny):
    cfg, ds = tiny
    rep = evaluate(None, cfg, ds, "clean")
    row = rep.rows[0]
    assert row["nmse"] == row["zf_nmse"]
    summary = rep.summary()[0]
    assert {"nmse", "nmse_sem", "zf_psnr"} <= set(summary)
    header = rep.to_csv().splitlines()[0]
    assert header.startswith("volume,slice,protocol,param,nmse,psnr,ssim")


def test_thread_count_does_not_change_results(tiny, monkeypatch):
    cfg, ds = tiny
    monkeypatch.setenv("MCSTRA_THREADS", "1")
    one = evaluate(None, cfg, ds, "snr").to_csv()
    monkeypatch.setenv("MCSTRA_THREADS", "4")
    assert evaluate(None, cfg, ds, "snr").to_csv() == one


def test_make_batch_noise_only_when_finite(tiny):
    _, ds = tiny
    recs = ds.records[:2]
    masks = [ds.mask_for(r.volume_id) for r in recs]
    _, clean = make_batch(recs, masks)
    _, same = make_batch(recs, masks, INFINITE)
    _, noisy = make_batch(recs, masks, 10.0, 3)
    np.testing.assert_array_equal(clean, same)
    assert not np.array_equal(clean, noisy)
