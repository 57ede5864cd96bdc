import math

import numpy as np
import pytest

from mcstra import autodiff as ad
from mcstra.fourier import INFINITE, fft2c, ifft2c, random_line_mask
from mcstra.model import (
    McstraConfig,
    McstraParams,
    ablation_apply,
    branch_inputs,
    branch_loss,
    cascade_betas,
    cascade_forward,
    cascade_loss,
    dc_layer,
    forward,
    mcstra_forward,
    pe_generate,
    tail_forward,
    tail_loss,
    to_channels,
    total_loss,
)
from mcstra.data import shepp_logan
from mcstra.validation import ShapeError


@pytest.fixture
def small():
    return McstraConfig.toy(height=16, width=16)


def batch(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    imgs = np.stack([shepp_logan(cfg.height, cfg.width) * (1 + 0.1 * rng.normal()) for _ in range(n)])
    y_full = fft2c(imgs)
    masks = [random_line_mask(cfg.width, cfg.accel, cfg.center_frac, seed + i) for i in range(n)]
    y_hat = np.stack([y * m.lines for y, m in zip(y_full, masks)])
    return y_full, y_hat, masks


def test_beta_schedule():
    np.testing.assert_array_equal(cascade_betas(5), np.arange(1, 6) / 15)
    for n in range(1, 9):
        assert abs(cascade_betas(n).sum() - 1) < 1e-15
    np.testing.assert_array_equal(cascade_betas(3, "final"), [0, 0, 1])
    assert cascade_betas(1).tolist() == [1.0]


def test_default_weights_and_dims():
    cfg = McstraConfig()
    assert (cfg.gamma_branch, cfg.gamma_cas, cfg.gamma_tail) == (1 / 3, 1 / 3, 1 / 3)
    assert (cfg.alpha_l, cfg.alpha_h) == (0.5, 0.5)
    assert (cfg.branch_dim, cfg.cascade_dim, cfg.tail_dim) == (48, 96, 48)
    assert cfg.learning_rate == 1e-4 and cfg.dc_lambda == INFINITE


def test_config_text_roundtrip_and_errors():
    cfg = McstraConfig.toy(dc_lambda=INFINITE, fixed_masks=True, ablation="C")
    assert McstraConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        McstraConfig.from_text("bogus = 1\n")
    with pytest.raises(ValueError, match="bad value"):
        McstraConfig.from_text("cascade_length = three\n")
    with pytest.raises(ValueError):
        McstraConfig(ablation="Z")
    with pytest.raises(ShapeError):
        McstraConfig(height=20)


def test_ablation_table():
    assert not ablation_apply("A").multi_branch
    assert ablation_apply("B").partition == "none"
    assert ablation_apply("C").tail_channels == 2
    assert not ablation_apply("D").psf_embedding
    assert ablation_apply("E").partition == "square"
    assert ablation_apply("F") == ablation_apply(McstraConfig())
    with pytest.raises(ValueError):
        ablation_apply("G")


def test_a_and_f_differ_only_in_branches(small):
    a = McstraParams(small.replace(ablation="A"))
    f = McstraParams(small)
    assert a.theta_l is None and a.theta_h is None
    assert a.theta_cas.num_parameters() == f.theta_cas.num_parameters()
    assert a.theta_tail.num_parameters() == f.theta_tail.num_parameters()


def test_cascade_parameters_do_not_depend_on_length(small):
    n1 = McstraParams(small.replace(cascade_length=1)).theta_cas.num_parameters()
    n5 = McstraParams(small.replace(cascade_length=5)).theta_cas.num_parameters()
    assert n1 == n5


def test_initialization(small):
    p = McstraParams(small)
    assert np.all(p.theta_P.weight.data == 0)
    assert np.abs(p.E_abs.data).max() <= 0.02
    assert p.E_abs.shape == (small.n_tokens, small.branch_dim)


def test_f_starts_identical_to_d(small):
    y_full, y_hat, masks = batch(small)
    f = forward(McstraParams(small), small, y_hat, masks).x_tail.data
    d_cfg = small.replace(ablation="D")
    d = forward(McstraParams(d_cfg), d_cfg, y_hat, masks).x_tail.data
    np.testing.assert_array_equal(f, d)


def test_positional_embedding_depends_on_mask_only(small):
    p = McstraParams(small)
    p.theta_P.weight.data[...] = 0.1
    m1 = random_line_mask(16, 4, 0.08, 1)
    m2 = random_line_mask(16, 4, 0.08, 2)
    e1, e2 = pe_generate([m1], small, p), pe_generate([m2], small, p)
    assert e1.shape == (1, small.n_tokens, small.branch_dim)
    assert not np.array_equal(e1.data, e2.data)
    np.testing.assert_array_equal(e1.data, pe_generate([m1], small, p).data)


def test_dc_layer_pins_sampled_lines(small):
    y_full, y_hat, masks = batch(small)
    x = ad.constant(np.random.default_rng(0).normal(size=(2, 2, 16, 16)))
    sampled = np.stack([m.to_2d(16) > 0 for m in masks])
    out = dc_layer(x, y_hat, sampled)
    k = fft2c(out.data[:, 0] + 1j * out.data[:, 1])
    assert np.max(np.abs(k[sampled] - y_hat[sampled])) < 1e-5


def test_zero_cascade_is_zero_filled_fixed_point(small):
    y_full, y_hat, masks = batch(small)
    p = McstraParams(small)
    p.theta_cas.zero_()
    xs = cascade_forward(ad.constant(to_channels(ifft2c(y_hat))), y_hat, masks, small, p, None)
    zf = to_channels(ifft2c(y_hat))
    assert len(xs) == small.cascade_length
    for x in xs:
        assert np.max(np.abs(x.data - zf)) < 1e-6


def test_zero_tail_gives_zero_output(small):
    p = McstraParams(small)
    p.theta_tail.zero_()
    x = ad.constant(np.random.default_rng(1).normal(size=(2, 2, 16, 16)))
    np.testing.assert_array_equal(tail_forward(x, small, p, None).data, 0)


def test_perfect_predictions_give_zero_total_loss(small):
    y_full, _, _ = batch(small)
    ref_l, ref_h = branch_inputs(y_full, small)
    x_ref = ad.constant(to_channels(ifft2c(y_full)))
    lb = branch_loss(ad.constant(to_channels(ref_l)), ad.constant(to_channels(ref_h)), y_full, small)
    lc = cascade_loss([x_ref] * small.cascade_length, y_full, small)
    lt = tail_loss(ad.constant(np.abs(ifft2c(y_full))), y_full, small)
    assert total_loss(lb, lc, lt, small).item() == 0


def test_branch_loss_scales_with_alpha(small):
    y_full, y_hat, _ = batch(small)
    x = ad.constant(np.random.default_rng(2).normal(size=(2, 2, 16, 16)))
    l1 = branch_loss(x, x, y_full, small).item()
    l2 = branch_loss(x, x, y_full, small.replace(alpha_l=1.0, alpha_h=1.0)).item()
    assert l2 == pytest.approx(2 * l1, rel=1e-6)


def test_unpartitioned_branches_see_the_full_image(small):
    y_full, _, _ = batch(small)
    low, high = branch_inputs(y_full, small.replace(ablation="B"))
    np.testing.assert_array_equal(low, high)
    low, high = branch_inputs(y_full, small)
    np.testing.assert_allclose(low + high, ifft2c(y_full), atol=1e-12)


@pytest.mark.parametrize("tag", ["A", "B", "C", "D", "E", "F"])
def test_every_configuration_runs(small, tag):
    cfg = small.replace(ablation=tag)
    y_full, y_hat, masks = batch(cfg)
    res = forward(McstraParams(cfg), cfg, y_hat, masks, y_full)
    assert res.x_tail.shape == (2, 16, 16)
    assert math.isfinite(res.loss.item())
    assert set(res.losses) == {"branch", "cascade", "tail", "total"}


def test_all_parameter_groups_receive_gradient(small):
    y_full, y_hat, masks = batch(small)
    p = McstraParams(small)
    p.theta_P.weight.data[...] = 0.05  # zero weights pass no signal back to E_pos in theta_P's input
    with ad.GradientTape() as tape:
        res = forward(p, small, y_hat, masks, y_full)
    tape.backward(res.loss)
    for group, params in p.groups().items():
        assert any(np.any(t.grad != 0) for t in params if t.grad is not None), group


def test_geometry_mismatch_is_an_error(small):
    y = np.zeros((1, 32, 32), complex)
    with pytest.raises(ShapeError):
        forward(McstraParams(small), small, y, [random_line_mask(32, 4, 0.08, 0)])


def test_report_has_per_stage_nmse(small):
    y_full, y_hat, masks = batch(small)
    out, rep = mcstra_forward(y_hat, masks, small, McstraParams(small), y_full)
    assert out.shape == (2, 16, 16)
    assert len(rep.stage_nmse) == small.cascade_length
    assert {"nmse", "psnr", "ssim", "stage1_nmse", "total"} <= set(rep.summary())
