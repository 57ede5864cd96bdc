"""Finite-difference checks for every differentiable op and the full model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check
from .fourier import fft2c, make_rng, random_line_mask
from .model import McstraConfig, McstraParams, dc_layer, forward
from .swin import (
    PatchExpanding,
    PatchMerging,
    SwinBlockPair,
    SwinUnet,
    TokenGrid,
    UnetGeometry,
    WindowSpec,
    mhsa,
    patch_expanding,
    patch_merging,
    swin_block_pair,
    window_partition,
)

OP_TOLERANCE = 1e-3
MODEL_TOLERANCE = 1e-2


def _weights(rng, shape):
    return ad.constant(rng.normal(size=shape))


def op_cases(seed: int = 0):
    """``(name, f, x)`` triples; each ``f`` maps a tensor to a scalar."""
    rng = make_rng(seed)
    c = {k: _weights(rng, s) for k, s in {
        "a": (3, 4), "b": (4, 5), "w": (4, 6), "bias": (6,), "pad": (2, 3, 4), "r": (2, 3, 4),
    }.items()}
    geo_rng = make_rng(seed + 1)
    cases = [
        ("add", lambda t: ad.sum_all(ad.mul(ad.add(t, c["a"]), c["a"])), rng.normal(size=(3, 4))),
        ("sub", lambda t: ad.sum_all(ad.mul(ad.sub(c["a"], t), c["a"])), rng.normal(size=(3, 4))),
        ("mul", lambda t: ad.sum_all(ad.mul(t, ad.mul(t, c["a"]))), rng.normal(size=(3, 4))),
        ("broadcast", lambda t: ad.sum_all(ad.mul(ad.add(c["pad"], t), c["r"])), rng.normal(size=(4,))),
        ("matmul", lambda t: ad.sum_all(ad.mul(ad.matmul(t, c["b"]), ad.matmul(t, c["b"]))), rng.normal(size=(3, 4))),
        ("affine", lambda t: ad.sum_all(ad.gelu(ad.affine(t, c["w"], c["bias"]))), rng.normal(size=(3, 4))),
        ("gelu", lambda t: ad.sum_all(ad.mul(ad.gelu(t), c["a"])), rng.normal(size=(3, 4))),
        ("softmax", lambda t: ad.sum_all(ad.mul(ad.softmax(t, axis=-1), c["a"])), rng.normal(size=(3, 4))),
        ("layer_norm", lambda t: ad.sum_all(ad.mul(ad.layer_norm(t, ad.constant(np.full(4, 1.3)),
                                                                ad.constant(np.full(4, 0.1))), c["a"])),
         rng.normal(size=(3, 4))),
        ("permute", lambda t: ad.sum_all(ad.mul(ad.permute(t, (2, 0, 1)), ad.permute(c["r"], (2, 0, 1)))),
         rng.normal(size=(2, 3, 4))),
        ("concat_split", lambda t: ad.sum_all(ad.mul(ad.concat(ad.split(t, 2, axis=-1)[::-1], axis=-1), c["a"])),
         rng.normal(size=(3, 4))),
        ("roll", lambda t: ad.sum_all(ad.mul(ad.roll(t, (1, -2), (0, 1)), c["a"])), rng.normal(size=(3, 4))),
        ("index", lambda t: ad.sum_all(ad.mul(ad.index(t, np.array([0, 2, 2])), c["a"])), rng.normal(size=(4, 4))),
        ("magnitude", lambda t: ad.sum_all(ad.two_channel_magnitude(t, axis=0)), rng.normal(size=(2, 3, 4))),
        ("l1", lambda t: ad.l1_loss(t, c["a"]), rng.normal(size=(3, 4))),
        ("mean", lambda t: ad.mean_all(ad.mul(t, t)), rng.normal(size=(3, 4))),
    ]

    # data consistency (soft and hard)
    mask = random_line_mask(8, 2, 0.25, seed)
    y = fft2c(rng.normal(size=(1, 8, 8)) + 1j * rng.normal(size=(1, 8, 8))) * mask.lines
    sampled = np.broadcast_to(mask.lines.astype(bool), (1, 8, 8))
    probe = ad.constant(rng.normal(size=(1, 2, 8, 8)))
    for lam in (1.0, np.inf):
        cases.append((f"dc_lambda_{lam}", lambda t, lam=lam: ad.sum_all(ad.mul(dc_layer(t, y, sampled, lam), probe)),
                      rng.normal(size=(1, 2, 8, 8))))

    # attention, block pair, merge/expand
    with ad.default_dtype(np.float64):
        pair = SwinBlockPair(16, 2, geo_rng, mlp_ratio=2)
        merge = PatchMerging(16, geo_rng)
        expand = PatchExpanding(16, geo_rng)
    spec = WindowSpec(2, 0)
    tok_probe = ad.constant(rng.normal(size=(1, 16, 16)))
    cases += [
        ("mhsa", lambda t: ad.sum_all(ad.mul(mhsa(window_partition(TokenGrid(t, 4, 4), spec), pair.regular),
                                              ad.reshape(tok_probe, (1, 4, 4, 16)))), rng.normal(size=(1, 16, 16))),
        ("swin_block_pair", lambda t: ad.sum_all(ad.mul(swin_block_pair(TokenGrid(t, 4, 4), pair, WindowSpec(2, 1)).tokens,
                                                         tok_probe)), rng.normal(size=(1, 16, 16))),
        ("patch_merging", lambda t: ad.sum_all(ad.gelu(patch_merging(TokenGrid(t, 4, 4), merge.reduce).tokens)),
         rng.normal(size=(1, 16, 16))),
        ("patch_expanding", lambda t: ad.sum_all(ad.gelu(patch_expanding(TokenGrid(t, 4, 4), expand.expand).tokens)),
         rng.normal(size=(1, 16, 16))),
    ]
    return cases


def run_op_suite(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error per op."""
    return {name: grad_check(f, x, eps) for name, f, x in op_cases(seed)}


def _owner(root, dotted: str):
    parts = dotted.split(".")
    obj = root
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj, parts[-1]


def unet_check(size: int = 16, fraction: float = 0.05, seed: int = 0, eps: float = 1e-6) -> float:
    """Check l1(unet(x), target) wrt a random subset of Unet parameters."""
    rng = make_rng(seed)
    with ad.default_dtype(np.float64):
        net = SwinUnet(2, 2, 16, UnetGeometry(mlp_ratio=2), rng)
        img = ad.constant(rng.normal(size=(1, 2, size, size)))
        target = ad.constant(rng.normal(size=(1, 2, size, size)))
    return _param_check(net, lambda: ad.l1_loss(net(img), target), fraction, rng, eps)


def model_check(cfg: McstraConfig | None = None, fraction: float = 0.05, seed: int = 0,
                eps: float = 1e-6, per_group: int = 4) -> dict[str, float]:
    """End-to-end total-loss check, per parameter group, on a small input."""
    cfg = cfg or McstraConfig.toy(height=16, width=16)
    rng = make_rng(seed)
    with ad.default_dtype(np.float64):
        params = McstraParams(cfg, seed)
        # nonzero PSF weights so the embedding path is exercised
        if params.theta_P is not None:
            params.theta_P.weight.data[...] = rng.uniform(-0.5, 0.5, size=params.theta_P.weight.shape)
        img = rng.uniform(0, 1, size=(2, cfg.height, cfg.width)) * np.exp(1j * rng.normal(size=(2, cfg.height, cfg.width)))
        y_full = fft2c(img)
        masks = [random_line_mask(cfg.width, cfg.accel, cfg.center_frac, seed + i) for i in range(2)]
        y_hat = np.stack([y * m.lines for y, m in zip(y_full, masks)])

        def loss():
            return forward(params, cfg, y_hat, masks, y_full).loss

        out = {}
        for group, plist in params.groups().items():
            names = [n for n, p in params.named_parameters() if n.split(".", 1)[0] == group]
            pick = rng.choice(len(names), size=min(per_group, len(names)), replace=False)
            worst = 0.0
            for k in sorted(pick.tolist()):
                worst = max(worst, _single_check(params, names[k], loss, fraction, rng, eps))
            out[group] = worst
    return out


def _param_check(root, loss, fraction, rng, eps) -> float:
    names = [n for n, _ in root.named_parameters()]
    worst = 0.0
    for name in names:
        worst = max(worst, _single_check(root, name, loss, fraction, rng, eps))
    return worst


def _single_check(root, name, loss, fraction, rng, eps) -> float:
    owner, attr = _owner(root, name)
    original = getattr(owner, attr)
    n = original.size
    k = max(1, int(round(fraction * n)))
    idx = rng.choice(n, size=min(k, n), replace=False)

    def f(t):
        setattr(owner, attr, t)
        try:
            return loss()
        finally:
            setattr(owner, attr, original)

    return grad_check(f, original.data, eps, indices=idx.tolist())
