"""The McSTRA reconstruction pipeline.

PSF-guided positional embeddings, a two-branch (low/high k-space band)
feature extractor, a weight-shared cascade of Swin-Unets interleaved with
data consistency, and a magnitude reconstruction tail. Complex images travel
through the networks as two real channels (real, imaginary).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import nmse, psnr, ssim
from .fourier import (
    INFINITE,
    SamplingMask,
    dc_kspace,
    fft2c,
    ifft2c,
    make_rng,
    partition_band_masks,
    psf_of_mask,
    square_partition_masks,
)
from .swin import Affine, Module, SwinUnet, UnetGeometry, patch_vectors
from .validation import ShapeError

ABLATIONS = ("A", "B", "C", "D", "E", "F")


# --------------------------------------------------------------------------
# configuration


@dataclass
class McstraConfig:
    """Model, protocol and optimizer settings. Defaults are the full-size model."""

    height: int = 64
    width: int = 64
    cascade_length: int = 5
    branch_dim: int = 48
    cascade_dim: int = 96
    tail_dim: int = 48
    dc_lambda: float = INFINITE
    alpha_l: float = 0.5
    alpha_h: float = 0.5
    gamma_branch: float = 1.0 / 3.0
    gamma_cas: float = 1.0 / 3.0
    gamma_tail: float = 1.0 / 3.0
    cascade_weights: str = "linear"  # "linear" or "final"
    accel: float = 4.0
    center_frac: float = 0.08
    mask_kind: str = "random"
    patch: int = 2
    window: int = 4
    stages: int = 2
    pairs_per_stage: int = 1
    head_dim: int = 16
    mlp_ratio: int = 4
    ablation: str = "F"
    psf_feature: str = "magnitude"  # "magnitude" or "complex"
    learning_rate: float = 1e-4
    rho: float = 0.99
    eps_opt: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 50
    batch_size: int = 8
    max_steps: int = 0
    fixed_masks: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.cascade_length < 1:
            raise ValueError("cascade_length must be >= 1")
        for name in ("gamma_branch", "gamma_cas", "gamma_tail", "alpha_l", "alpha_h"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.dc_lambda < 0:
            raise ValueError("dc_lambda must be nonnegative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {', '.join(ABLATIONS)}")
        if self.cascade_weights not in ("linear", "final"):
            raise ValueError(f"cascade_weights must be 'linear' or 'final', got {self.cascade_weights!r}")
        if self.psf_feature not in ("magnitude", "complex"):
            raise ValueError(f"psf_feature must be 'magnitude' or 'complex', got {self.psf_feature!r}")
        if self.mask_kind not in ("random", "equispaced"):
            raise ValueError(f"mask_kind must be 'random' or 'equispaced', got {self.mask_kind!r}")
        self.geometry.check(self.height, self.width)

    @property
    def geometry(self) -> UnetGeometry:
        return UnetGeometry(self.patch, self.window, self.stages, self.pairs_per_stage, self.head_dim,
                            self.mlp_ratio)

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def replace(self, **kw) -> "McstraConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def toy(cls, **kw) -> "McstraConfig":
        """Desk-scale settings used by the acceptance run."""
        base = dict(height=64, width=64, cascade_length=3, branch_dim=16, cascade_dim=32, tail_dim=16,
                    learning_rate=1e-3, batch_size=4, mlp_ratio=2)
        base.update(kw)
        return cls(**base)

    # -- flat "key = value" text format

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and math.isinf(v):
                v = "inf"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "McstraConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_value(fields[key].default, value, key)
        return cls(**kw)


def _parse_value(default, value: str, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return math.inf if value.lower() in ("inf", "infinite") else float(value)
        return value
    except ValueError:
        raise ValueError(f"bad value {value!r} for {key}") from None


@dataclass(frozen=True)
class Pipeline:
    """Effective pipeline switches after applying an ablation tag."""

    multi_branch: bool = True
    partition: str = "band"  # "band", "square" or "none" (both branches see everything)
    tail_channels: int = 1
    psf_embedding: bool = True


def ablation_apply(cfg_or_tag) -> Pipeline:
    """Map configurations A-F to pipeline switches.

    A drops the branches, B feeds both branches the unpartitioned k-space,
    C uses a dual-channel tail, D drops the PSF path, E uses a centered
    square partition and F is the full model.
    """
    tag = cfg_or_tag.ablation if isinstance(cfg_or_tag, McstraConfig) else cfg_or_tag
    table = {
        "A": Pipeline(multi_branch=False),
        "B": Pipeline(partition="none"),
        "C": Pipeline(tail_channels=2),
        "D": Pipeline(psf_embedding=False),
        "E": Pipeline(partition="square"),
        "F": Pipeline(),
    }
    try:
        return table[tag]
    except KeyError:
        raise ValueError(f"unknown ablation tag {tag!r}") from None


def cascade_betas(n: int, mode: str = "linear") -> np.ndarray:
    """Stage weights: ``t / sum(1..n)`` (linear) or all weight on the last stage."""
    if n < 1:
        raise ValueError("cascade length must be >= 1")
    if mode == "final":
        b = np.zeros(n)
        b[-1] = 1.0
        return b
    t = np.arange(1, n + 1, dtype=np.float64)
    return t / t.sum()


# --------------------------------------------------------------------------
# parameters


class McstraParams(Module):
    """All trainable parameters; the cascade network is shared by every stage."""

    def __init__(self, cfg: McstraConfig, seed: int | None = None):
        rng = make_rng(cfg.seed if seed is None else seed)
        pipe = ablation_apply(cfg)
        geo = cfg.geometry
        if pipe.multi_branch:
            self.theta_l = SwinUnet(2, 2, cfg.branch_dim, geo, rng)
            self.theta_h = SwinUnet(2, 2, cfg.branch_dim, geo, rng)
        else:
            self.theta_l = self.theta_h = None
        self.theta_cas = SwinUnet(2, 2, cfg.cascade_dim, geo, rng)
        tc = pipe.tail_channels
        self.theta_tail = SwinUnet(tc, tc, cfg.tail_dim, geo, rng, input_gate=True)
        psf_in = cfg.patch ** 2 * (2 if cfg.psf_feature == "complex" else 1)
        # zero start so F begins from the same point as D; D still draws it to keep the rng in step
        theta_P = Affine(psf_in, cfg.branch_dim, rng)
        theta_P.weight.data[...] = 0
        self.theta_P = theta_P if pipe.psf_embedding else None
        self.E_abs = ad.parameter(rng.uniform(-0.02, 0.02, size=(cfg.n_tokens, cfg.branch_dim)))
        # the shared embedding lives at branch dim; other widths get an adapter
        self.pos_cas = Affine(cfg.branch_dim, cfg.cascade_dim, rng) if cfg.cascade_dim != cfg.branch_dim else None
        self.pos_tail = Affine(cfg.branch_dim, cfg.tail_dim, rng) if cfg.tail_dim != cfg.branch_dim else None

    def groups(self) -> dict[str, list[Tensor]]:
        """Parameters keyed by top-level group name."""
        out: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            out.setdefault(name.split(".", 1)[0], []).append(p)
        return out


# --------------------------------------------------------------------------
# complex <-> channels and the differentiable DC block


def to_channels(z: np.ndarray, dtype=None) -> np.ndarray:
    """(..., H, W) complex -> (..., 2, H, W) real."""
    return np.stack([z.real, z.imag], axis=-3).astype(dtype or ad.get_default_dtype(), copy=False)


def from_channels(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return x[..., 0, :, :].astype(np.float64) + 1j * x[..., 1, :, :].astype(np.float64)


def _masks_raster(masks, batch: int, height: int, width: int) -> np.ndarray:
    """Normalize a mask / list of masks / array to a (B, H, W) boolean raster."""
    if isinstance(masks, SamplingMask):
        masks = [masks] * batch
    if isinstance(masks, (list, tuple)):
        rows = []
        for m in masks:
            if isinstance(m, SamplingMask):
                if m.width != width:
                    raise ShapeError(f"mask width {m.width} does not match raster width {width}")
                rows.append(np.broadcast_to(m.lines.astype(bool), (height, width)))
            else:
                rows.append(np.broadcast_to(np.asarray(m, dtype=bool), (height, width)))
        arr = np.stack(rows)
    else:
        arr = np.asarray(masks, dtype=bool)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.ndim == 2 and arr.shape != (height, width):
            arr = arr[:, None, :]
        arr = np.broadcast_to(arr, (batch, height, width))
    if arr.shape != (batch, height, width):
        raise ShapeError(f"masks of shape {arr.shape} do not match batch {batch} of {height}x{width}")
    return arr


def dc_layer(x: Tensor, y_meas: np.ndarray, sampled: np.ndarray, lam: float = INFINITE) -> Tensor:
    """Differentiable data consistency on a ``(B, 2, H, W)`` image tensor.

    The Jacobian with respect to ``x`` is ``F^H diag F`` with diag 1 off the
    sampled set and ``1 / (1 + lam)`` on it, which is self-adjoint.
    """
    z = from_channels(x)
    out = ifft2c(dc_kspace(fft2c(z), y_meas, sampled, lam))
    keep = np.where(sampled, 0.0 if lam == INFINITE else 1.0 / (1.0 + lam), 1.0)

    def vjp(g):
        gz = g[:, 0].astype(np.float64) + 1j * g[:, 1].astype(np.float64)
        back = ifft2c(keep * fft2c(gz))
        return (to_channels(back, g.dtype),)

    return ad.custom_op([x], to_channels(out, x.dtype), vjp)


# --------------------------------------------------------------------------
# forward pieces


def _psf_features(masks: np.ndarray, cfg: McstraConfig) -> np.ndarray:
    """Per-token PSF patch vectors ``(B, tokens, patch^2 * c)``."""
    psf = psf_of_mask(masks.astype(np.float64))
    if cfg.psf_feature == "complex":
        chans = np.stack([psf.real, psf.imag], axis=-3)
    else:
        chans = np.abs(psf)[..., None, :, :]
    return patch_vectors(chans, cfg.patch)


def pe_generate(masks, cfg: McstraConfig, params: McstraParams) -> Tensor:
    """Positional embedding ``P(psf(mask)) + E_abs`` of shape (B, tokens, branch_dim).

    Depends on the masks only, never on image content.
    """
    sampled = _masks_raster(masks, _batch_of(masks), cfg.height, cfg.width)
    if params.theta_P is None or not ablation_apply(cfg).psf_embedding:
        return ad.add(ad.constant(np.zeros((sampled.shape[0], 1, 1)), dtype=params.E_abs.dtype), params.E_abs)
    feats = ad.constant(_psf_features(sampled, cfg), dtype=params.E_abs.dtype)
    return ad.add(params.theta_P(feats), params.E_abs)


def _batch_of(masks) -> int:
    if isinstance(masks, SamplingMask):
        return 1
    if isinstance(masks, (list, tuple)):
        return len(masks)
    arr = np.asarray(masks)
    return 1 if arr.ndim == 1 else arr.shape[0]


def branch_partition(cfg: McstraConfig) -> tuple[np.ndarray, np.ndarray] | None:
    """(low, high) 0/1 rasters for the branch inputs, or ``None`` for no partition."""
    pipe = ablation_apply(cfg)
    if pipe.partition == "band":
        low, high = partition_band_masks(cfg.width, cfg.center_frac)
        return low.to_2d(cfg.height), high.to_2d(cfg.height)
    if pipe.partition == "square":
        return square_partition_masks(cfg.height, cfg.width, cfg.center_frac)
    return None


def branch_inputs(y_hat: np.ndarray, cfg: McstraConfig) -> tuple[np.ndarray, np.ndarray]:
    part = branch_partition(cfg)
    if part is None:
        full = ifft2c(y_hat)
        return full, full
    low, high = part
    return ifft2c(y_hat * low), ifft2c(y_hat * high)


def multi_branch_forward(y_hat: np.ndarray, cfg: McstraConfig, params: McstraParams, e_pos: Tensor | None):
    """Return ``(x_branch, x_l, x_h)`` as (B, 2, H, W) tensors (``x_l``/``x_h`` are None for A)."""
    y_hat = np.asarray(y_hat)
    if y_hat.ndim == 2:
        y_hat = y_hat[None]
    if not ablation_apply(cfg).multi_branch:
        return ad.constant(to_channels(ifft2c(y_hat))), None, None
    low_in, high_in = branch_inputs(y_hat, cfg)
    x_l = params.theta_l(ad.constant(to_channels(low_in)), e_pos)
    x_h = params.theta_h(ad.constant(to_channels(high_in)), e_pos)
    return ad.add(x_l, x_h), x_l, x_h


def branch_loss(x_l: Tensor | None, x_h: Tensor | None, y_full: np.ndarray, cfg: McstraConfig) -> Tensor:
    """``alpha_l * l1(ref_l, x_l) + alpha_h * l1(ref_h, x_h)`` over both channels."""
    if x_l is None:
        return ad.constant(np.zeros(()), dtype=np.float64)
    ref_l, ref_h = branch_inputs(np.asarray(y_full).reshape(x_l.shape[0], cfg.height, cfg.width), cfg)
    loss_l = ad.l1_loss(x_l, ad.constant(to_channels(ref_l, x_l.dtype)))
    loss_h = ad.l1_loss(x_h, ad.constant(to_channels(ref_h, x_h.dtype)))
    return ad.add(ad.scale(loss_l, cfg.alpha_l), ad.scale(loss_h, cfg.alpha_h))


def cascade_forward(x0: Tensor, y_hat: np.ndarray, masks, cfg: McstraConfig, params: McstraParams,
                    e_pos: Tensor | None) -> list[Tensor]:
    """``x_t = DC(f_cas(x_{t-1}))`` for t = 1..N with one shared network."""
    b = x0.shape[0]
    y_hat = np.asarray(y_hat).reshape(b, cfg.height, cfg.width)
    sampled = _masks_raster(masks, b, cfg.height, cfg.width)
    e_cas = params.pos_cas(e_pos) if (e_pos is not None and params.pos_cas is not None) else e_pos
    xs, x = [], x0
    for _ in range(cfg.cascade_length):
        x = dc_layer(params.theta_cas(x, e_cas), y_hat, sampled, cfg.dc_lambda)
        xs.append(x)
    return xs


def cascade_loss(intermediates: list[Tensor], y_full: np.ndarray, cfg: McstraConfig) -> Tensor:
    """Discounted sum of per-stage l1 losses against the fully sampled image."""
    x_ref = ifft2c(np.asarray(y_full).reshape(intermediates[0].shape[0], cfg.height, cfg.width))
    ref = ad.constant(to_channels(x_ref, intermediates[0].dtype))
    betas = cascade_betas(len(intermediates), cfg.cascade_weights)
    total = None
    for beta, x in zip(betas, intermediates):
        if beta == 0.0:
            continue
        term = ad.scale(ad.l1_loss(x, ref), beta)
        total = term if total is None else ad.add(total, term)
    return total


def tail_forward(x_n: Tensor, cfg: McstraConfig, params: McstraParams, e_pos: Tensor | None) -> Tensor:
    """Magnitude reconstruction ``(B, H, W)``.

    The single-channel tail maps ``|x_N|`` to a magnitude image; the
    dual-channel variant (ablation C) maps ``x_N`` and takes the magnitude after.
    """
    e_tail = params.pos_tail(e_pos) if (e_pos is not None and params.pos_tail is not None) else e_pos
    b = x_n.shape[0]
    if params.theta_tail.in_ch == 2:
        return ad.two_channel_magnitude(params.theta_tail(x_n, e_tail))
    mag = ad.reshape(ad.two_channel_magnitude(x_n), (b, 1, cfg.height, cfg.width))
    out = params.theta_tail(mag, e_tail)
    return ad.reshape(out, (b, cfg.height, cfg.width))


def tail_loss(x_tail: Tensor, y_full: np.ndarray, cfg: McstraConfig) -> Tensor:
    ref = np.abs(ifft2c(np.asarray(y_full).reshape(x_tail.shape[0], cfg.height, cfg.width)))
    return ad.l1_loss(x_tail, ad.constant(ref, dtype=x_tail.dtype))


def total_loss(l_branch: Tensor, l_cas: Tensor, l_tail: Tensor, cfg: McstraConfig) -> Tensor:
    """``gamma_branch * L_branch + gamma_cas * L_cas + gamma_tail * L_tail``."""
    out = ad.scale(l_cas, cfg.gamma_cas)
    out = ad.add(out, ad.scale(l_tail, cfg.gamma_tail))
    return ad.add(out, ad.scale(l_branch, cfg.gamma_branch))


# --------------------------------------------------------------------------
# full model


@dataclass
class ForwardResult:
    x_tail: Tensor
    intermediates: list[Tensor]
    x_branch: Tensor
    x_l: Tensor | None
    x_h: Tensor | None
    e_pos: Tensor | None
    losses: dict[str, Tensor] = field(default_factory=dict)

    @property
    def loss(self) -> Tensor:
        return self.losses["total"]


@dataclass
class ReconReport:
    nmse: list[float]
    psnr: list[float]
    ssim: list[float]
    stage_nmse: list[list[float]]  # [stage][slice]
    losses: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        out = {"nmse": float(np.mean(self.nmse)), "psnr": float(np.mean(self.psnr)), "ssim": float(np.mean(self.ssim))}
        for t, vals in enumerate(self.stage_nmse, 1):
            out[f"stage{t}_nmse"] = float(np.mean(vals))
        out.update(self.losses)
        return out


def forward(params: McstraParams, cfg: McstraConfig, y_hat: np.ndarray, masks,
            y_full: np.ndarray | None = None) -> ForwardResult:
    """Batched McSTRA forward pass; computes all losses when ``y_full`` is given.

    ``y_hat`` / ``y_full`` are (B, H, W) complex k-space, ``masks`` a mask,
    list of masks or (B, W) / (B, H, W) array.
    """
    y_hat = np.asarray(y_hat)
    if y_hat.ndim == 2:
        y_hat = y_hat[None]
    b, h, w = y_hat.shape
    if (h, w) != (cfg.height, cfg.width):
        raise ShapeError(f"input {h}x{w} does not match the model geometry {cfg.height}x{cfg.width}")
    sampled = _masks_raster(masks, b, h, w)
    e_pos = pe_generate(sampled, cfg, params)
    x_branch, x_l, x_h = multi_branch_forward(y_hat, cfg, params, e_pos)
    xs = cascade_forward(x_branch, y_hat, sampled, cfg, params, e_pos)
    x_tail = tail_forward(xs[-1], cfg, params, e_pos)
    res = ForwardResult(x_tail, xs, x_branch, x_l, x_h, e_pos)
    if y_full is not None:
        y_full = np.asarray(y_full).reshape(b, h, w)
        lb = branch_loss(x_l, x_h, y_full, cfg)
        lc = cascade_loss(xs, y_full, cfg)
        lt = tail_loss(x_tail, y_full, cfg)
        res.losses = {"branch": lb, "cascade": lc, "tail": lt, "total": total_loss(lb, lc, lt, cfg)}
    return res


def report(res: ForwardResult, y_full: np.ndarray) -> ReconReport:
    """Per-slice metrics of the tail output and per-stage NMSE of the cascade."""
    ref = np.abs(ifft2c(np.asarray(y_full).reshape(res.x_tail.shape)))
    pred = res.x_tail.data.astype(np.float64)
    rep = ReconReport([], [], [], [[] for _ in res.intermediates])
    for i in range(ref.shape[0]):
        rep.nmse.append(nmse(pred[i], ref[i]))
        rep.psnr.append(psnr(pred[i], ref[i]))
        rep.ssim.append(ssim(pred[i], ref[i]))
        for t, x in enumerate(res.intermediates):
            rep.stage_nmse[t].append(nmse(np.abs(from_channels(x.data[i])), ref[i]))
    rep.losses = {k: v.item() for k, v in res.losses.items()}
    return rep


def mcstra_forward(y_hat: np.ndarray, m, cfg: McstraConfig, params: McstraParams,
                   y_full: np.ndarray | None = None) -> tuple[np.ndarray, ReconReport | None]:
    """Reconstruct magnitude images; the report needs the fully sampled ``y_full``."""
    res = forward(params, cfg, y_hat, m, y_full)
    out = res.x_tail.data.astype(np.float64)
    rep = report(res, y_full) if y_full is not None else None
    return (out[0] if np.asarray(y_hat).ndim == 2 else out), rep
