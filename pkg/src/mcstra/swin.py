"""Convolution-free Swin-Unet built on :mod:`mcstra.autodiff`.

Token grids are stored as ``(batch, rows * cols, dim)`` tensors in row-major
token order. Window partitioning and the cyclic shift are a single token
permutation (see :func:`window_order`), so the reverse step restores the
original order exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .validation import ShapeError

NEG_LARGE = -1e9


# --------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_(self) -> "Module":
        for p in self.parameters():
            p.data[...] = 0
        return self


class Affine(Module):
    """``y = x @ weight + bias`` with uniform(+-1/sqrt(fan_in)) initial weights."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = ad.parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


# --------------------------------------------------------------------------
# token grids and windows


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, rows * cols, dim)
    rows: int
    cols: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.rows * self.cols:
            raise ShapeError(f"tokens of shape {self.tokens.shape} do not form a {self.rows}x{self.cols} grid")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class WindowSpec:
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.shift < self.window:
            raise ValueError(f"shift must satisfy 0 <= shift < window, got {self.shift}")

    @classmethod
    def for_grid(cls, rows: int, cols: int, window: int, shifted: bool) -> "WindowSpec":
        """Clamp the window to small grids; such grids use one global window and no shift."""
        if min(rows, cols) <= window:
            m = min(rows, cols)
            return cls(m, 0)
        return cls(window, window // 2 if shifted else 0)


def _check_divisible(rows: int, cols: int, m: int) -> None:
    if rows % m or cols % m:
        raise ShapeError(f"grid {rows}x{cols} is not divisible by window {m}")


@lru_cache(maxsize=None)
def window_order(rows: int, cols: int, window: int, shift: int) -> np.ndarray:
    """Token permutation: cyclic shift by ``-shift`` then window-major partition."""
    _check_divisible(rows, cols, window)
    idx = np.arange(rows * cols).reshape(rows, cols)
    idx = np.roll(idx, (-shift, -shift), axis=(0, 1))
    m = window
    order = idx.reshape(rows // m, m, cols // m, m).transpose(0, 2, 1, 3).reshape(-1)
    order.setflags(write=False)
    return order


@lru_cache(maxsize=None)
def shift_attention_mask(rows: int, cols: int, window: int, shift: int) -> np.ndarray | None:
    """Additive mask ``(n_windows, M*M, M*M)`` blocking pairs split by the cyclic shift."""
    if shift == 0:
        return None
    labels = np.zeros((rows, cols), dtype=np.int64)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = cnt
            cnt += 1
    m = window
    lw = labels.reshape(rows // m, m, cols // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    mask = np.where(lw[:, :, None] != lw[:, None, :], NEG_LARGE, 0.0)
    mask.setflags(write=False)
    return mask


def cyclic_shift(g: TokenGrid, s: int) -> TokenGrid:
    """Roll the grid by ``(-s, -s)`` on the torus."""
    b, d = g.batch, g.dim
    x = ad.reshape(g.tokens, (b, g.rows, g.cols, d))
    x = ad.roll(x, (-s, -s), axis=(1, 2))
    return TokenGrid(ad.reshape(x, (b, g.rows * g.cols, d)), g.rows, g.cols)


def window_partition(g: TokenGrid, spec: WindowSpec) -> Tensor:
    """Shift then split the grid into ``(B, n_windows, M*M, dim)`` windows."""
    order = window_order(g.rows, g.cols, spec.window, spec.shift)
    w = ad.gather_windows(g.tokens, order, axis=1)
    n = spec.window * spec.window
    return ad.reshape(w, (g.batch, len(order) // n, n, g.dim))


def window_reverse(windows: Tensor, spec: WindowSpec, rows: int, cols: int) -> TokenGrid:
    """Inverse of :func:`window_partition` (un-partition and un-shift)."""
    b, d = windows.shape[0], windows.shape[-1]
    order = window_order(rows, cols, spec.window, spec.shift)
    flat = ad.reshape(windows, (b, rows * cols, d))
    return TokenGrid(ad.scatter_windows(flat, order, axis=1), rows, cols)


# --------------------------------------------------------------------------
# attention and blocks


class SwinBlock(Module):
    """Pre-norm transformer block: windowed MHSA and a GELU MLP, each residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Affine(dim, dim, rng)
        self.k = Affine(dim, dim, rng)
        self.v = Affine(dim, dim, rng)
        self.proj = Affine(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Affine(dim, mlp_ratio * dim, rng)
        self.fc2 = Affine(mlp_ratio * dim, dim, rng)

    def __call__(self, g: TokenGrid, spec: WindowSpec) -> TokenGrid:
        x = g.tokens
        h = TokenGrid(self.norm1(x), g.rows, g.cols)
        windows = window_partition(h, spec)
        mask = shift_attention_mask(g.rows, g.cols, spec.window, spec.shift)
        att = window_reverse(mhsa(windows, self, mask), spec, g.rows, g.cols)
        x = ad.add(x, att.tokens)
        y = self.fc2(ad.gelu(self.fc1(self.norm2(x))))
        return TokenGrid(ad.add(x, y), g.rows, g.cols)


def mhsa(windows: Tensor, block: SwinBlock, attn_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``windows`` is ``(B, n_windows, n, dim)``; ``attn_mask`` is an additive
    ``(n_windows, n, n)`` array of 0 / -1e9 entries or ``None``.
    """
    b, nw, n, d = windows.shape
    h = block.heads
    if d != block.q.weight.shape[0]:
        raise ShapeError(f"token dim {d} does not match block dim {block.q.weight.shape[0]}")
    dh = d // h

    def heads(t):
        return ad.permute(ad.reshape(t, (b, nw, n, h, dh)), (0, 1, 3, 2, 4))

    q = heads(block.q(windows))
    k = heads(block.k(windows))
    v = heads(block.v(windows))
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if attn_mask is not None:
        logits = ad.add(logits, ad.constant(attn_mask[None, :, None], dtype=logits.dtype))
    out = ad.matmul(ad.softmax(logits, axis=-1), v)
    out = ad.reshape(ad.permute(out, (0, 1, 3, 2, 4)), (b, nw, n, d))
    return block.proj(out)


class SwinBlockPair(Module):
    """W-MSA block followed by an SW-MSA block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.regular = SwinBlock(dim, heads, rng, mlp_ratio)
        self.shifted = SwinBlock(dim, heads, rng, mlp_ratio)

    def __call__(self, g: TokenGrid, window: int, shift: int | None = None) -> TokenGrid:
        """``shift=None`` uses ``window // 2`` (no shift once the window covers the grid)."""
        first = WindowSpec.for_grid(g.rows, g.cols, window, shifted=False)
        second = WindowSpec.for_grid(g.rows, g.cols, window, shifted=True)
        if shift is not None:
            second = WindowSpec(second.window, shift if second.window == window else 0)
        return self.shifted(self.regular(g, first), second)


def swin_block_pair(g: TokenGrid, pair: SwinBlockPair, spec: WindowSpec, e_pos: Tensor | None = None) -> TokenGrid:
    """Functional form: optionally add ``e_pos`` then run the W-MSA / SW-MSA pair."""
    if e_pos is not None:
        g = TokenGrid(ad.add(g.tokens, e_pos), g.rows, g.cols)
    return pair(g, spec.window, spec.shift)


# --------------------------------------------------------------------------
# resolution changes


def patchify(img: Tensor, patch: int, embed: Affine) -> TokenGrid:
    """Flatten non-overlapping ``patch x patch`` tiles of ``(B, C, H, W)`` and embed them."""
    b, c, hgt, wid = img.shape
    if hgt % patch or wid % patch:
        raise ShapeError(f"image {hgt}x{wid} is not divisible by patch {patch}")
    r, q = hgt // patch, wid // patch
    x = ad.reshape(img, (b, c, r, patch, q, patch))
    x = ad.permute(x, (0, 2, 4, 1, 3, 5))
    x = ad.reshape(x, (b, r * q, c * patch * patch))
    return TokenGrid(embed(x), r, q)


def patch_vectors(img: np.ndarray, patch: int) -> np.ndarray:
    """numpy twin of the tiling in :func:`patchify` for ``(..., C, H, W)`` arrays."""
    *lead, c, hgt, wid = img.shape
    r, q = hgt // patch, wid // patch
    x = img.reshape(*lead, c, r, patch, q, patch)
    nl = len(lead)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, r * q, c * patch * patch)


class PatchMerging(Module):
    """Concatenate each 2x2 token group (4*dim) and map it to 2*dim."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.reduce = Affine(4 * dim, 2 * dim, rng)

    def __call__(self, g: TokenGrid) -> TokenGrid:
        return patch_merging(g, self.reduce)


class PatchExpanding(Module):
    """Map dim to 2*dim and unfold each token into a 2x2 group of dim/2 tokens."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.expand = Affine(dim, 2 * dim, rng)

    def __call__(self, g: TokenGrid) -> TokenGrid:
        return patch_expanding(g, self.expand)


def patch_merging(g: TokenGrid, reduce: Affine) -> TokenGrid:
    if g.rows % 2 or g.cols % 2:
        raise ShapeError(f"patch merging needs an even grid, got {g.rows}x{g.cols}")
    b, d = g.batch, g.dim
    r, q = g.rows // 2, g.cols // 2
    x = ad.reshape(g.tokens, (b, r, 2, q, 2, d))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))  # (b, r, q, 2, 2, d)
    x = ad.reshape(x, (b, r * q, 4 * d))
    return TokenGrid(reduce(x), r, q)


def patch_expanding(g: TokenGrid, expand: Affine) -> TokenGrid:
    b = g.batch
    x = expand(g.tokens)  # (b, L, 2d)
    d_out = x.shape[-1] // 4
    x = ad.reshape(x, (b, g.rows, g.cols, 2, 2, d_out))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))  # (b, rows, 2, cols, 2, d_out)
    return TokenGrid(ad.reshape(x, (b, 4 * g.rows * g.cols, d_out)), 2 * g.rows, 2 * g.cols)


# --------------------------------------------------------------------------
# Swin-Unet


@dataclass(frozen=True)
class UnetGeometry:
    patch: int = 2
    window: int = 4
    stages: int = 2
    pairs_per_stage: int = 1
    head_dim: int = 16
    mlp_ratio: int = 4

    def heads(self, dim: int) -> int:
        return max(1, dim // self.head_dim)

    def check(self, height: int, width: int) -> None:
        """Raise ``ShapeError`` if an image size cannot pass through every stage."""
        step = self.patch * 2 ** self.stages
        if height % step or width % step:
            raise ShapeError(
                f"image {height}x{width} must be divisible by patch * 2**stages = {step}"
            )
        r, q = height // self.patch, width // self.patch
        for _ in range(self.stages + 1):
            m = min(self.window, r, q)
            _check_divisible(r, q, m)
            r, q = r // 2, q // 2


class SwinUnet(Module):
    """Encoder, bottleneck and decoder of Swin block pairs with skip fusion.

    With ``input_gate`` (needs ``in_ch == out_ch``) the input is added back to the
    output scaled by a learned scalar that starts at 1. The gate is an ordinary
    parameter, so zeroing every parameter still gives a zero output.
    """

    def __init__(self, in_ch: int, out_ch: int, dim: int, geometry: UnetGeometry, rng: np.random.Generator,
                 input_gate: bool = False):
        if input_gate and in_ch != out_ch:
            raise ShapeError(f"input gate needs matching channels, got {in_ch} -> {out_ch}")
        geo = geometry
        self.in_ch, self.out_ch, self.dim, self.geometry = in_ch, out_ch, dim, geo
        p = geo.patch

        def stage(d):
            return [SwinBlockPair(d, geo.heads(d), rng, geo.mlp_ratio) for _ in range(geo.pairs_per_stage)]

        self.embed = Affine(in_ch * p * p, dim, rng)
        self.encoder = [_Stage(stage(dim * 2 ** i)) for i in range(geo.stages)]
        self.merges = [PatchMerging(dim * 2 ** i, rng) for i in range(geo.stages)]
        self.bottleneck = _Stage(stage(dim * 2 ** geo.stages))
        # decoder lists run from the coarsest stage to the finest
        levels = list(reversed(range(geo.stages)))
        self.expands = [PatchExpanding(dim * 2 ** (i + 1), rng) for i in levels]
        self.fuse = [Affine(2 * dim * 2 ** i, dim * 2 ** i, rng) for i in levels]
        self.decoder = [_Stage(stage(dim * 2 ** i)) for i in levels]
        self.final_expand = Affine(dim, p * p * dim, rng)
        self.head = Affine(dim, out_ch, rng)
        self.gate = ad.parameter(np.ones(1)) if input_gate else None

    def __call__(self, img: Tensor, e_pos: Tensor | None = None) -> Tensor:
        return swin_unet_forward(img, self, e_pos)


class _Stage(Module):
    def __init__(self, pairs: list[SwinBlockPair]):
        self.pairs = pairs

    def __call__(self, g: TokenGrid, window: int) -> TokenGrid:
        for pair in self.pairs:
            g = pair(g, window)
        return g


def swin_unet_forward(img: Tensor, net: SwinUnet, e_pos: Tensor | None = None) -> Tensor:
    """Run ``(B, c_in, H, W)`` through the Unet and return ``(B, c_out, H, W)``.

    ``e_pos`` (``(B or 1, tokens, dim)``) is added once, right after patch embedding.
    """
    b, c, hgt, wid = img.shape
    if c != net.in_ch:
        raise ShapeError(f"expected {net.in_ch} input channels, got {c}")
    geo = net.geometry
    geo.check(hgt, wid)
    g = patchify(img, geo.patch, net.embed)
    if e_pos is not None:
        if e_pos.shape[-2:] != g.tokens.shape[-2:]:
            raise ShapeError(f"positional embedding {e_pos.shape} does not match tokens {g.tokens.shape}")
        g = TokenGrid(ad.add(g.tokens, e_pos), g.rows, g.cols)
    skips = []
    for stage, merge in zip(net.encoder, net.merges):
        g = stage(g, geo.window)
        skips.append(g)
        g = merge(g)
    g = net.bottleneck(g, geo.window)
    for expand, fuse, stage, skip in zip(net.expands, net.fuse, net.decoder, reversed(skips)):
        g = expand(g)
        x = fuse(ad.concat([g.tokens, skip.tokens], axis=-1))
        g = stage(TokenGrid(x, g.rows, g.cols), geo.window)
    # back to pixel resolution: one token per pixel, then project to channels
    p = geo.patch
    x = net.final_expand(g.tokens)  # (b, L, p*p*dim)
    d = net.dim
    x = ad.reshape(x, (b, g.rows, g.cols, p, p, d))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, hgt * wid, d))
    x = net.head(x)  # (b, H*W, out)
    x = ad.permute(ad.reshape(x, (b, hgt, wid, net.out_ch)), (0, 3, 1, 2))
    if net.gate is not None:
        x = ad.add(x, ad.mul(img, net.gate))
    return x
