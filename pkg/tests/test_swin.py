import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcstra import autodiff as ad
from mcstra.autodiff import constant
from mcstra.fourier import make_rng
from mcstra.swin import (
    Affine,
    PatchExpanding,
    PatchMerging,
    SwinBlock,
    SwinBlockPair,
    SwinUnet,
    TokenGrid,
    UnetGeometry,
    WindowSpec,
    cyclic_shift,
    mhsa,
    patch_expanding,
    patch_merging,
    shift_attention_mask,
    swin_block_pair,
    window_order,
    window_partition,
    window_reverse,
)
from mcstra.validation import ShapeError

from oracles import allowed_pairs, dense_attention


def grid(rng, rows, cols, dim, batch=1):
    return TokenGrid(constant(rng.normal(size=(batch, rows * cols, dim)), dtype=np.float64), rows, cols)


@given(k=st.integers(1, 3), m=st.sampled_from([1, 2, 4]), data=st.data())
@settings(max_examples=40, deadline=None)
def test_partition_roundtrip_is_bit_exact(k, m, data):
    rows = cols = m * k
    shift = data.draw(st.integers(0, m - 1))
    g = grid(make_rng(k * 7 + m), rows, cols, 3, batch=2)
    spec = WindowSpec(m, shift)
    back = window_reverse(window_partition(g, spec), spec, rows, cols)
    np.testing.assert_array_equal(back.tokens.data, g.tokens.data)


def test_partition_shapes():
    g = grid(make_rng(0), 4, 4, 5)
    assert window_partition(g, WindowSpec(2)).shape == (1, 4, 4, 5)
    assert window_partition(g, WindowSpec(4)).shape == (1, 1, 16, 5)


def test_partition_groups_spatial_windows():
    order = window_order(4, 4, 2, 0)
    assert order[:4].tolist() == [0, 1, 4, 5]
    with pytest.raises(ShapeError):
        window_order(6, 4, 4, 0)


def test_cyclic_shift_identities():
    g = grid(make_rng(1), 4, 4, 2)
    np.testing.assert_array_equal(cyclic_shift(g, 0).tokens.data, g.tokens.data)
    np.testing.assert_array_equal(cyclic_shift(cyclic_shift(g, 1), -1).tokens.data, g.tokens.data)
    np.testing.assert_array_equal(cyclic_shift(g, 4).tokens.data, g.tokens.data)


@pytest.mark.parametrize("window,shift", [(4, 2), (2, 1), (4, 1)])
def test_shift_mask_matches_brute_force_adjacency(window, shift):
    rows = cols = 8
    mask = shift_attention_mask(rows, cols, window, shift)
    order = window_order(rows, cols, window, 0)
    ok = allowed_pairs(rows, cols, window, shift)
    n = window * window
    for w in range(mask.shape[0]):
        cells = [divmod(int(t), cols) for t in order[w * n:(w + 1) * n]]
        for i, a in enumerate(cells):
            for j, b in enumerate(cells):
                assert (mask[w, i, j] == 0) == ((a, b) in ok)


def test_shift_mask_none_without_shift():
    assert shift_attention_mask(8, 8, 4, 0) is None


def _block_arrays(block):
    return [block.q.weight.data, block.q.bias.data, block.k.weight.data, block.k.bias.data,
            block.v.weight.data, block.v.bias.data, block.proj.weight.data, block.proj.bias.data]


def _randomize_biases(block, rng):
    for aff in (block.q, block.k, block.v, block.proj):
        aff.bias.data[...] = rng.normal(size=aff.bias.shape) * 0.1


@pytest.mark.parametrize("rows,heads", [(2, 1), (4, 2), (4, 4)])
def test_global_window_attention_equals_dense_oracle(rows, heads):
    rng = make_rng(rows + heads)
    with ad.default_dtype(np.float64):
        block = SwinBlock(16, heads, rng)
    _randomize_biases(block, rng)
    g = grid(rng, rows, rows, 16)
    out = mhsa(window_partition(g, WindowSpec(rows)), block).data[0, 0]
    expect = dense_attention(g.tokens.data[0], *_block_arrays(block), heads)
    assert np.max(np.abs(out - expect)) < 1e-10


def test_windowed_attention_is_dense_attention_per_window():
    rng = make_rng(5)
    with ad.default_dtype(np.float64):
        block = SwinBlock(8, 2, rng)
    g = grid(rng, 4, 4, 8)
    wins = window_partition(g, WindowSpec(2))
    out = mhsa(wins, block).data[0]
    for w in range(4):
        expect = dense_attention(wins.data[0, w], *_block_arrays(block), 2)
        assert np.max(np.abs(out[w] - expect)) < 1e-10


def test_single_token_window():
    rng = make_rng(6)
    with ad.default_dtype(np.float64):
        block = SwinBlock(4, 1, rng)
    _randomize_biases(block, rng)
    x = rng.normal(size=(1, 1, 1, 4))
    out = mhsa(constant(x, dtype=np.float64), block).data
    v = x @ block.v.weight.data + block.v.bias.data
    np.testing.assert_allclose(out, v @ block.proj.weight.data + block.proj.bias.data, atol=1e-12)


def test_identical_tokens_give_identical_outputs():
    rng = make_rng(7)
    with ad.default_dtype(np.float64):
        block = SwinBlock(8, 2, rng)
    x = np.broadcast_to(rng.normal(size=8), (1, 1, 4, 8)).copy()
    out = mhsa(constant(x, dtype=np.float64), block).data[0, 0]
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_zero_branches_make_block_pair_identity():
    rng = make_rng(8)
    pair = SwinBlockPair(16, 2, rng)
    for blk in (pair.regular, pair.shifted):
        for aff in (blk.q, blk.k, blk.v, blk.proj, blk.fc1, blk.fc2):
            aff.zero_()
    g = grid(rng, 8, 8, 16)
    out = swin_block_pair(g, pair, WindowSpec(4, 2))
    np.testing.assert_array_equal(out.tokens.data, g.tokens.data)


def test_zero_shift_pair_is_two_regular_blocks():
    rng = make_rng(9)
    with ad.default_dtype(np.float64):
        pair = SwinBlockPair(16, 2, rng)
    g = grid(rng, 8, 8, 16)
    out = swin_block_pair(g, pair, WindowSpec(4, 0))
    spec = WindowSpec(4, 0)
    expect = pair.shifted(pair.regular(g, spec), spec)
    np.testing.assert_array_equal(out.tokens.data, expect.tokens.data)


def test_positional_embedding_is_added_first():
    rng = make_rng(10)
    with ad.default_dtype(np.float64):
        pair = SwinBlockPair(16, 2, rng)
    g = grid(rng, 4, 4, 16)
    e = constant(rng.normal(size=(1, 16, 16)), dtype=np.float64)
    shifted = TokenGrid(ad.add(g.tokens, e), 4, 4)
    np.testing.assert_array_equal(swin_block_pair(g, pair, WindowSpec(2, 1), e).tokens.data,
                                  swin_block_pair(shifted, pair, WindowSpec(2, 1)).tokens.data)


def test_merging_and_expanding_shapes():
    rng = make_rng(11)
    g = grid(rng, 4, 4, 6)
    merged = PatchMerging(6, rng)(g)
    assert (merged.rows, merged.cols, merged.dim) == (2, 2, 12)
    expanded = PatchExpanding(6, rng)(g)
    assert (expanded.rows, expanded.cols, expanded.dim) == (8, 8, 3)
    # the rearrangement conserves rows * cols * dim of the 2*dim projection
    assert expanded.rows * expanded.cols * expanded.dim == 2 * g.rows * g.cols * g.dim
    with pytest.raises(ShapeError):
        patch_merging(grid(rng, 3, 4, 2), Affine(8, 4, rng))


def test_expand_then_merge_with_inverse_maps_is_identity():
    rng = make_rng(12)
    dim = 4
    with ad.default_dtype(np.float64):
        expand = Affine(dim, 2 * dim, rng)
        reduce = Affine(2 * dim, dim, rng)
    reduce.weight.data[...] = np.linalg.pinv(expand.weight.data)
    g = grid(rng, 2, 2, dim)
    back = patch_merging(patch_expanding(g, expand), reduce)
    assert (back.rows, back.cols) == (2, 2)
    np.testing.assert_allclose(back.tokens.data, g.tokens.data, atol=1e-12)


@pytest.mark.parametrize("c", [1, 2])
def test_unet_preserves_shape_and_zero_params_give_zero(c):
    rng = make_rng(13)
    net = SwinUnet(c, c, 16, UnetGeometry(mlp_ratio=2), rng)
    img = constant(rng.normal(size=(2, c, 16, 16)))
    assert net(img).shape == (2, c, 16, 16)
    net.zero_()
    np.testing.assert_array_equal(net(img).data, 0)


def test_input_gate_passes_scaled_input():
    rng = make_rng(14)
    net = SwinUnet(1, 1, 16, UnetGeometry(mlp_ratio=2), rng, input_gate=True)
    img = constant(rng.normal(size=(1, 1, 16, 16)))
    net.head.zero_()
    np.testing.assert_allclose(net(img).data, img.data, atol=1e-6)
    net.gate.data[...] = 0.25
    np.testing.assert_allclose(net(img).data, 0.25 * img.data, atol=1e-6)
    net.zero_()
    np.testing.assert_array_equal(net(img).data, 0)
    with pytest.raises(ShapeError):
        SwinUnet(2, 1, 16, UnetGeometry(), rng, input_gate=True)


def test_input_gate_gradient():
    rng = make_rng(15)
    with ad.default_dtype(np.float64):
        net = SwinUnet(1, 1, 16, UnetGeometry(mlp_ratio=2), rng, input_gate=True)
        img = constant(rng.normal(size=(1, 1, 16, 16)))
        with ad.GradientTape() as tape:
            out = ad.mean_all(net(img))
        (g,) = tape.backward(out, [net.gate])
        eps = 1e-6
        net.gate.data[...] += eps
        up = ad.mean_all(net(img)).item()
        net.gate.data[...] -= 2 * eps
        down = ad.mean_all(net(img)).item()
    assert g[0] == pytest.approx((up - down) / (2 * eps), rel=1e-6)
    assert g[0] == pytest.approx(img.data.mean(), rel=1e-9)


def test_unet_deterministic_for_a_seed():
    a = SwinUnet(2, 2, 16, UnetGeometry(mlp_ratio=2), make_rng(3))
    b = SwinUnet(2, 2, 16, UnetGeometry(mlp_ratio=2), make_rng(3))
    img = constant(make_rng(4).normal(size=(1, 2, 16, 16)))
    np.testing.assert_array_equal(a(img).data, b(img).data)


def test_geometry_heads_and_checks():
    geo = UnetGeometry()
    assert geo.heads(48) == 3 and geo.heads(96) == 6
    geo.check(64, 64)
    with pytest.raises(ShapeError):
        geo.check(20, 64)


def test_small_grids_clamp_to_one_window():
    assert WindowSpec.for_grid(2, 2, 4, shifted=True) == WindowSpec(2, 0)
    assert WindowSpec.for_grid(8, 8, 4, shifted=True) == WindowSpec(4, 2)
