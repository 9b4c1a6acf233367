import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from transablate import blocks as B
from transablate import tensor as T
from transablate.blocks import BlockParams, TokenGrid
from transablate.errors import ConfigError, ShapeError
from transablate.tensor import grad_check


def make(kind, shapes, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    p = BlockParams.init(kind, shapes, rng, np.float64)
    if scale is not None:
        for t in p.parameters():
            t.data[...] = rng.normal(0.0, scale, size=t.shape)
    return p


# ---------------------------------------------------------------- numpy oracles


def np_ln(x, g, b, eps=T.LN_EPS):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def np_attention(x, heads, p, allowed=None):
    """Dense multi-head attention on ``[N, d]``; ``allowed[i, j]`` restricts pairs."""
    N, d = x.shape
    dh = d // heads
    qkv = x @ p["qkv_w"] + p["qkv_b"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    out = np.zeros((N, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if allowed is not None:
            logits = np.where(allowed, logits, -np.inf)
        a = np.exp(logits - logits.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    return out @ p["proj_w"] + p["proj_b"]


def np_block(x, heads, p, allowed=None):
    x = x + np_attention(np_ln(x, p["ln1_g"], p["ln1_b"]), heads, p, allowed)
    h = np_gelu(np_ln(x, p["ln2_g"], p["ln2_b"]) @ p["fc1_w"] + p["fc1_b"])
    return x + h @ p["fc2_w"] + p["fc2_b"]


def arrays(p):
    return {k: t.data for k, t in p.tensors.items()}


def swin_allowed(spatial, window, shift):
    """Pairs that share a shifted window and the same wrap-around region."""
    coords = list(itertools.product(*[range(s) for s in spatial]))

    def key(c):
        win, reg = [], []
        for v, S, w, s in zip(c, spatial, window, shift):
            u = (v - s) % S
            win.append(u // w)
            reg.append(0 if not s or u < S - w else (1 if u < S - s else 2))
        return tuple(win), tuple(reg)

    keys = [key(c) for c in coords]
    return np.array([[a == b for b in keys] for a in keys])


# ---------------------------------------------------------------- patch embed


def test_patch_embed_paper_token_count():
    x = T.tensor(np.zeros((1, 128, 128, 128), dtype=np.float32))
    p = BlockParams.init("ViTTokenizer", B.patch_embed_shapes(1, 768, (16,) * 3), np.random.default_rng(0), np.float32)
    tg = B.patch_embed(x, 16, 768, p)
    assert tg.n_tokens == 512 and tg.grid == (8, 8, 8) and tg.dim == 768


def test_patch_embed_single_patch():
    p = make("ViTTokenizer", B.patch_embed_shapes(1, 8, (4, 4)))
    tg = B.patch_embed(T.tensor(np.ones((1, 4, 4))), 4, 8, p)
    assert tg.tokens.shape == (1, 8)


def test_patch_embed_constant_patch_is_linear_map():
    c, patch, d = 2, 2, 8
    p = make("ViTTokenizer", B.patch_embed_shapes(c, d, (patch, patch)), scale=1.0)
    x = np.full((c, 4, 4), 0.7)
    tg = B.patch_embed(T.tensor(x), patch, d, p)
    vec = np.full(c * patch * patch, 0.7)
    expected = vec @ p["weight"].data + p["bias"].data
    np.testing.assert_allclose(tg.tokens.data, np.tile(expected, (4, 1)), atol=1e-12)


def test_patch_embed_flatten_order_matches_conv_kernel():
    rng = np.random.default_rng(1)
    c, d, patch = 3, 5, 2
    p = make("ViTTokenizer", B.patch_embed_shapes(c, d, (patch, patch)), scale=1.0)
    x = rng.normal(size=(c, 4, 6))
    tg = B.patch_embed(T.tensor(x), patch, d, p)
    kernel = p["weight"].data.T.reshape(d, c, patch, patch)
    conv = T.conv_nd(T.tensor(x), T.tensor(kernel), T.tensor(p["bias"].data), stride=patch, padding=0).data
    np.testing.assert_allclose(tg.to_map().data, conv, atol=1e-12)


def test_patch_embed_with_position_and_errors():
    p = make("ViTTokenizer", B.patch_embed_shapes(1, 4, (2, 2), n_tokens=4), scale=1.0)
    x = np.zeros((1, 4, 4))
    tg = B.patch_embed(T.tensor(x), 2, 4, p)
    np.testing.assert_allclose(tg.tokens.data, p["bias"].data + p["pos"].data)
    with pytest.raises(ShapeError):
        B.patch_embed(T.tensor(np.zeros((1, 5, 4))), 2, 4, p)


def test_token_grid_invariant():
    with pytest.raises(ShapeError):
        TokenGrid(T.tensor(np.zeros((5, 4))), (2, 2), (1, 1))


# ---------------------------------------------------------------- mhsa


def test_mhsa_single_token_is_value_then_projection():
    d = 4
    p = make("mhsa", B.mhsa_shapes(d), scale=1.0)
    x = np.random.default_rng(2).normal(size=(1, d))
    out = B.mhsa(TokenGrid(T.tensor(x), (1,), (1,)), 2, p).tokens.data
    v = x @ p["qkv_w"].data[:, 2 * d:] + p["qkv_b"].data[2 * d:]
    np.testing.assert_allclose(out, v @ p["proj_w"].data + p["proj_b"].data, atol=1e-12)


def test_mhsa_zero_value_projection_gives_bias():
    d = 4
    p = make("mhsa", B.mhsa_shapes(d), scale=1.0)
    p["qkv_w"].data[:, 2 * d:] = 0
    p["qkv_b"].data[2 * d:] = 0
    x = np.random.default_rng(3).normal(size=(5, d))
    out = B.mhsa(TokenGrid(T.tensor(x), (5,), (1,)), 2, p).tokens.data
    np.testing.assert_allclose(out, np.tile(p["proj_b"].data, (5, 1)), atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
def test_mhsa_matches_dense_formula(heads):
    p = make("mhsa", B.mhsa_shapes(4), scale=1.0, seed=heads)
    x = np.random.default_rng(4).normal(size=(3, 4))
    out = B.mhsa(TokenGrid(T.tensor(x), (3,), (1,)), heads, p).tokens.data
    np.testing.assert_allclose(out, np_attention(x, heads, arrays(p)), rtol=0, atol=1e-12)


def test_mhsa_head_split_error():
    p = make("mhsa", B.mhsa_shapes(6))
    with pytest.raises(ConfigError):
        B.mhsa(TokenGrid(T.tensor(np.zeros((2, 6))), (2,), (1,)), 4, p)


def test_mhsa_permutation_equivariant():
    rng = np.random.default_rng(5)
    p = make("mhsa", B.mhsa_shapes(8), scale=0.5)
    x = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    a = B.mhsa(TokenGrid(T.tensor(x), (7,), (1,)), 2, p).tokens.data
    b = B.mhsa(TokenGrid(T.tensor(x[perm]), (7,), (1,)), 2, p).tokens.data
    inv = np.argsort(perm)
    np.testing.assert_allclose(b[inv], a, atol=1e-10)


# ---------------------------------------------------------------- transformer block


def test_transformer_block_zero_residual_paths():
    p = make("vit", B.transformer_block_shapes(8, 4.0), scale=1.0)
    for name in ("proj_w", "proj_b", "fc2_w", "fc2_b"):
        p[name].data[...] = 0
    x = np.random.default_rng(6).normal(size=(4, 8))
    out = B.transformer_block(TokenGrid(T.tensor(x), (4,), (1,)), 2, 4.0, p).tokens.data
    np.testing.assert_array_equal(out, x)


def test_transformer_block_param_count():
    d = 768
    # 2 layer norms (2d each), qkv (d*3d + 3d), proj (d*d + d), fc1 (d*4d + 4d), fc2 (4d*d + d)
    expected = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 2 * 2 * d
    assert expected == 7_087_872
    assert B.param_count(B.transformer_block_shapes(d, 4.0)) == expected


def test_transformer_block_matches_dense_and_grad():
    p = make("vit", B.transformer_block_shapes(8, 2.0), scale=0.5)
    x = np.random.default_rng(7).normal(size=(4, 8))
    out = B.transformer_block(TokenGrid(T.tensor(x), (4,), (1,)), 2, 2.0, p).tokens.data
    np.testing.assert_allclose(out, np_block(x, 2, arrays(p)), atol=1e-10)
    xt = T.tensor(x, requires_grad=True)
    w = np.random.default_rng(8).normal(size=(4, 8))

    def f(x, *ps):
        return T.tsum(B.transformer_block(TokenGrid(x, (4,), (1,)), 2, 2.0, p).tokens * w)

    assert grad_check(f, [xt] + p.parameters(), max_coords=40) < 1e-5


def test_vit_encoder_returns_every_depth():
    p = make("vit", B.vit_encoder_shapes(4, 3, 2.0), scale=0.3)
    x = T.tensor(np.random.default_rng(9).normal(size=(4, 2, 2)))
    outs = B.vit_encoder(x, 3, 2, 2.0, p)
    assert len(outs) == 3 and all(o.shape == (4, 2, 2) for o in outs)
    tokens = x.data.reshape(4, -1).T
    for i in range(3):
        tokens = np_block(tokens, 2, {k[len(f"blocks.{i}."):]: v for k, v in arrays(p).items() if k.startswith(f"blocks.{i}.")})
        np.testing.assert_allclose(outs[i].data.reshape(4, -1).T, tokens, atol=1e-10)


# ---------------------------------------------------------------- swin


def swin_case(c=4, size=(4, 4), seed=10):
    rng = np.random.default_rng(seed)
    p = make("swin", B.swin_block_shapes(c, 2.0), scale=0.5, seed=seed)
    x = rng.normal(size=(c,) + size)
    return p, x


def test_swin_full_window_equals_global_attention():
    p, x = swin_case()
    out = B.swin_block(T.tensor(x), 4, 0, 2, p).data
    tokens = x.reshape(4, -1).T
    ref = np_block(tokens, 2, arrays(p)).T.reshape(x.shape)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)
    tg = B.transformer_block(TokenGrid(T.tensor(tokens), (4, 4), (1, 1)), 2, 2.0, p)
    np.testing.assert_allclose(out, tg.to_map().data, rtol=0, atol=1e-10)


@pytest.mark.parametrize("size,window,shift", [((4, 4), 2, 0), ((4, 4), 2, 1), ((8, 4), 4, 2), ((4, 4, 4), 2, 1)])
def test_swin_matches_masked_global_oracle(size, window, shift):
    p, x = swin_case(size=size)
    dim = len(size)
    out = B.swin_block(T.tensor(x), window, shift, 2, p).data
    allowed = swin_allowed(size, (window,) * dim, (shift,) * dim)
    tokens = x.reshape(4, -1).T
    ref = np_block(tokens, 2, arrays(p), allowed).T.reshape(x.shape)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_swin_locality():
    p, x = swin_case()
    base = B.swin_block(T.tensor(x), 2, 0, 2, p).data
    y = x.copy()
    y[:, :2, :2] = 0.0
    out = B.swin_block(T.tensor(y), 2, 0, 2, p).data
    changed = np.any(out != base, axis=0)
    assert changed[:2, :2].all()
    assert not changed[2:, :].any() and not changed[:, 2:].any()


def test_cyclic_shift_round_trip():
    x = T.tensor(np.random.default_rng(11).normal(size=(2, 4, 4)))
    back = T.roll(T.roll(x, [-1, -1], (1, 2)), [1, 1], (1, 2))
    np.testing.assert_array_equal(back.data, x.data)


def test_swin_errors():
    p, x = swin_case()
    with pytest.raises(ShapeError):
        B.swin_block(T.tensor(np.zeros((4, 6, 6))), 4, 0, 2, p)
    with pytest.raises(ConfigError):
        B.swin_block(T.tensor(x), 2, 3, 2, p)


def test_effective_window_clamps():
    assert B.effective_window((4, 4, 4), 7, 3) == ((4, 4, 4), (0, 0, 0))
    assert B.effective_window((8, 2), 4, 2) == ((4, 2), (2, 0))


def test_swin_stage_alternates_shift_and_grad():
    p = make("swin", B.swin_stage_shapes(4, 2, 2.0), scale=0.4)
    x = T.tensor(np.random.default_rng(12).normal(size=(4, 4, 4)), requires_grad=True)
    out = B.swin_stage(x, 2, 2, 2, p)
    manual = B.swin_block(x, 2, 0, 2, B._sub(p, "blocks.0."))
    manual = B.swin_block(manual, 2, 1, 2, B._sub(p, "blocks.1."))
    np.testing.assert_allclose(out.data, manual.data, atol=1e-12)
    w = np.random.default_rng(13).normal(size=(4, 4, 4))
    assert grad_check(lambda x, *ps: T.tsum(B.swin_stage(x, 2, 2, 2, p) * w), [x] + p.parameters(), max_coords=25) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(1, 2), st.sampled_from([(4, 4), (8, 4), (4, 4, 4)]), st.booleans())
def test_swin_and_transformer_preserve_shape(c_half, heads, size, shifted):
    c = 2 * c_half
    window = 2
    p = make("swin", B.swin_block_shapes(c, 2.0))
    x = T.tensor(np.random.default_rng(0).normal(size=(c,) + size))
    assert B.swin_block(x, window, 1 if shifted else 0, heads, p).shape == x.shape
    n = int(np.prod(size))
    tg = TokenGrid(T.tensor(np.ones((n, c))), size, (1,) * len(size))
    assert B.transformer_block(tg, heads, 2.0, p).tokens.shape == (n, c)


# ---------------------------------------------------------------- patch merging


def test_patch_merging_param_counts():
    s = B.patch_merging_shapes(48, 3)
    assert s["proj_w"] == (384, 96) and 8 * 48 * 96 == 36_864
    assert B.param_count(s) == 36_864 + 2 * 8 * 48


def test_patch_merging_2d_shape():
    p = make("pm", B.patch_merging_shapes(3, 2))
    assert B.patch_merging(T.tensor(np.ones((3, 4, 4))), p).shape == (6, 2, 2)
    with pytest.raises(ShapeError):
        B.patch_merging(T.tensor(np.ones((3, 5, 4))), p)


def test_patch_merging_matches_dense_oracle():
    rng = np.random.default_rng(14)
    c = 2
    p = make("pm", B.patch_merging_shapes(c, 2), scale=1.0)
    x = rng.normal(size=(c, 4, 4))
    out = B.patch_merging(T.tensor(x), p).data
    ref = np.zeros((2 * c, 2, 2))
    for i, j in itertools.product(range(2), range(2)):
        vec = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)  # (C, p1, p2) order
        ref[:, i, j] = np_ln(vec, p["norm_g"].data, p["norm_b"].data) @ p["proj_w"].data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_patch_merging_constant_input_identity_block():
    c = 2
    p = make("pm", B.patch_merging_shapes(c, 2))
    p["norm_b"].data[:] = np.arange(4 * c) * 0.1
    p["proj_w"].data[:] = np.eye(4 * c)[:, : 2 * c]
    out = B.patch_merging(T.tensor(np.full((c, 4, 4), 3.0)), p).data
    # constant patch vector normalizes to 0, leaving the norm bias
    expected = p["norm_b"].data[: 2 * c]
    np.testing.assert_allclose(out, np.broadcast_to(expected[:, None, None], out.shape), atol=1e-12)


def test_patch_merging_grad():
    p = make("pm", B.patch_merging_shapes(2, 3), scale=0.5)
    x = T.tensor(np.random.default_rng(15).normal(size=(2, 2, 4, 2)), requires_grad=True)
    w = np.random.default_rng(16).normal(size=(4, 1, 2, 1))
    assert grad_check(lambda x, *ps: T.tsum(B.patch_merging(x, p) * w), [x] + p.parameters(), max_coords=30) < 1e-4


# ---------------------------------------------------------------- conv blocks


def test_conv_block_param_count():
    # by the shape rule: (1*8*27 + 8) + (8*8*27 + 8) + 2 norms * (8 gain + 8 bias)
    assert B.param_count(B.conv_block_shapes(1, 8, 3)) == 224 + 1736 + 32 == 1_992


def test_conv_block_preserves_extent_and_stride():
    p = make("conv", B.conv_block_shapes(2, 3, 3))
    x = T.tensor(np.random.default_rng(17).normal(size=(2, 4, 4, 4)))
    assert B.conv_block(x, 3, p).shape == (3, 4, 4, 4)
    assert B.conv_block(x, 3, p, stride=2).shape == (3, 2, 2, 2)
    with pytest.raises(ShapeError):
        B.conv_block(x, 5, p)


def test_conv_block_grad():
    p = make("conv", B.conv_block_shapes(2, 3, 2), scale=0.5)
    x = T.tensor(np.random.default_rng(18).normal(size=(2, 4, 4)), requires_grad=True)
    w = np.random.default_rng(19).normal(size=(3, 4, 4))
    assert grad_check(lambda x, *ps: T.tsum(B.conv_block(x, 3, p) * w), [x] + p.parameters(), max_coords=30) < 1e-4


def test_decoder_block_shapes_and_grad():
    p = make("dec", B.decoder_block_shapes(8, 4, 8, 3), scale=0.3)
    assert p["conv.conv1_w"].shape == (8, 12, 3, 3, 3)
    x = T.tensor(np.random.default_rng(20).normal(size=(8, 4, 4, 4)))
    skip = T.tensor(np.random.default_rng(21).normal(size=(4, 8, 8, 8)))
    assert B.upsample(x, p).shape == (8, 8, 8, 8)
    assert B.decoder_block(x, skip, p).shape == (8, 8, 8, 8)
    with pytest.raises(ShapeError):
        B.decoder_block(x, T.tensor(np.zeros((4, 4, 4, 4))), p)

    p2 = make("dec", B.decoder_block_shapes(2, 1, 2, 2), scale=0.5)
    xs = T.tensor(np.random.default_rng(22).normal(size=(2, 2, 2)), requires_grad=True)
    sk = T.tensor(np.random.default_rng(23).normal(size=(1, 4, 4)), requires_grad=True)
    w = np.random.default_rng(24).normal(size=(2, 4, 4))
    err = grad_check(lambda a, b, *ps: T.tsum(B.decoder_block(a, b, p2) * w), [xs, sk] + p2.parameters(), max_coords=20)
    assert err < 1e-4


def test_linear_projection_fusion_head_grads():
    rng = np.random.default_rng(25)
    lp = make("lin", B.linear_projection_shapes(2, 3, (2, 2)), scale=0.5)
    fu = make("fuse", B.fusion_shapes([2, 3], 2, 2, kernel=3), scale=0.5)
    hd = make("head", B.seg_head_shapes(2, 2, 2), scale=0.5)
    x = T.tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w = rng.normal(size=(2, 2, 2))

    def f(x, *ps):
        a = B.linear_projection(x, 2, lp)
        h = B.fusion([T.getitem(x, (slice(None), slice(0, 2), slice(0, 2))), a], fu)
        return T.tsum(B.seg_head(h, hd) * w)

    assert grad_check(f, [x] + lp.parameters() + fu.parameters() + hd.parameters(), max_coords=20) < 1e-4


def test_vit_encoder_grad():
    p = make("vit", B.vit_encoder_shapes(4, 1, 2.0), scale=0.5)
    x = T.tensor(np.random.default_rng(26).normal(size=(4, 2, 2)), requires_grad=True)
    w = np.random.default_rng(27).normal(size=(4, 2, 2))
    assert grad_check(lambda x, *ps: T.tsum(B.vit_encoder(x, 1, 2, 2.0, p)[-1] * w), [x] + p.parameters(), max_coords=30) < 1e-4


# ---------------------------------------------------------------- params


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.sampled_from([2, 3]), st.sampled_from([1, 2, 4]))
def test_param_count_matches_formula(c_in, c_out, dim, patch):
    assert B.param_count(B.conv_block_shapes(c_in, c_out, dim)) == c_out * c_in * 3**dim + c_out * 3**dim * c_out + 6 * c_out
    assert B.param_count(B.linear_projection_shapes(c_in, c_out, (patch,) * dim)) == c_in * patch**dim * c_out + c_out
    assert B.param_count(B.upsample_shapes(c_in, c_out, dim)) == c_in * c_out * 2**dim + c_out
    assert B.param_count(B.patch_merging_shapes(c_in, dim)) == 2**dim * c_in * 2 * c_in + 2 * 2**dim * c_in
    d = 4 * c_in
    assert B.param_count(B.transformer_block_shapes(d, 4.0)) == 12 * d * d + 13 * d
    p = BlockParams.init("conv", B.conv_block_shapes(c_in, c_out, dim), np.random.default_rng(0))
    assert p.param_count == B.param_count(B.conv_block_shapes(c_in, c_out, dim))


def test_block_params_check_names_parameter():
    p = make("conv", B.conv_block_shapes(1, 2, 2))
    with pytest.raises(ShapeError, match="conv1_w"):
        p.check(B.conv_block_shapes(2, 2, 2), "c1")
    with pytest.raises(ShapeError, match="missing"):
        p.check({**B.conv_block_shapes(1, 2, 2), "extra": (1,)}, "c1")
