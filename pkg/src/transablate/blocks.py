"""Architecture blocks and their parameter shape rules.

Every block takes channel-first feature maps ``[C, S...]`` or batched
``[B, C, S...]``. Token sequences are feature maps viewed channels-last and
flattened over the spatial grid.

Each block has a ``*_shapes`` function returning ``{name: shape}``; that
function is the single source of truth for both static parameter counting
and runtime parameter checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

Shapes = dict[str, tuple[int, ...]]

LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------- params


@dataclass
class BlockParams:
    kind: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def check(self, expected: Mapping[str, tuple[int, ...]], owner: str | None = None) -> None:
        """Raise ShapeError naming the first parameter that deviates from ``expected``."""
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            name = sorted(missing or extra)[0]
            what = "missing" if missing else "unexpected"
            raise ShapeError(f"{what} parameter {name!r} for {self.kind}", owner)
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if tuple(got) != tuple(shape):
                raise ShapeError(f"parameter {name!r} has shape {got}, expected {tuple(shape)}", owner)

    @classmethod
    def init(cls, kind: str, shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator, dtype=np.float64) -> BlockParams:
        tensors = {}
        for name, shape in shapes.items():
            tensors[name] = Tensor(_init_array(name, shape, rng).astype(dtype), requires_grad=True)
        return cls(kind, tensors)


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("_g"):
        return np.ones(shape)
    if leaf.endswith("_b") or leaf == "bias":
        return np.zeros(shape)
    if leaf == "pos":
        return rng.normal(0.0, 0.02, size=shape)
    if len(shape) > 2:
        # conv kernels [out, in, k...]; transposed kernels [in, out, k...]
        fan_in = shape[0 if leaf == "up_w" else 1] * int(np.prod(shape[2:]))
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


def param_count(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return sum(int(np.prod(s)) for s in shapes.values())


def _prefixed(prefix: str, shapes: Shapes) -> Shapes:
    return {f"{prefix}{k}": v for k, v in shapes.items()}


def _sub(params: BlockParams, prefix: str) -> BlockParams:
    n = len(prefix)
    return BlockParams(params.kind, {k[n:]: v for k, v in params.tensors.items() if k.startswith(prefix)})


def _tuple(v: int | Sequence[int], dim: int) -> tuple[int, ...]:
    return (int(v),) * dim if isinstance(v, (int, np.integer)) else tuple(int(i) for i in v)


def _batch(x: Tensor, dim: int | None = None) -> tuple[Tensor, bool]:
    """Add a batch axis to ``[C, S...]``.

    ``dim`` is the spatial rank; when omitted the input is a single sample.
    """
    if dim is None:
        dim = x.ndim - 1
    if x.ndim == dim + 1:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeezed: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeezed else x


# ---------------------------------------------------------------- token layout


def to_tokens(x: Tensor) -> Tensor:
    """``[B, C, S...]`` -> ``[B, N, C]``."""
    B, C = x.shape[:2]
    perm = (0,) + tuple(range(2, x.ndim)) + (1,)
    return T.reshape(T.transpose(x, perm), (B, -1, C))


def from_tokens(t: Tensor, grid: Sequence[int]) -> Tensor:
    """``[B, N, C]`` -> ``[B, C, grid...]``."""
    B, N, C = t.shape
    grid = tuple(grid)
    if int(np.prod(grid)) != N:
        raise ShapeError(f"grid {grid} does not hold {N} tokens")
    x = T.reshape(t, (B,) + grid + (C,))
    return T.transpose(x, (0, len(grid) + 1) + tuple(range(1, len(grid) + 1)))


def patchify(x: Tensor, patch: Sequence[int]) -> Tensor:
    """``[B, C, S...]`` -> ``[B, g..., C * prod(patch)]`` over non-overlapping patches.

    Patch vectors are flattened in ``(C, p1, .., pn)`` order, matching a
    ``[d, C, p...]`` convolution kernel layout.
    """
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    dim = len(spatial)
    patch = _tuple(patch, dim)
    for s, p in zip(spatial, patch):
        if p < 1 or s % p:
            raise ShapeError(f"spatial extent {tuple(spatial)} not divisible by patch {patch}")
    grid = tuple(s // p for s, p in zip(spatial, patch))
    split = (B, C) + tuple(v for g, p in zip(grid, patch) for v in (g, p))
    y = T.reshape(x, split)
    perm = (0,) + tuple(2 + 2 * i for i in range(dim)) + (1,) + tuple(3 + 2 * i for i in range(dim))
    y = T.transpose(y, perm)
    return T.reshape(y, (B,) + grid + (C * int(np.prod(patch)),))


@dataclass
class TokenGrid:
    tokens: Tensor  # [N, d] or [B, N, d]
    grid: tuple[int, ...]
    patch_size: tuple[int, ...]

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if int(np.prod(self.grid)) != n:
            raise ShapeError(f"grid {self.grid} has {int(np.prod(self.grid))} cells, tokens carry {n}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def to_map(self) -> Tensor:
        t = self.tokens
        squeeze = t.ndim == 2
        if squeeze:
            t = T.reshape(t, (1,) + t.shape)
        return _unbatch(from_tokens(t, self.grid), squeeze)

    def with_tokens(self, tokens: Tensor) -> TokenGrid:
        return TokenGrid(tokens, self.grid, self.patch_size)


# ---------------------------------------------------------------- linear projection / patch embedding


def linear_projection_shapes(c_in: int, c_out: int, patch: Sequence[int]) -> Shapes:
    k = c_in * int(np.prod(patch))
    return {"weight": (k, c_out), "bias": (c_out,)}


def patch_embed_shapes(c_in: int, d: int, patch: Sequence[int], n_tokens: int | None = None) -> Shapes:
    shapes = linear_projection_shapes(c_in, d, patch)
    if n_tokens is not None:
        shapes["pos"] = (n_tokens, d)
    return shapes


def linear_projection(x: Tensor, patch: int | Sequence[int], params: BlockParams, dim: int | None = None) -> Tensor:
    """Per-patch linear map ``[B, C, S...] -> [B, d, S/patch...]`` (patch 1 is a 1x1 conv)."""
    xb, sq = _batch(x, dim)
    dim = xb.ndim - 2
    p = _tuple(patch, dim)
    cols = patchify(xb, p)
    out = T.linear(cols, params["weight"], params["bias"])
    perm = (0, dim + 1) + tuple(range(1, dim + 1))
    return _unbatch(T.transpose(out, perm), sq)


def patch_embed(x: Tensor, patch: int | Sequence[int], d: int, params: BlockParams, dim: int | None = None) -> TokenGrid:
    """Tokenize non-overlapping patches with a learned linear map.

    Adds ``params['pos']`` when present; the compensatory tokenizer omits it.
    """
    xb, sq = _batch(x, dim)
    dim = xb.ndim - 2
    p = _tuple(patch, dim)
    if params["weight"].shape[1] != d:
        raise ShapeError(f"projection width {params['weight'].shape[1]} != d={d}")
    cols = patchify(xb, p)
    grid = cols.shape[1:-1]
    tokens = T.linear(T.reshape(cols, (cols.shape[0], -1, cols.shape[-1])), params["weight"], params["bias"])
    if "pos" in params:
        tokens = T.add(tokens, params["pos"])
    if sq:
        tokens = T.reshape(tokens, tokens.shape[1:])
    return TokenGrid(tokens, tuple(grid), p)


# ---------------------------------------------------------------- attention


def mhsa_shapes(d: int) -> Shapes:
    return {"qkv_w": (d, 3 * d), "qkv_b": (3 * d,), "proj_w": (d, d), "proj_b": (d,)}


def attention(x: Tensor, heads: int, params: BlockParams, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention on ``[M, N, d]``.

    Per head: ``softmax(Q K^T / sqrt(d/heads) + mask) V``; heads are
    concatenated and output-projected. ``mask`` broadcasts against
    ``[M, heads, N, N]``.
    """
    M, N, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qkv = T.linear(x, params["qkv_w"], params["qkv_b"])

    def split(i):
        part = T.getitem(qkv, (Ellipsis, slice(i * d, (i + 1) * d)))
        return T.transpose(T.reshape(part, (M, N, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(0), split(1), split(2)
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        logits = T.add(logits, Tensor(mask.astype(logits.dtype)))
    att = T.softmax(logits, axis=-1)
    out = T.matmul(att, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (M, N, d))
    return T.linear(out, params["proj_w"], params["proj_b"])


def mhsa(t: TokenGrid, heads: int, params: BlockParams) -> TokenGrid:
    tokens = t.tokens
    sq = tokens.ndim == 2
    if sq:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    out = attention(tokens, heads, params)
    return t.with_tokens(T.reshape(out, out.shape[1:]) if sq else out)


# ---------------------------------------------------------------- transformer block


def mlp_hidden(d: int, mlp_ratio: float) -> int:
    return int(round(mlp_ratio * d))


def transformer_block_shapes(d: int, mlp_ratio: float) -> Shapes:
    h = mlp_hidden(d, mlp_ratio)
    shapes = {"ln1_g": (d,), "ln1_b": (d,)}
    shapes.update(mhsa_shapes(d))
    shapes.update({"ln2_g": (d,), "ln2_b": (d,), "fc1_w": (d, h), "fc1_b": (h,), "fc2_w": (h, d), "fc2_b": (d,)})
    return shapes


def _mlp(x: Tensor, params: BlockParams) -> Tensor:
    h = T.gelu(T.linear(x, params["fc1_w"], params["fc1_b"]))
    return T.linear(h, params["fc2_w"], params["fc2_b"])


def _pre_norm_block(x: Tensor, heads: int, params: BlockParams, attend) -> Tensor:
    h = attend(T.layer_norm(x, params["ln1_g"], params["ln1_b"]), heads, params)
    x = T.add(x, h)
    return T.add(x, _mlp(T.layer_norm(x, params["ln2_g"], params["ln2_b"]), params))


def transformer_block(t: TokenGrid, heads: int, mlp_ratio: float, params: BlockParams) -> TokenGrid:
    """Pre-norm ViT block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(x))`` with GELU."""
    tokens = t.tokens
    sq = tokens.ndim == 2
    if sq:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    if params["fc1_w"].shape[1] != mlp_hidden(tokens.shape[-1], mlp_ratio):
        raise ConfigError("MLP hidden width does not match mlp_ratio")
    out = _pre_norm_block(tokens, heads, params, attention)
    return t.with_tokens(T.reshape(out, out.shape[1:]) if sq else out)


def vit_encoder_shapes(d: int, depth: int, mlp_ratio: float) -> Shapes:
    shapes: Shapes = {}
    for i in range(depth):
        shapes.update(_prefixed(f"blocks.{i}.", transformer_block_shapes(d, mlp_ratio)))
    return shapes


def vit_encoder(x: Tensor, depth: int, heads: int, mlp_ratio: float, params: BlockParams, dim: int | None = None) -> list[Tensor]:
    """Stack of transformer blocks on a token map ``[B, d, grid...]``.

    Returns the map after every block (index ``i`` is after block ``i+1``).
    """
    xb, sq = _batch(x, dim)
    grid = xb.shape[2:]
    tokens = to_tokens(xb)
    outs = []
    for i in range(depth):
        tokens = _pre_norm_block(tokens, heads, _sub(params, f"blocks.{i}."), attention)
        outs.append(_unbatch(from_tokens(tokens, grid), sq))
    return outs


# ---------------------------------------------------------------- swin


def effective_window(extent: Sequence[int], window: int | Sequence[int], shift: int | Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Clamp window to extent; no shift on axes the window already covers."""
    dim = len(extent)
    w = tuple(min(a, b) for a, b in zip(_tuple(window, dim), extent))
    s = tuple(0 if wi >= e else si for wi, e, si in zip(w, extent, _tuple(shift, dim)))
    return w, s


def _window_partition(x: Tensor, window: tuple[int, ...]) -> Tensor:
    """``[B, S..., C]`` -> ``[B * nW, prod(window), C]``."""
    B = x.shape[0]
    C = x.shape[-1]
    spatial = x.shape[1:-1]
    dim = len(spatial)
    nwin = tuple(s // w for s, w in zip(spatial, window))
    split = (B,) + tuple(v for n, w in zip(nwin, window) for v in (n, w)) + (C,)
    y = T.reshape(x, split)
    perm = (0,) + tuple(1 + 2 * i for i in range(dim)) + tuple(2 + 2 * i for i in range(dim)) + (2 * dim + 1,)
    y = T.transpose(y, perm)
    return T.reshape(y, (-1, int(np.prod(window)), C))


def _window_reverse(w: Tensor, window: tuple[int, ...], spatial: tuple[int, ...], B: int) -> Tensor:
    dim = len(spatial)
    C = w.shape[-1]
    nwin = tuple(s // k for s, k in zip(spatial, window))
    y = T.reshape(w, (B,) + nwin + window + (C,))
    perm = (0,) + tuple(v for i in range(dim) for v in (1 + i, 1 + dim + i)) + (2 * dim + 1,)
    y = T.transpose(y, perm)
    return T.reshape(y, (B,) + spatial + (C,))


def shift_mask(spatial: tuple[int, ...], window: tuple[int, ...], shift: tuple[int, ...]) -> np.ndarray | None:
    """Additive mask ``[nW, T, T]`` blocking attention across wrapped regions."""
    if not any(shift):
        return None
    region = np.zeros(spatial, dtype=np.int64)
    for ax, (s, w, sh) in enumerate(zip(spatial, window, shift)):
        ids = np.zeros(s, dtype=np.int64)
        if sh:
            ids[s - w : s - sh] = 1
            ids[s - sh :] = 2
        shape = [1] * len(spatial)
        shape[ax] = s
        region = region * 3 + ids.reshape(shape)
    r = Tensor(region[None, ..., None].astype(np.float64))
    part = _window_partition(r, window).data[..., 0]  # [nW, T]
    diff = part[:, :, None] != part[:, None, :]
    return np.where(diff, T.MASK_VALUE, 0.0)


def swin_block_shapes(c: int, mlp_ratio: float = 4.0) -> Shapes:
    return transformer_block_shapes(c, mlp_ratio)


def swin_block(
    x: Tensor,
    window: int | Sequence[int],
    shift: int | Sequence[int],
    heads: int,
    params: BlockParams,
    dim: int | None = None,
) -> Tensor:
    """(Shifted-)window attention block; shape preserving.

    Cyclically shifts by ``-shift``, attends within each window (masking
    pairs that wrapped around), and rolls back.
    """
    xb, sq = _batch(x, dim)
    B, C = xb.shape[:2]
    spatial = tuple(xb.shape[2:])
    dim = len(spatial)
    w = _tuple(window, dim)
    s = _tuple(shift, dim)
    for e, wi, si in zip(spatial, w, s):
        if wi < 1 or e % wi:
            raise ShapeError(f"spatial extent {spatial} not divisible by window {w}")
        if si not in (0, wi // 2):
            raise ConfigError(f"shift {s} must be 0 or window/2 for window {w}")
    axes = tuple(range(1, dim + 1))
    mask = shift_mask(spatial, w, s)
    if mask is not None:
        nw = mask.shape[0]
        mask = np.tile(mask[:, None], (B, 1, 1, 1)).reshape(B * nw, 1, mask.shape[1], mask.shape[2])

    def attend(h, heads_, p):
        if any(s):
            h = T.roll(h, [-v for v in s], axes)
        win = _window_partition(h, w)
        win = attention(win, heads_, p, mask)
        h = _window_reverse(win, w, spatial, B)
        if any(s):
            h = T.roll(h, list(s), axes)
        return h

    cl = T.transpose(xb, (0,) + tuple(range(2, dim + 2)) + (1,))
    out = _pre_norm_block(cl, heads, params, attend)
    out = T.transpose(out, (0, dim + 1) + tuple(range(1, dim + 1)))
    return _unbatch(out, sq)


def swin_stage_shapes(c: int, depth: int, mlp_ratio: float) -> Shapes:
    return vit_encoder_shapes(c, depth, mlp_ratio)


def swin_stage(x: Tensor, depth: int, window: int, heads: int, params: BlockParams, dim: int | None = None) -> Tensor:
    """``depth`` Swin blocks alternating shift 0 and window/2."""
    xb, sq = _batch(x, dim)
    spatial = tuple(xb.shape[2:])
    for i in range(depth):
        base_shift = 0 if i % 2 == 0 else window // 2
        w, s = effective_window(spatial, window, base_shift)
        xb = swin_block(xb, w, s, heads, _sub(params, f"blocks.{i}."), dim=len(spatial))
    return _unbatch(xb, sq)


# ---------------------------------------------------------------- patch merging


def patch_merging_shapes(c: int, dim: int) -> Shapes:
    m = (2**dim) * c
    return {"norm_g": (m,), "norm_b": (m,), "proj_w": (m, 2 * c)}


def patch_merging(x: Tensor, params: BlockParams, dim: int | None = None) -> Tensor:
    """Concatenate each 2x..x2 neighborhood, layer-normalize, project to 2C (no bias)."""
    xb, sq = _batch(x, dim)
    dim = xb.ndim - 2
    if any(s % 2 for s in xb.shape[2:]):
        raise ShapeError(f"patch merging needs even extents, got {tuple(xb.shape[2:])}")
    cols = patchify(xb, (2,) * dim)
    h = T.layer_norm(cols, params["norm_g"], params["norm_b"])
    h = T.matmul(h, params["proj_w"])
    out = T.transpose(h, (0, dim + 1) + tuple(range(1, dim + 1)))
    return _unbatch(out, sq)


# ---------------------------------------------------------------- convolutional blocks


def conv_block_shapes(c_in: int, c_out: int, dim: int, kernel: int = 3) -> Shapes:
    k = (kernel,) * dim
    return {
        "conv1_w": (c_out, c_in) + k,
        "conv1_b": (c_out,),
        "norm1_g": (c_out,),
        "norm1_b": (c_out,),
        "conv2_w": (c_out, c_out) + k,
        "conv2_b": (c_out,),
        "norm2_g": (c_out,),
        "norm2_b": (c_out,),
    }


def conv_block(x: Tensor, c_out: int, params: BlockParams, stride: int = 1) -> Tensor:
    """Two (conv, instance norm, leaky ReLU) stages; the first conv carries ``stride``."""
    w1 = params["conv1_w"]
    if w1.shape[0] != c_out:
        raise ShapeError(f"conv_block built for {w1.shape[0]} outputs, asked for {c_out}")
    xb, sq = _batch(x, w1.ndim - 2)
    pad = w1.shape[2] // 2
    h = T.conv_nd(xb, w1, params["conv1_b"], stride=stride, padding=pad)
    h = T.leaky_relu(T.instance_norm(h, params["norm1_g"], params["norm1_b"]), LEAKY_SLOPE)
    h = T.conv_nd(h, params["conv2_w"], params["conv2_b"], stride=1, padding=pad)
    h = T.leaky_relu(T.instance_norm(h, params["norm2_g"], params["norm2_b"]), LEAKY_SLOPE)
    return _unbatch(h, sq)


def upsample_shapes(c_in: int, c_out: int, dim: int) -> Shapes:
    return {"up_w": (c_in, c_out) + (2,) * dim, "up_b": (c_out,)}


def upsample(x: Tensor, params: BlockParams) -> Tensor:
    """Transposed convolution, kernel 2 stride 2."""
    w = params["up_w"]
    xb, sq = _batch(x, w.ndim - 2)
    return _unbatch(T.conv_transpose_nd(xb, w, params["up_b"]), sq)


def decoder_block_shapes(c_in: int, c_skip: int, c_out: int, dim: int) -> Shapes:
    shapes = upsample_shapes(c_in, c_out, dim)
    shapes.update(_prefixed("conv.", conv_block_shapes(c_out + c_skip, c_out, dim)))
    return shapes


def decoder_block(x: Tensor, skip: Tensor, params: BlockParams) -> Tensor:
    """Upsample x2 by transposed conv, concatenate ``skip``, then a conv block."""
    dim = params["up_w"].ndim - 2
    xb, sq = _batch(x, dim)
    sb, _ = _batch(skip, dim)
    up = upsample(xb, params)
    if up.shape[2:] != sb.shape[2:] or up.shape[0] != sb.shape[0]:
        raise ShapeError(f"skip shape {skip.shape} does not match upsampled {up.shape}")
    cat = T.concat([up, sb], axis=1)
    out = conv_block(cat, params["up_w"].shape[1], _sub(params, "conv."))
    return _unbatch(out, sq)


def fusion_shapes(c_ins: Sequence[int], c_out: int, dim: int, kernel: int = 1) -> Shapes:
    return {"fuse_w": (c_out, sum(c_ins)) + (kernel,) * dim, "fuse_b": (c_out,)}


def fusion(xs: Sequence[Tensor], params: BlockParams) -> Tensor:
    """Concatenate branches on channels, conv, leaky ReLU."""
    w = params["fuse_w"]
    dim = w.ndim - 2
    batched = [_batch(x, dim) for x in xs]
    sq = batched[0][1]
    cat = T.concat([b for b, _ in batched], axis=1)
    h = T.conv_nd(cat, w, params["fuse_b"], padding=w.shape[2] // 2)
    return _unbatch(T.leaky_relu(h, LEAKY_SLOPE), sq)


def seg_head_shapes(c_in: int, c_out: int, dim: int) -> Shapes:
    return {"head_w": (c_out, c_in) + (1,) * dim, "head_b": (c_out,)}


def seg_head(x: Tensor, params: BlockParams) -> Tensor:
    w = params["head_w"]
    xb, sq = _batch(x, w.ndim - 2)
    return _unbatch(T.conv_nd(xb, w, params["head_b"]), sq)
