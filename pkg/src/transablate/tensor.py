"""Dense tensors with reverse-mode automatic differentiation.

Each op builds a node holding its output array, its parent tensors, and a
closure mapping the output gradient to per-parent gradients. ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError, UsageError

LN_EPS = 1e-9
MASK_VALUE = -1e9

_BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: _BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate tensors receive the gradient of this call only; leaves
    accumulate across calls until ``zero_grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make((x * cdf).astype(x.dtype), (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, mul, scale, gelu, relu, layer_norm."""
    table = {
        "add": add,
        "mul": mul,
        "scale": scale,
        "gelu": gelu,
        "relu": relu,
        "layer_norm": layer_norm,
    }
    if kind not in table:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args, **kwargs)


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise UsageError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    fancy = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(a.data[idx]), (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn, "concat")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),), "roll")


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]`` with broadcast batch dims."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored ``[in, out]``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- softmax / norms


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=ax, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=ax, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * np.sum(g, axis=ax, keepdims=True),), "log_softmax")


def _normalize(x: Tensor, axes: tuple[int, ...], eps: float, op: str) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), fn, op)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    out = _normalize(x, (x.ndim - 1,), eps, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def instance_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial axes of ``[B, C, S...]``."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [B, C, S...], got {x.shape}")
    out = _normalize(x, tuple(range(2, x.ndim)), eps, "instance_norm")
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if gain is not None:
        out = mul(out, reshape(gain, bshape))
    if bias is not None:
        out = add(out, reshape(bias, bshape))
    return out


# ---------------------------------------------------------------- convolution


def _batched(x: Tensor, spatial: int) -> tuple[Tensor, bool]:
    if x.ndim == spatial + 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == spatial + 2:
        return x, False
    raise ShapeError(f"expected input of rank {spatial + 1} or {spatial + 2}, got shape {x.shape}")


def conv_nd(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    """Cross-correlation over 2 or 3 spatial axes.

    ``x`` is ``[C_in, S...]`` or ``[B, C_in, S...]``; ``kernel`` is
    ``[C_out, C_in, k...]``.
    """
    nsp = kernel.ndim - 2
    if nsp not in (1, 2, 3):
        raise ShapeError(f"conv_nd: kernel rank {kernel.ndim} unsupported")
    xb, squeezed = _batched(x, nsp)
    stride = (stride,) * nsp if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * nsp if isinstance(padding, int) else tuple(padding)
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv_nd: stride must be >= 1, got {stride}")
    B, cin = xb.shape[:2]
    cout, kcin = kernel.shape[:2]
    ksz = kernel.shape[2:]
    if kcin != cin:
        raise ShapeError(f"conv_nd: input channels {cin} (shape {x.shape}) != kernel channels {kcin} (shape {kernel.shape})")
    spatial = xb.shape[2:]
    outsz = tuple((spatial[i] + 2 * padding[i] - ksz[i]) // stride[i] + 1 for i in range(nsp))
    if any(o < 1 for o in outsz):
        raise ShapeError(f"conv_nd: output extent {outsz} < 1 for input {x.shape}, kernel {kernel.shape}")

    xp = np.pad(xb.data, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    offsets = list(itertools.product(*[range(k) for k in ksz]))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(off[i], off[i] + stride[i] * (outsz[i] - 1) + 1, stride[i]) for i in range(nsp)
        )

    K = len(offsets)
    P = int(np.prod(outsz))
    cols = np.empty((B, cin, K) + outsz, dtype=xp.dtype)
    for j, off in enumerate(offsets):
        cols[:, :, j] = xp[window(off)]
    cols = cols.reshape(B, cin * K, P)
    w2 = kernel.data.reshape(cout, cin * K)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1)
    out = out.reshape((B, cout) + outsz)

    def fn(g):
        g2 = g.reshape(B, cout, P)
        gw = sum(g2[i] @ cols[i].T for i in range(B)).reshape(kernel.shape)
        gcols = (w2.T @ g2).reshape((B, cin, K) + outsz)
        gxp = np.zeros_like(xp)
        for j, off in enumerate(offsets):
            gxp[window(off)] += gcols[:, :, j]
        inner = (slice(None), slice(None)) + tuple(
            slice(padding[i], padding[i] + spatial[i]) for i in range(nsp)
        )
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        return gxp[inner], gw, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    res = _make(out, parents, fn, "conv_nd")
    return reshape(res, res.shape[1:]) if squeezed else res


def conv_transpose_nd(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with stride equal to kernel size (non-overlapping).

    ``kernel`` is ``[C_in, C_out, k...]``; each input site expands into a
    ``k...`` block of the output.
    """
    nsp = kernel.ndim - 2
    xb, squeezed = _batched(x, nsp)
    cin, cout = kernel.shape[:2]
    if xb.shape[1] != cin:
        raise ShapeError(f"conv_transpose_nd: input channels {xb.shape[1]} != kernel in-channels {cin}")
    ksz = tuple(kernel.shape[2:])
    B = xb.shape[0]
    spatial = tuple(xb.shape[2:])
    K = int(np.prod(ksz))
    P = int(np.prod(spatial))
    outsz = tuple(spatial[i] * ksz[i] for i in range(nsp))
    # [B, cout, k..., s...] <-> [B, cout, s1, k1, s2, k2, ...]
    to_out = (0, 1) + tuple(v for i in range(nsp) for v in (2 + nsp + i, 2 + i))
    from_out = (0, 1) + tuple(3 + 2 * i for i in range(nsp)) + tuple(2 + 2 * i for i in range(nsp))
    w2 = kernel.data.reshape(cin, cout * K)
    x2 = xb.data.reshape(B, cin, P)
    y = (w2.T @ x2).reshape((B, cout) + ksz + spatial)
    out = np.transpose(y, to_out).reshape((B, cout) + outsz)
    if bias is not None:
        out = out + bias.data.reshape((1, cout) + (1,) * nsp)

    def fn(g):
        split = (B, cout) + tuple(v for i in range(nsp) for v in (spatial[i], ksz[i]))
        gy = np.transpose(g.reshape(split), from_out).reshape(B, cout * K, P)
        gx = (w2 @ gy).reshape(xb.shape)
        gw = sum(x2[i] @ gy[i].T for i in range(B)).reshape(kernel.shape)
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim))) if bias is not None else None
        return gx, gw, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    res = _make(out, parents, fn, "conv_transpose_nd")
    return reshape(res, res.shape[1:]) if squeezed else res


# ---------------------------------------------------------------- gradient check


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps near-zero gradients from blowing up the ratio. With
    ``max_coords`` only a random subset of coordinates per input is probed.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)

    def call():
        return f(inputs[0]) if isinstance(x, Tensor) else f(*inputs)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = call()
    if out.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = call().item()
            flat[i] = orig - eps
            fm = call().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return float(worst)


# ---------------------------------------------------------------- rng


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream_id & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *labels) -> RngStream:
        return RngStream(self.seed, stable_hash(self.stream_id, *labels))


def stable_hash(*parts) -> int:
    """Platform-independent 64-bit hash of the string forms of ``parts``."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")
