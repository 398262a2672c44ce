"""Network layers built on the autodiff Tensor.

Layers are small Module objects that own their parameters; construction
takes an ``rng`` so that a model built twice from the same seed has
bit-identical weights.  Convolution and involution are implemented as
fused primitives with hand-written backward passes (an im2col buffer at
training batch sizes would dwarf the activations).

Channel layout is (B, C, H, W) throughout.  Padding is symmetric and
either "zeros" or "circular"; circular padding keeps translation a true
group action on the torus, which the shift-equivariance tests exploit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, exact_mode, softmax_rows, truncated_normal

PAD_MODES = ("zeros", "circular")


class Module:
    """Minimal parameter container with deterministic traversal order."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = bool(flag)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ w + b over the last axis; w is (d_in, d_out)."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True,
                 dtype=np.float32):
        self.w = Tensor(truncated_normal(rng, (d_in, d_out), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        d_in = self.w.shape[0]
        if x.shape[-1] != d_in:
            raise ShapeError(f"linear expects last extent {d_in}, got {x.shape}")
        lead = x.shape[:-1]
        y = x.reshape(-1, d_in) @ self.w
        if self.b is not None:
            y = y + self.b
        return y.reshape(*lead, self.w.shape[1])


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gain.shape[0]:
            raise ShapeError(f"layer_norm dim {self.gain.shape[0]} vs input {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = xc / (var + self.eps).sqrt()
        return xn * self.gain + self.bias


class GroupNorm(Module):
    """Per-sample normalization over channel groups of a (B, C, H, W) map.

    Statistics never cross the batch axis, so inference is deterministic
    and batch-size independent.
    """

    def __init__(self, groups: int, channels: int, eps: float = 1e-6,
                 dtype=np.float32):
        if channels % groups:
            raise ShapeError(f"group_norm: {groups} groups do not divide {channels} channels")
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gain.shape[0]:
            raise ShapeError(f"group_norm expects (B,{self.gain.shape[0]},H,W), got {x.shape}")
        b, c, h, w = x.shape
        xr = x.reshape(b, self.groups, (c // self.groups) * h * w)
        mu = xr.mean(axis=-1, keepdims=True)
        xc = xr - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = (xc / (var + self.eps).sqrt()).reshape(b, c, h, w)
        return xn * self.gain.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return x * Tensor(mask)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention with per-head split of the width.

    Four square projection matrices (query, key, value, output), no
    biases.  Scores are scaled by 1/sqrt(d_k) before the row softmax.
    """

    def __init__(self, rng, dim: int, heads: int, dtype=np.float32):
        if dim % heads:
            raise ShapeError(f"attention width {dim} not divisible by {heads} heads")
        self.w_q = Tensor(truncated_normal(rng, (dim, dim), dtype=dtype), requires_grad=True)
        self.w_k = Tensor(truncated_normal(rng, (dim, dim), dtype=dtype), requires_grad=True)
        self.w_v = Tensor(truncated_normal(rng, (dim, dim), dtype=dtype), requires_grad=True)
        self.w_o = Tensor(truncated_normal(rng, (dim, dim), dtype=dtype), requires_grad=True)
        self.dim = dim
        self.heads = heads

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects (B,N,{self.dim}), got {x.shape}")
        b, n, d = x.shape
        h = self.heads
        dk = d // h

        def split(t):  # (B,N,d) -> (B,h,N,dk)
            return t.reshape(b, n, h, dk).transpose(0, 2, 1, 3)

        q = split(x @ self.w_q)
        k = split(x @ self.w_k)
        v = split(x @ self.w_v)
        scores = (q @ k.swap_last()) * (1.0 / math.sqrt(dk))
        attn = softmax_rows(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        out = ctx @ self.w_o
        return out.reshape(n, d) if squeeze else out


class FeedForward(Module):
    """Two linear maps around a gelu."""

    def __init__(self, rng, dim: int, hidden: int, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class TransformerBlock(Module):
    """Pre-norm residual block: attention then a 4x-wide feed-forward."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(rng, dim, heads, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(rng, dim, mlp_ratio * dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PatchEmbed(Module):
    """Cut (B,C,H,W) images into P x P patches and project each to ``dim``.

    Patch vectors are flattened channel-major (C, P, P); patches are
    ordered row-major over the grid.
    """

    def __init__(self, rng, image_hw, patch: int, channels: int, dim: int,
                 dtype=np.float32):
        h, w = image_hw
        if h % patch or w % patch:
            raise ShapeError(f"patch size {patch} does not tile image {h}x{w}")
        self.proj = Linear(rng, channels * patch * patch, dim, dtype=dtype)
        self.image_hw = (h, w)
        self.patch = patch
        self.channels = channels
        self.n_patches = (h // patch) * (w // patch)

    def forward(self, images: Tensor) -> Tensor:
        h, w = self.image_hw
        p = self.patch
        if images.ndim != 4 or images.shape[1:] != (self.channels, h, w):
            raise ShapeError(
                f"patch_embed expects (B,{self.channels},{h},{w}), got {images.shape}"
            )
        b = images.shape[0]
        grid_h, grid_w = h // p, w // p
        x = images.reshape(b, self.channels, grid_h, p, grid_w, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(b, self.n_patches, self.channels * p * p)
        return self.proj(x)


# ---------------------------------------------------------------------------
# spatial padding shared by conv and involution


def _pad_spatial(a: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return a
    width = ((0, 0), (0, 0), (p, p), (p, p))
    return np.pad(a, width, mode="constant" if mode == "zeros" else "wrap")


def _unpad_spatial(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of _pad_spatial: crop, folding wrapped borders back in."""
    if p == 0:
        return g
    if mode == "zeros":
        return g[:, :, p:-p, p:-p].copy()
    for axis in (2, 3):
        n = g.shape[axis] - 2 * p
        sl = [slice(None)] * g.ndim

        def take(lo, hi):
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        core = take(p, p + n).copy()
        csl = [slice(None)] * g.ndim
        csl[axis] = slice(0, p)
        core[tuple(csl)] += take(p + n, 2 * p + n)
        csl[axis] = slice(n - p, n)
        core[tuple(csl)] += take(0, p)
        g = core
    return g


def _check_pad(p: int, h: int, w: int, mode: str):
    if mode not in PAD_MODES:
        raise ShapeError(f"unknown pad mode '{mode}' (choose from {PAD_MODES})")
    if p < 0 or p > min(h, w):
        raise ShapeError(f"padding {p} invalid for {h}x{w} input")


def _out_extent(n: int, k: int, stride: int) -> int:
    if n < k:
        raise ShapeError(f"kernel size {k} exceeds padded extent {n}")
    return (n - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2-d cross-correlation of (B,Ci,H,W) with (Co,Ci,K,K) weights.

    Fused primitive: the forward accumulates one offset at a time in a
    fixed (u, v) order, so no K^2-unfolded copy of the input is kept.
    Under exact_reductions the per-offset channel contraction runs
    through einsum, whose summation order per output element does not
    depend on spatial position.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernels must be square, got {w.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    _check_pad(padding, x.shape[2], x.shape[3], pad_mode)
    kk = w.shape[2]
    xp = _pad_spatial(x.data, padding, pad_mode)
    bsz, ci, hp, wp = xp.shape
    co = w.shape[0]
    ho = _out_extent(hp, kk, stride)
    wo = _out_extent(wp, kk, stride)

    def offset_slice(arr, u, v):
        return arr[:, :, u:u + stride * (ho - 1) + 1:stride,
                   v:v + stride * (wo - 1) + 1:stride]

    wd = w.data
    acc = np.zeros((co, bsz, ho, wo), dtype=x.dtype)
    for u in range(kk):
        for v in range(kk):
            xs = offset_slice(xp, u, v)
            if exact_mode():
                acc += np.einsum("oc,bchw->obhw", wd[:, :, u, v], xs, optimize=False)
            else:
                acc += np.tensordot(wd[:, :, u, v], xs, axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d bias must be ({co},), got {b.shape}")
        out += b.data[None, :, None, None]

    def backward(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for u in range(kk):
            for v in range(kk):
                xs = offset_slice(xp, u, v)
                gw[:, :, u, v] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                spread = np.tensordot(wd[:, :, u, v], g, axes=([0], [1]))
                offset_slice(gxp, u, v)[...] += np.moveaxis(spread, 0, 1)
        gx = _unpad_spatial(gxp, padding, pad_mode)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward, "conv2d")


def involution2d(x: Tensor, kernels: Tensor, kernel_size: int, groups: int,
                 stride: int = 1, pad_mode: str = "zeros") -> Tensor:
    """Apply per-position kernels to (B,C,H,W): involution aggregation.

    ``kernels`` is (B, G, K*K, Ho, Wo): one K x K stencil per spatial
    position and group, shared by every channel inside the group
    (channel c belongs to group c*G//C).  Padding is fixed to (K-1)//2
    so stride 1 preserves the spatial extent.
    """
    if x.ndim != 4:
        raise ShapeError(f"involution2d expects 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"involution2d: {groups} groups do not divide {c} channels")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ShapeError(f"involution kernel size must be odd, got {kernel_size}")
    pad = (kernel_size - 1) // 2
    _check_pad(pad, h, w, pad_mode)
    xp = _pad_spatial(x.data, pad, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = _out_extent(hp, kernel_size, stride)
    wo = _out_extent(wp, kernel_size, stride)
    want = (bsz, groups, kernel_size * kernel_size, ho, wo)
    if kernels.shape != want:
        raise ShapeError(f"involution kernels must be {want}, got {kernels.shape}")
    cg = c // groups
    xg = xp.reshape(bsz, groups, cg, hp, wp)
    kd = kernels.data

    def offset_slice(arr, u, v):
        return arr[:, :, :, u:u + stride * (ho - 1) + 1:stride,
                   v:v + stride * (wo - 1) + 1:stride]

    out = np.zeros((bsz, groups, cg, ho, wo), dtype=x.dtype)
    idx = 0
    for u in range(kernel_size):
        for v in range(kernel_size):
            out += kd[:, :, None, idx] * offset_slice(xg, u, v)
            idx += 1

    def backward(g):
        gr = g.reshape(bsz, groups, cg, ho, wo)
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xg)
        i = 0
        for u in range(kernel_size):
            for v in range(kernel_size):
                xs = offset_slice(xg, u, v)
                gk[:, :, i] = (gr * xs).sum(axis=2)
                offset_slice(gxp, u, v)[...] += kd[:, :, None, i] * gr
                i += 1
        gx = _unpad_spatial(gxp.reshape(bsz, c, hp, wp), pad, pad_mode)
        return gx, gk

    return Tensor._make(out.reshape(bsz, c, ho, wo), (x, kernels), backward,
                        "involution2d")


class Conv2d(Module):
    """Learnable conv2d wrapper (square kernels)."""

    def __init__(self, rng, c_in: int, c_out: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zeros",
                 dtype=np.float32):
        self.w = Tensor(truncated_normal(rng, (c_out, c_in, kernel_size, kernel_size),
                                         dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride,
                      padding=self.padding, pad_mode=self.pad_mode)


class Involution2d(Module):
    """Involution layer: kernels generated from the input, then applied.

    The generator reads the centre feature of each output position (the
    stride-decimated map) through a bottleneck of width C/r and emits
    K*K weights per group; it is two position-wise linear maps, so each
    position's kernel depends on that position's feature alone.
    """

    def __init__(self, rng, channels: int, kernel_size: int = 7,
                 groups: int = 1, reduction: int = 4, stride: int = 1,
                 pad_mode: str = "zeros", dtype=np.float32):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ShapeError(f"involution: kernel size {kernel_size} must be odd "
                             "(kernels are centred on their position)")
        if channels % groups:
            raise ShapeError(f"involution: {groups} groups do not divide {channels}")
        if channels % reduction:
            raise ShapeError(f"involution: reduction {reduction} does not divide {channels}")
        hidden = channels // reduction
        self.w_reduce = Tensor(truncated_normal(rng, (channels, hidden), dtype=dtype),
                               requires_grad=True)
        self.b_reduce = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_span = Tensor(
            truncated_normal(rng, (hidden, groups * kernel_size * kernel_size), dtype=dtype),
            requires_grad=True)
        self.b_span = Tensor(np.zeros(groups * kernel_size * kernel_size, dtype=dtype),
                             requires_grad=True)
        self.channels = channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.stride = stride
        self.pad_mode = pad_mode

    def kernels(self, x: Tensor) -> Tensor:
        """Generate (B, G, K*K, Ho, Wo) kernels from the input map."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"involution expects (B,{self.channels},H,W), got {x.shape}")
        feats = x if self.stride == 1 else x[:, :, ::self.stride, ::self.stride]
        b, c, ho, wo = feats.shape
        flat = feats.transpose(0, 2, 3, 1).reshape(b * ho * wo, c)
        hid = (flat @ self.w_reduce + self.b_reduce).relu()
        span = hid @ self.w_span + self.b_span
        kk = self.kernel_size * self.kernel_size
        return (span.reshape(b, ho, wo, self.groups * kk)
                .transpose(0, 3, 1, 2)
                .reshape(b, self.groups, kk, ho, wo))

    def forward(self, x: Tensor) -> Tensor:
        return involution2d(x, self.kernels(x), self.kernel_size, self.groups,
                            stride=self.stride, pad_mode=self.pad_mode)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))
