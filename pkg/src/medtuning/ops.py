"""Neural building blocks on top of the autodiff primitives.

Convolutions follow the neural-network convention (correlation, no kernel
flip) with zero same-padding, so every op here preserves spatial shape.
The depthwise 3D convolutions come in the two factorized forms used by the
adapter: a per-channel 1xKxK kernel over (H, W) and a per-channel Kx1x1
kernel over the slice axis D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (Tensor, forward_primitive, gelu, layer_norm, matmul, permute,
                     register_primitive, reshape, scale, slice_tensor, softmax)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the trailing feature axis."""
    return forward_primitive("linear", [x, w, b])


# --------------------------------------------------------------------------
# Depthwise / pointwise 3D convolutions
# --------------------------------------------------------------------------

@dataclass
class DepthwiseKernelPair:
    """Factorized replacement for a KxKxK depthwise kernel.

    ``spatial`` is [C',1,K,K] applied over (H, W); ``depth`` is [C',K,1,1]
    applied over D; both carry a per-channel bias. K must be odd so that
    same-padding of (K-1)/2 preserves shape.
    """

    spatial: Tensor
    depth: Tensor
    bias_spatial: Tensor
    bias_depth: Tensor

    def __post_init__(self):
        c, one, k, k2 = self.spatial.shape
        if one != 1 or k != k2:
            raise ShapeError(f"spatial kernel must be [C',1,K,K], got {self.spatial.shape}")
        if self.depth.shape != (c, k, 1, 1):
            raise ShapeError(f"depth kernel must be [C',K,1,1], got {self.depth.shape}")
        if self.bias_spatial.shape != (c,) or self.bias_depth.shape != (c,):
            raise ShapeError("bias shapes must be [C']")
        if k % 2 == 0:
            raise ConfigError(f"kernel size K={k} must be odd")

    @property
    def k(self) -> int:
        return self.spatial.shape[2]

    def tensors(self) -> list[Tensor]:
        return [self.spatial, self.depth, self.bias_spatial, self.bias_depth]


def _dwconv_mode(kernel_shape) -> tuple[str, int]:
    if len(kernel_shape) != 4:
        raise ShapeError(f"depthwise kernel must be rank 4, got {kernel_shape}")
    c, a, b, d = kernel_shape
    if a == 1 and b == d and b > 1:
        mode, k = "spatial", b
    elif b == 1 and d == 1 and a > 1:
        mode, k = "depth", a
    else:
        raise ShapeError(f"kernel {kernel_shape} is neither [C',1,K,K] nor [C',K,1,1]")
    if k % 2 == 0:
        raise ConfigError(f"kernel size K={k} must be odd")
    return mode, k


def _fw_dwconv3d(arrays, attrs):
    x, kern, bias = arrays
    if x.ndim != 5:
        raise ShapeError(f"dwconv3d expects [B,C',D,H,W], got {x.shape}")
    mode, k = _dwconv_mode(kern.shape)
    c = x.shape[1]
    if kern.shape[0] != c or bias.shape != (c,):
        raise ShapeError(f"dwconv3d: kernel channels {kern.shape[0]} / bias {bias.shape} "
                         f"do not match input channels {c}")
    p = (k - 1) // 2
    _, _, d, h, w = x.shape
    out = np.broadcast_to(bias[None, :, None, None, None], x.shape).astype(np.float32).copy()
    if mode == "spatial":
        xpad = np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
        for u in range(k):
            for v in range(k):
                tap = kern[:, 0, u, v][None, :, None, None, None]
                out += tap * xpad[:, :, :, u:u + h, v:v + w]
    else:
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0), (0, 0)))
        for u in range(k):
            tap = kern[:, u, 0, 0][None, :, None, None, None]
            out += tap * xpad[:, :, u:u + d, :, :]
    return out, (x, kern, mode, k)


def _vjp_dwconv3d(g, ctx, needs):
    x, kern, mode, k = ctx
    p = (k - 1) // 2
    _, _, d, h, w = x.shape
    gx = gk = gb = None
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3, 4))
    if mode == "spatial":
        xpad = np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
        if needs[0]:
            gpad = np.zeros_like(xpad)
            for u in range(k):
                for v in range(k):
                    tap = kern[:, 0, u, v][None, :, None, None, None]
                    gpad[:, :, :, u:u + h, v:v + w] += tap * g
            gx = np.ascontiguousarray(gpad[:, :, :, p:p + h, p:p + w])
        if needs[1]:
            gk = np.zeros_like(kern)
            for u in range(k):
                for v in range(k):
                    gk[:, 0, u, v] = (xpad[:, :, :, u:u + h, v:v + w] * g).sum(axis=(0, 2, 3, 4))
    else:
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0), (0, 0)))
        if needs[0]:
            gpad = np.zeros_like(xpad)
            for u in range(k):
                tap = kern[:, u, 0, 0][None, :, None, None, None]
                gpad[:, :, u:u + d, :, :] += tap * g
            gx = np.ascontiguousarray(gpad[:, :, p:p + d, :, :])
        if needs[1]:
            gk = np.zeros_like(kern)
            for u in range(k):
                gk[:, u, 0, 0] = (xpad[:, :, u:u + d, :, :] * g).sum(axis=(0, 2, 3, 4))
    return gx, gk, gb


def _fw_pointwise3d(arrays, attrs):
    x, w, b = arrays
    if x.ndim != 5 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"conv3d_pointwise: shapes x={x.shape} W={w.shape} b={b.shape} "
                         "do not conform")
    out = np.einsum("bcdhw,co->bodhw", x, w) + b[None, :, None, None, None]
    return np.ascontiguousarray(out.astype(np.float32)), (x, w)


def _vjp_pointwise3d(g, ctx, needs):
    x, w = ctx
    gx = gw = gb = None
    if needs[0]:
        gx = np.einsum("bodhw,co->bcdhw", g, w).astype(np.float32)
    if needs[1]:
        gw = np.einsum("bcdhw,bodhw->co", x, g).astype(np.float32)
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


register_primitive("dwconv3d", _fw_dwconv3d, _vjp_dwconv3d)
register_primitive("pointwise_conv3d", _fw_pointwise3d, _vjp_pointwise3d)


def dwconv3d_single(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """One factorized depthwise pass: per-channel correlation, no channel mixing."""
    return forward_primitive("dwconv3d", [x, kernel, bias])


def dwconv_cascade(x: Tensor, pair: DepthwiseKernelPair) -> Tensor:
    """1xKxK spatial pass followed by Kx1x1 depth pass.

    With rank-1 separable targets the cascade equals a full KxKxK depthwise
    convolution with the outer-product kernel.
    """
    y = dwconv3d_single(x, pair.spatial, pair.bias_spatial)
    return dwconv3d_single(y, pair.depth, pair.bias_depth)


def conv3d_pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1x1 convolution: per-voxel linear map across channels."""
    return forward_primitive("pointwise_conv3d", [x, w, b])


# --------------------------------------------------------------------------
# Tokenization, attention, merging
# --------------------------------------------------------------------------

def patch_embed2d(x: Tensor, patch: int, w: Tensor, b: Tensor) -> Tensor:
    """Non-overlapping PxP patches, linearly projected.

    [N, C, H, W] -> [N, (H/P)*(W/P), d] with row-major token order; each
    patch is flattened in (C, py, px) order before projection.
    """
    n, c, h, wid = x.shape
    if h % patch or wid % patch:
        raise ShapeError(f"image {h}x{wid} not divisible by patch {patch}")
    gh, gw = h // patch, wid // patch
    t = reshape(x, (n, c, gh, patch, gw, patch))
    t = permute(t, (0, 2, 4, 1, 3, 5))
    t = reshape(t, (n, gh * gw, c * patch * patch))
    return linear(t, w, b)


@dataclass
class AttentionBlockParams:
    """Pre-norm transformer block: LN -> MHSA -> residual -> LN -> MLP -> residual."""

    ln1_g: Tensor
    ln1_b: Tensor
    w_qkv: Tensor
    b_qkv: Tensor
    w_proj: Tensor
    b_proj: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_qkv.shape[0]
        if self.w_qkv.shape != (d, 3 * d):
            raise ShapeError(f"qkv weight must be [d,3d], got {self.w_qkv.shape}")
        if d % self.heads:
            raise ConfigError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.w_qkv.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.ln1_g, self.ln1_b, self.w_qkv, self.b_qkv, self.w_proj, self.b_proj,
                self.ln2_g, self.ln2_b, self.w_fc1, self.b_fc1, self.w_fc2, self.b_fc2]


def attention_block(x: Tensor, params: AttentionBlockParams) -> Tensor:
    """Multi-head self-attention plus GELU MLP, both residual."""
    n, t, d = x.shape
    if d != params.width:
        raise ShapeError(f"attention_block: width {d} does not match params {params.width}")
    heads = params.heads
    hd = d // heads

    h = layer_norm(x, params.ln1_g, params.ln1_b)
    qkv = linear(h, params.w_qkv, params.b_qkv)            # [N, T, 3d]
    qkv = reshape(qkv, (n, t, 3, heads, hd))
    qkv = permute(qkv, (2, 0, 3, 1, 4))                    # [3, N, heads, T, hd]
    q = reshape(slice_0(qkv, 0), (n, heads, t, hd))
    k = reshape(slice_0(qkv, 1), (n, heads, t, hd))
    v = reshape(slice_0(qkv, 2), (n, heads, t, hd))
    att = matmul(q, permute(k, (0, 1, 3, 2)))              # [N, heads, T, T]
    att = scale(att, 1.0 / float(np.sqrt(hd)))
    att = softmax(att, axis=-1)
    ctx = matmul(att, v)                                   # [N, heads, T, hd]
    ctx = reshape(permute(ctx, (0, 2, 1, 3)), (n, t, d))
    x = x + linear(ctx, params.w_proj, params.b_proj)

    h = layer_norm(x, params.ln2_g, params.ln2_b)
    h = linear(h, params.w_fc1, params.b_fc1)
    h = gelu(h)
    h = linear(h, params.w_fc2, params.b_fc2)
    return x + h


def slice_0(t: Tensor, index: int) -> Tensor:
    """Select one entry along the leading axis (keeps it a primitive slice)."""
    starts = (index,) + (0,) * (len(t.shape) - 1)
    stops = (index + 1,) + t.shape[1:]
    return slice_tensor(t, starts, stops)


def patch_merge(x: Tensor, grid: tuple[int, int], w: Tensor, b: Tensor) -> Tensor:
    """Concatenate each 2x2 token neighborhood and project 4d -> 2d.

    [N, T, d] with T == h*w (h, w even) -> [N, T/4, 2d]; the grid halves
    per axis. Neighborhood order is row-major within the 2x2 cell.
    """
    n, t, d = x.shape
    h, wid = grid
    if t != h * wid:
        raise ShapeError(f"patch_merge: {t} tokens do not fill grid {h}x{wid}")
    if h % 2 or wid % 2:
        raise ShapeError(f"patch_merge: odd grid {h}x{wid}")
    if w.shape != (4 * d, 2 * d) or b.shape != (2 * d,):
        raise ShapeError(f"patch_merge: projection {w.shape}/{b.shape} must be "
                         f"[{4 * d},{2 * d}]/[{2 * d}]")
    y = reshape(x, (n, h // 2, 2, wid // 2, 2, d))
    y = permute(y, (0, 1, 3, 2, 4, 5))
    y = reshape(y, (n, (h // 2) * (wid // 2), 4 * d))
    return linear(y, w, b)
