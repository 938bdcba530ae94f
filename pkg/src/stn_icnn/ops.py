"""Differentiable image operations used by the networks and the cropper.

All spatial tensors are NCHW.  Convolutions are fixed to 3x3 / stride 1 /
zero padding 1, the only geometry the networks use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat, tensor_op

__all__ = [
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "upsample_nearest",
    "BatchNormState",
    "UninitializedStateError",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "softmax_channels",
    "linear",
    "concat_channels",
    "grid_sample_bilinear",
    "snap_tolerance",
]


def _check4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected a 4-d NCHW tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial size is preserved."""
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: weight must be (F, C, 3, 3), got {weight.shape}")
    b, c, h, w = x.shape
    f = weight.shape[0]
    if weight.shape[1] != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias must have shape ({f},), got {bias.shape}")

    # Work on the zero-padded image flattened row-major with row pitch w+2:
    # tap (ky, kx) is then a contiguous shifted slice.  One extra bottom row
    # keeps the last shifted slice in bounds.  Output columns w, w+1 of each
    # row are junk and dropped.
    pitch = w + 2
    n = h * pitch
    xpf = np.pad(x.data, ((0, 0), (0, 0), (1, 2), (1, 1))).reshape(b, c, -1)
    offs = [ky * pitch + kx for ky in range(3) for kx in range(3)]
    wk = [np.ascontiguousarray(weight.data[:, :, ky, kx]) for ky in range(3) for kx in range(3)]
    ext = np.matmul(wk[0], xpf[:, :, offs[0]:offs[0] + n])
    for k in range(1, 9):
        ext += np.matmul(wk[k], xpf[:, :, offs[k]:offs[k] + n])
    out = ext.reshape(b, f, h, pitch)[..., :w]
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gext = np.zeros((b, f, h, pitch), dtype=g.dtype)
        gext[..., :w] = g
        gext = gext.reshape(b, f, n)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k, off in enumerate(offs):
                gk = np.matmul(gext, xpf[:, :, off:off + n].transpose(0, 2, 1)).sum(axis=0)
                gw[:, :, k // 3, k % 3] = gk
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxpf = np.zeros_like(xpf)
            for k, off in enumerate(offs):
                gxpf[:, :, off:off + n] += np.matmul(wk[k].T, gext)
            gx = gxpf.reshape(b, c, h + 3, pitch)[:, :, 1:h + 1, 1:w + 1]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return tensor_op(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, ceil_mode: bool = False) -> Tensor:
    """2x2 max pooling with stride 2.

    With ``ceil_mode`` odd extents are padded with -inf on the bottom/right
    so the output has ``ceil(H/2)`` rows; otherwise odd extents are an error.
    Gradient goes to the first maximum of each window in row-major order.
    """
    _check4(x, "maxpool2d")
    b, c, h, w = x.shape
    data = x.data
    if h % 2 or w % 2:
        if not ceil_mode:
            raise ValueError(f"maxpool2d: odd spatial extent {h}x{w}")
        data = np.pad(data, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)),
                      constant_values=-np.inf)
    hp, wp = data.shape[2:]
    ho, wo = hp // 2, wp // 2
    win = data.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((b, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp)
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return tensor_op(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def avgpool2d(x: Tensor) -> Tensor:
    """3x3 average pooling, stride 2, zero padding 1, divisor fixed at 9."""
    _check4(x, "avgpool2d")
    b, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    # bottom/right padding so the last window (padded rows 2*ho-2 .. 2*ho) exists
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 2 * ho - h), (1, 2 * wo - w)))
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            out += xp[:, :, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2]
    out /= 9.0

    def bw(g):
        gxp = np.zeros_like(xp)
        g9 = g / 9.0
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2] += g9
        return (np.ascontiguousarray(gxp[:, :, 1:1 + h, 1:1 + w]),)

    return tensor_op(out, (x,), bw, "avgpool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every pixel ``factor`` x ``factor`` times."""
    _check4(x, "upsample_nearest")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor))
    out = out.reshape(b, c, h * factor, w * factor)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return tensor_op(np.ascontiguousarray(out), (x,), bw, "upsample")


class UninitializedStateError(RuntimeError):
    """Eval-mode batch norm was used before any statistics were gathered."""


@dataclass
class BatchNormState:
    channels: int
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    initialized: bool = field(default=False)

    def reset(self, dtype=np.float32) -> None:
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)
        self.initialized = True


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool) -> Tensor:
    """Per-channel batch normalisation followed by the affine map gamma, beta.

    Training mode normalises with biased batch statistics and folds them into
    the running estimates; eval mode uses the running estimates.
    """
    _check4(x, "batchnorm2d")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("batchnorm2d: gamma/beta must match the channel count")
    g_ = gamma.data.reshape(1, c, 1, 1)
    if train:
        if b * h * w < 2:
            raise ValueError("batchnorm2d: training needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if not state.initialized:
            state.reset(x.dtype)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(x.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(x.dtype)
    else:
        if not state.initialized:
            raise UninitializedStateError("batch norm statistics are uninitialised")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)
    n = b * h * w

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g_
        if train:
            gx = inv / n * (n * gxhat
                            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return tensor_op(out, (x, gamma, beta), bw, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across axis 1 (channels) at every pixel."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return tensor_op(out, (x,), bw, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (B, D) and weight (O, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return tensor_op(out, parents, bw, "linear")


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: mismatched shapes {ref} and {t.shape}")
    return concat(tensors, axis=1)


def snap_tolerance(dtype, extent: int) -> float:
    """Distance from an integer below which a pixel coordinate is treated as exact.

    Corner-aligned normalisation round-trips integer pixel positions only up
    to rounding error; snapping keeps integer-grid sampling exact.
    """
    return 16.0 * float(np.finfo(dtype).eps) * max(extent, 1)


def grid_sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` (B,C,H,W) at normalised ``grid`` (B,h,w,2).

    ``grid[..., 0]`` is x, ``grid[..., 1]`` is y.  Normalisation is
    corner-aligned (-1 is pixel 0, +1 is the last pixel); samples outside the
    image read zeros.  Differentiable with respect to both arguments.
    """
    _check4(x, "grid_sample")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ValueError(f"grid_sample: grid must be (B, h, w, 2), got {grid.shape}")
    b, c, h, w = x.shape
    if grid.shape[0] != b:
        raise ValueError("grid_sample: batch sizes differ")
    _, ho, wo, _ = grid.shape
    dt = x.dtype
    tol = snap_tolerance(np.result_type(grid.dtype, dt), max(h, w))

    gx = grid.data[..., 0].astype(np.float64)
    gy = grid.data[..., 1].astype(np.float64)
    ix = (gx + 1.0) * (0.5 * (w - 1))
    iy = (gy + 1.0) * (0.5 * (h - 1))
    rx, ry = np.rint(ix), np.rint(iy)
    ix = np.where(np.abs(ix - rx) <= tol, rx, ix)
    iy = np.where(np.abs(iy - ry) <= tol, ry, iy)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    wx1 = (ix - x0).astype(dt)
    wy1 = (iy - y0).astype(dt)
    wx0 = 1 - wx1
    wy0 = 1 - wy1

    flat = x.data.reshape(b, c, h * w)

    def gather(yy, xx):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx = np.where(valid, yy * w + xx, 0).reshape(b, 1, ho * wo)
        vals = np.take_along_axis(flat, np.broadcast_to(idx, (b, c, ho * wo)), axis=2)
        return idx, valid, vals.reshape(b, c, ho, wo) * valid[:, None].astype(dt)

    corners = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            idx, valid, vals = gather(y0 + dy, x0 + dx)
            corners.append((dy, dx, wy, wx, idx, valid, vals))

    out = np.zeros((b, c, ho, wo), dtype=dt)
    for _, _, wy, wx, _, _, vals in corners:
        out += (wy * wx)[:, None] * vals

    def bw(g):
        g_in = g_grid = None
        if x.requires_grad:
            g_in = np.zeros((b, c * h * w), dtype=np.float64)
            offs = (np.arange(c) * (h * w))[None, :, None]
            for _, _, wy, wx, idx, valid, _ in corners:
                contrib = g * ((wy * wx) * valid)[:, None]
                flat_idx = (idx + offs).reshape(b, -1)
                for bi in range(b):
                    g_in[bi] += np.bincount(flat_idx[bi], weights=contrib[bi].reshape(-1),
                                            minlength=c * h * w)
            g_in = g_in.reshape(b, c, h, w).astype(dt)
        if grid.requires_grad:
            v = {(dy, dx): vals for dy, dx, _, _, _, _, vals in corners}
            dvdx = ((v[0, 1] - v[0, 0]) * wy0[:, None] + (v[1, 1] - v[1, 0]) * wy1[:, None])
            dvdy = ((v[1, 0] - v[0, 0]) * wx0[:, None] + (v[1, 1] - v[0, 1]) * wx1[:, None])
            # On an exact pixel coordinate the interpolant has a kink; the
            # forward slope alone is a biased subgradient, so use the mean of
            # the left and right slopes (what a central difference measures).
            on_x, on_y = wx1 == 0, wy1 == 0
            if on_x.any():
                left = [gather(y0 + dy, x0 - 1)[2] for dy in (0, 1)]
                back = ((v[0, 0] - left[0]) * wy0[:, None] + (v[1, 0] - left[1]) * wy1[:, None])
                dvdx = np.where(on_x[:, None], 0.5 * (dvdx + back), dvdx)
            if on_y.any():
                up = [gather(y0 - 1, x0 + dx)[2] for dx in (0, 1)]
                back = ((v[0, 0] - up[0]) * wx0[:, None] + (v[0, 1] - up[1]) * wx1[:, None])
                dvdy = np.where(on_y[:, None], 0.5 * (dvdy + back), dvdy)
            g_gx = (g * dvdx).sum(axis=1) * (0.5 * (w - 1))
            g_gy = (g * dvdy).sum(axis=1) * (0.5 * (h - 1))
            g_grid = np.stack([g_gx, g_gy], axis=-1).astype(grid.dtype)
        return g_in, g_grid

    return tensor_op(out, (x, grid), bw, "grid_sample")
