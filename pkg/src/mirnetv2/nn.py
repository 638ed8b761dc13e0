"""Layer primitives: grouped conv2d, 2x resampling between streams, ReLU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _check_dtypes, _count, make_result, relu

__all__ = [
    "ConvParams",
    "ResampleParams",
    "activation",
    "avg_pool2x",
    "bilinear_up2x",
    "conv2d",
    "downsample2x",
    "relu",
    "upsample2x",
]


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in/g, k, k]
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        cout, _, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
        if self.groups < 1 or cout % self.groups:
            raise ShapeError(f"C_out={cout} not divisible by groups={self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.bias is not None and self.bias.shape != (cout,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({cout},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def num_params(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)


@dataclass
class ResampleParams:
    direction: str  # "down2x" | "up2x"
    channel_proj: ConvParams

    def __post_init__(self):
        if self.direction not in ("down2x", "up2x"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.channel_proj.kernel != 1:
            raise ShapeError("channel projection must be a 1x1 conv")


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded grouped 2-D convolution (cross-correlation) on NCHW input."""
    w = p.weight
    parents = (x, w) if p.bias is None else (x, w, p.bias)
    _check_dtypes(*parents)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    n, cin, h, wd = x.shape
    cout, cig, k, _ = w.shape
    g, s, pad = p.groups, p.stride, p.padding
    if cin % g:
        raise ShapeError(f"C_in={cin} not divisible by groups={g}")
    if cig * g != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {cig * g}")
    ho = (h + 2 * pad - k) // s + 1
    wo = (wd + 2 * pad - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{wd} too small for kernel {k} with padding {pad}")
    cog = cout // g
    xd, wdat = x.data, w.data

    if k == 1 and s == 1 and pad == 0:
        xg = xd.reshape(n, g, cig, h * wd)
        wg = wdat.reshape(g, cog, cig)
        out = np.matmul(wg, xg).reshape(n, cout, h, wd)

        def bw_main(gy):
            gyg = gy.reshape(n, g, cog, h * wd)
            dx = np.matmul(wg.transpose(0, 2, 1), gyg).reshape(x.shape)
            dw = np.einsum("ngoq,ngiq->goi", gyg, xg).reshape(w.shape)
            return dx, dw
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        hp, wp = xp.shape[2], xp.shape[3]
        xt = xp.transpose(1, 0, 2, 3)
        # column matrix laid out [C_in, k, k, N, H', W'] so each tap is a plain slice copy
        cols = np.empty((cin, k, k, n, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i : i + s * ho : s, j : j + s * wo : s]
        cols = cols.reshape(g, cig * k * k, n * ho * wo)
        wg = wdat.reshape(g, cog, cig * k * k)
        out = np.matmul(wg, cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

        def bw_main(gy):
            gyg = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(g, cog, n * ho * wo)
            dw = np.matmul(gyg, cols.transpose(0, 2, 1)).reshape(w.shape)
            dcols = np.matmul(wg.transpose(0, 2, 1), gyg).reshape(cin, k, k, n, ho, wo)
            dxt = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxt[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
            dx = dxt.transpose(1, 0, 2, 3)
            return (dx[:, :, pad : pad + h, pad : pad + wd] if pad else dx), dw

    flops = out.size * cig * k * k
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, cout, 1, 1)
        flops += out.size
    _count("conv2d", flops, out.size)

    def bw(gy):
        dx, dw = bw_main(gy)
        if p.bias is None:
            return dx, dw
        return dx, dw, gy.sum(axis=(0, 2, 3))

    return make_result(out, parents, bw)


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return relu(x)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; H and W must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    _count("pool", x.size, out.size)
    q = x.dtype.type(0.25)

    def bw(g):
        return (np.repeat(np.repeat(g * q, 2, axis=2), 2, axis=3),)

    return make_result(out, (x,), bw)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centers: out[2m] = .75 a[m] + .25 a[m-1], out[2m+1] = .75 a[m] + .25 a[m+1], edge-clamped
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    c3, c1 = a.dtype.type(0.75), a.dtype.type(0.25)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = c3 * a + c1 * prev
    out[..., 1::2] = c3 * a + c1 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    c3, c1 = g.dtype.type(0.75), g.dtype.type(0.25)
    out = c3 * (ge + go)
    out[..., :-1] += c1 * ge[..., 1:]
    out[..., 0] += c1 * ge[..., 0]
    out[..., 1:] += c1 * go[..., :-1]
    out[..., -1] += c1 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_up2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling, half-pixel sample centers, clamped edges."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_up2x expects [N,C,H,W], got {x.shape}")
    out = _up1d(_up1d(x.data, 2), 3)
    _count("resample", 4 * out.size, out.size)
    return make_result(out, (x,), lambda g: (_up1d_adjoint(_up1d_adjoint(g, 3), 2),))


def downsample2x(x: Tensor, p: ResampleParams) -> Tensor:
    """2x2 average pool, then the 1x1 channel projection."""
    if p.direction != "down2x":
        raise ValueError("downsample2x needs direction='down2x'")
    return conv2d(avg_pool2x(x), p.channel_proj)


def upsample2x(x: Tensor, p: ResampleParams) -> Tensor:
    """Bilinear x2 upsampling combined with the 1x1 channel projection.

    Both maps are linear and act on disjoint axes (bilinear weights sum to
    one, so a bias passes through unchanged), hence they commute; the
    projection runs first at the lower resolution, which costs 4x fewer MACs.
    """
    if p.direction != "up2x":
        raise ValueError("upsample2x needs direction='up2x'")
    return bilinear_up2x(conv2d(x, p.channel_proj))
