"""Differentiable layer operations on N x C x D x H x W feature maps.

Convolutions are computed by gathering the k^3 shifted (strided) views of the
padded input into a column buffer and multiplying by the flattened kernel.
The transposed convolution is the exact adjoint of that map: it scatters the
columns back, so ``conv_transpose3d`` and the input-gradient of ``conv3d``
share one code path.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, make

SPATIAL = (2, 3, 4)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v}")
    return v


def _gather(xp: np.ndarray, k: int, stride, out_sp) -> np.ndarray:
    """(N, C, *padded) -> (N, C, k^3, *out_sp) of strided kernel-tap views."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k ** 3) + tuple(out_sp), dtype=xp.dtype)
    sd, sh, sw = stride
    od, oh, ow = out_sp
    i = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, :, i] = xp[:, :,
                                   a:a + sd * (od - 1) + 1:sd,
                                   b:b + sh * (oh - 1) + 1:sh,
                                   e:e + sw * (ow - 1) + 1:sw]
                i += 1
    return cols


def _scatter(cols: np.ndarray, k: int, stride, buf_sp) -> np.ndarray:
    """Adjoint of :func:`_gather`: accumulate tap columns into a padded buffer."""
    n, c = cols.shape[:2]
    in_sp = cols.shape[3:]
    buf = np.zeros((n, c) + tuple(buf_sp), dtype=cols.dtype)
    sd, sh, sw = stride
    od, oh, ow = in_sp
    i = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                buf[:, :,
                    a:a + sd * (od - 1) + 1:sd,
                    b:b + sh * (oh - 1) + 1:sh,
                    e:e + sw * (ow - 1) + 1:sw] += cols[:, :, i]
                i += 1
    return buf


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=1) -> Tensor:
    """3D cross-correlation with a cubic kernel (Cout x Cin x k x k x k)."""
    if x.ndim != 5:
        raise ValueError(f"conv3d expects N x C x D x H x W input, got shape {x.shape}")
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d kernel must be cubic, got {weight.shape}")
    if x.shape[1] != cin:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, weight {weight.shape} expects {cin}")
    stride, pad = _triple(stride), _triple(padding)
    if any(s not in (1, 2) for s in stride):
        raise ValueError(f"stride must be 1 or 2 per axis, got {stride}")
    n = x.shape[0]
    sp = x.shape[2:]
    if any(d + 2 * p < k for d, p in zip(sp, pad)):
        raise ValueError(f"conv3d input {sp} with padding {pad} is smaller than kernel {k}")
    out_sp = tuple((d + 2 * p - k) // s + 1 for d, p, s in zip(sp, pad, stride))

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x.data
    cols = _gather(xp, k, stride, out_sp).reshape(n, cin * k ** 3, -1)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape((n, cout) + out_sp)
    padded_sp = xp.shape[2:]

    def backward(g):
        g2 = g.reshape(n, cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape((n, cin, k ** 3) + out_sp)
            gxp = _scatter(dcols, k, stride, padded_sp)
            gx = gxp[:, :, pad[0]:pad[0] + sp[0], pad[1]:pad[1] + sp[1], pad[2]:pad[2] + sp[2]]
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, backward)


def conv_transpose_output_size(d: int, stride: int, pad: int, k: int, output_padding: int) -> int:
    return (d - 1) * stride - 2 * pad + k + output_padding


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2, padding=1,
                     output_padding=1) -> Tensor:
    """Transposed 3D convolution; weight is Cin x Cout x k x k x k.

    The map is the adjoint of ``conv3d`` with the same weight, stride and
    padding (viewing the weight as a Cout -> Cin convolution).
    """
    if x.ndim != 5:
        raise ValueError(f"conv_transpose3d expects N x C x D x H x W input, got shape {x.shape}")
    cin, cout, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != cin:
        raise ValueError(
            f"conv_transpose3d channel mismatch: input has {x.shape[1]} channels, weight {weight.shape} expects {cin}")
    stride, pad, opad = _triple(stride), _triple(padding), _triple(output_padding)
    n = x.shape[0]
    sp = x.shape[2:]
    out_sp = tuple(conv_transpose_output_size(d, s, p, k, o) for d, s, p, o in zip(sp, stride, pad, opad))
    if any(d <= 0 for d in out_sp):
        raise ValueError(f"conv_transpose3d output size {out_sp} is not positive")
    buf_sp = tuple(max((d - 1) * s + k, p + o) for d, s, p, o in zip(sp, stride, pad, out_sp))

    x2 = x.data.reshape(n, cin, -1)
    w2 = weight.data.reshape(cin, -1)
    cols = np.matmul(w2.T, x2).reshape((n, cout, k ** 3) + sp)
    buf = _scatter(cols, k, stride, buf_sp)
    crop = tuple(slice(p, p + o) for p, o in zip(pad, out_sp))
    out = np.ascontiguousarray(buf[(slice(None), slice(None)) + crop])
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gbuf = np.zeros((n, cout) + buf_sp, dtype=g.dtype)
        gbuf[(slice(None), slice(None)) + crop] = g
        gcols = _gather(gbuf, k, stride, sp).reshape(n, cout * k ** 3, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + SPATIAL)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardisation over the spatial axes (no affine)."""
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return make(y.astype(x.data.dtype, copy=False), (x,), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    c = x.shape[1]
    if slope.shape != (c,):
        raise ValueError(f"prelu slope shape {slope.shape} does not match {c} channels")
    a = slope.data.reshape((1, c) + (1,) * (x.ndim - 2))
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        ga = np.where(pos, 0, g * x.data).sum(axis=reduce_axes) if slope.requires_grad else None
        return gx, ga

    return make(out, (x, slope), backward)


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make(s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-probabilities along axis 1 (classes / channels)."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return make(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    shape = x.shape

    def backward(g):
        return (np.broadcast_to((g / count).reshape(shape[:2] + (1,) * len(axes)), shape),)

    return make(x.data.mean(axis=axes), (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2x2 average pooling with stride 2, ceil mode (partial windows average
    only the voxels they cover)."""
    n, c = x.shape[:2]
    sp = x.shape[2:]
    out_sp = tuple((d + 1) // 2 for d in sp)
    padded = np.zeros((n, c) + tuple(2 * o for o in out_sp), dtype=x.data.dtype)
    padded[:, :, :sp[0], :sp[1], :sp[2]] = x.data
    counts = np.zeros(tuple(2 * o for o in out_sp), dtype=x.data.dtype)
    counts[:sp[0], :sp[1], :sp[2]] = 1
    counts = counts.reshape(out_sp[0], 2, out_sp[1], 2, out_sp[2], 2).sum(axis=(1, 3, 5))
    summed = padded.reshape(n, c, out_sp[0], 2, out_sp[1], 2, out_sp[2], 2).sum(axis=(3, 5, 7))
    out = summed / counts

    def backward(g):
        share = (g / counts)[:, :, :, None, :, None, :, None]
        full = np.broadcast_to(share, (n, c, out_sp[0], 2, out_sp[1], 2, out_sp[2], 2))
        full = full.reshape((n, c) + tuple(2 * o for o in out_sp))
        return (np.ascontiguousarray(full[:, :, :sp[0], :sp[1], :sp[2]]),)

    return make(out, (x,), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def concat_channels(parts: list[Tensor]) -> Tensor:
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)
