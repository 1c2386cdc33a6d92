"""Dense 5-axis feature tensors and the convolution kernels under everything.

Axis convention, used across the whole package:

    feature tensor: (batch N, channel C, height H, width W, band B)
    kernel weight:  (c1, c2, kh, kw, kb)

A kernel is shared between two maps that are exact adjoints of each other:

    conv3d_forward   consumes c2 channels and produces c1
    tconv3d_forward  consumes c1 channels and produces c2

so the decoder's upsampling layers reuse the same weight layout as the
encoder's downsampling layers, and <conv(x), y> == <x, tconv(y)> holds
bit-for-bit in exact arithmetic with zero bias.

Convolution here means cross-correlation (no kernel flip), the usual
deep-learning convention. Compute is chunked im2col plus matmul with
float64 accumulation; results are cast back to the working dtype, so
float32 networks still get stable sums.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Rough per-chunk budget for the materialized column buffer, in float64
# elements (about 64 MB). Keeps peak memory flat on large cubes.
_CHUNK_ELEMS = 8_000_000


class ShapeError(ValueError):
    """Tensor extents disagree with what an operation requires."""


class ConfigError(ValueError):
    """A structural parameter (stride, padding, layer wiring) is invalid."""


class ConvKernel:
    """Weight bank (c1, c2, kh, kw, kb) plus a per-channel bias vector.

    The bias length is checked at the point of use: conv3d adds one bias
    per c1 channel, tconv3d one per c2 channel.
    """

    __slots__ = ("weight", "bias")

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 5:
            raise ShapeError(f"kernel weight must have 5 axes, got {weight.ndim}")
        kh, kw, kb = weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0 or kb % 2 == 0:
            raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}x{kb}")
        if bias.ndim != 1:
            raise ShapeError("bias must be a vector")
        self.weight = weight
        self.bias = bias

    @property
    def ksize(self):
        return self.weight.shape[2:]

    def astype(self, dtype):
        return ConvKernel(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self):
        return ConvKernel(self.weight.copy(), self.bias.copy())


class ConvSpec:
    """Stride and zero-padding triples, ordered (height, width, band)."""

    __slots__ = ("stride", "pad")

    def __init__(self, stride=(1, 1, 1), pad=(1, 1, 1)):
        stride = tuple(int(s) for s in stride)
        pad = tuple(int(p) for p in pad)
        if len(stride) != 3 or any(s < 1 for s in stride):
            raise ConfigError(f"stride must be three positive ints, got {stride}")
        if len(pad) != 3 or any(p < 0 for p in pad):
            raise ConfigError(f"pad must be three non-negative ints, got {pad}")
        self.stride = stride
        self.pad = pad


def he_init(rng, shape, fan_in, dtype=np.float32):
    """Weight array drawn N(0, 2/fan_in). Caller supplies the fan-in
    (the layer's input channels times kernel volume) and pairs the result
    with a zero bias of the length its consuming op expects."""
    std = float(np.sqrt(2.0 / float(fan_in)))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _check_input(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(
            f"{name} must have axes (batch, channel, height, width, band); got {x.ndim} axes"
        )
    return x


def _out_extents(in_hwb, ksize, stride, pad):
    out = []
    for axis, (xlen, k, s, p) in enumerate(zip(in_hwb, ksize, stride, pad)):
        o = (xlen + 2 * p - k) // s + 1
        if o < 1:
            name = "HWB"[axis]
            raise ConfigError(
                f"non-positive output extent on axis {name}: "
                f"input {xlen}, kernel {k}, stride {s}, pad {p}"
            )
        out.append(o)
    return tuple(out)


def _pad_input(x, pad):
    ph, pw, pb = pad
    if ph == 0 and pw == 0 and pb == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pb, pb)))


def _windows(xp, ksize, stride):
    """Strided window view (N, C, Ho, Wo, Bo, kh, kw, kb) of padded input."""
    sh, sw, sb = stride
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))
    return win[:, :, ::sh, ::sw, ::sb]


def _h_chunks(ho, wo, bo, feat):
    """Yield (h0, h1) output-row slabs sized to the column-buffer budget."""
    per_row = max(1, wo * bo * feat)
    step = max(1, _CHUNK_ELEMS // per_row)
    for h0 in range(0, ho, step):
        yield h0, min(ho, h0 + step)


def _forward_core(x, weight, stride, pad, out_dtype):
    """Cross-correlation without bias; float64 accumulation inside."""
    n_n, c2 = x.shape[:2]
    c1 = weight.shape[0]
    ksize = weight.shape[2:]
    ho, wo, bo = _out_extents(x.shape[2:], ksize, stride, pad)
    xp = _pad_input(x, pad)
    win = _windows(xp, ksize, stride)
    feat = c2 * int(np.prod(ksize))
    wmat = weight.reshape(c1, feat).astype(np.float64, copy=False)
    out = np.empty((n_n, c1, ho, wo, bo), dtype=out_dtype)
    for n in range(n_n):
        for h0, h1 in _h_chunks(ho, wo, bo, feat):
            blk = np.asarray(
                win[n, :, h0:h1].transpose(1, 2, 3, 0, 4, 5, 6), dtype=np.float64
            ).reshape((h1 - h0) * wo * bo, feat)
            y = blk @ wmat.T
            out[n, :, h0:h1] = y.reshape(h1 - h0, wo, bo, c1).transpose(3, 0, 1, 2)
    return out


def _input_grad_core(gy, weight, stride, pad, in_hwb, out_dtype):
    """Adjoint of _forward_core: scatter grad_out back onto the input grid."""
    n_n, c1 = gy.shape[:2]
    c2 = weight.shape[1]
    kh, kw, kb = weight.shape[2:]
    sh, sw, sb = stride
    ph, pw, pb = pad
    h, w, b = in_hwb
    ho, wo, bo = gy.shape[2:]
    feat = c2 * kh * kw * kb
    wmat = weight.reshape(c1, feat).astype(np.float64, copy=False)
    gxp = np.zeros((n_n, c2, h + 2 * ph, w + 2 * pw, b + 2 * pb), dtype=np.float64)
    for n in range(n_n):
        for h0, h1 in _h_chunks(ho, wo, bo, feat):
            hh = h1 - h0
            gblk = np.asarray(
                gy[n, :, h0:h1].transpose(1, 2, 3, 0), dtype=np.float64
            ).reshape(hh * wo * bo, c1)
            cols = (gblk @ wmat).reshape(hh, wo, bo, c2, kh, kw, kb)
            cols = cols.transpose(3, 0, 1, 2, 4, 5, 6)
            for di in range(kh):
                for dj in range(kw):
                    for dk in range(kb):
                        gxp[
                            n,
                            :,
                            h0 * sh + di : h0 * sh + di + hh * sh : sh,
                            dj : dj + wo * sw : sw,
                            dk : dk + bo * sb : sb,
                        ] += cols[:, :, :, :, di, dj, dk]
    gx = gxp[:, :, ph : ph + h, pw : pw + w, pb : pb + b]
    return gx.astype(out_dtype, copy=False)


def _weight_grad_core(x, gy, weight_shape, stride, pad):
    """Correlate conv input against grad_out; returns float64 weight grad."""
    n_n, c2 = x.shape[:2]
    c1 = weight_shape[0]
    ksize = weight_shape[2:]
    ho, wo, bo = gy.shape[2:]
    xp = _pad_input(x, pad)
    win = _windows(xp, ksize, stride)
    feat = c2 * int(np.prod(ksize))
    gw = np.zeros((c1, feat), dtype=np.float64)
    for n in range(n_n):
        for h0, h1 in _h_chunks(ho, wo, bo, feat):
            hh = h1 - h0
            blk = np.asarray(
                win[n, :, h0:h1].transpose(1, 2, 3, 0, 4, 5, 6), dtype=np.float64
            ).reshape(hh * wo * bo, feat)
            gblk = np.asarray(
                gy[n, :, h0:h1].transpose(1, 2, 3, 0), dtype=np.float64
            ).reshape(hh * wo * bo, c1)
            gw += gblk.T @ blk
    return gw.reshape(weight_shape)


def conv3d_forward(x, kernel, spec):
    """Strided zero-padded cross-correlation mapping c2 -> c1 channels."""
    x = _check_input(x)
    weight, bias = kernel.weight, kernel.bias
    c1, c2 = weight.shape[:2]
    if x.shape[1] != c2:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel consumes {c2}"
        )
    if bias.shape[0] != c1:
        raise ShapeError(f"bias length {bias.shape[0]} != output channels {c1}")
    out_dtype = np.result_type(x.dtype, weight.dtype)
    y = _forward_core(x, weight, spec.stride, spec.pad, out_dtype)
    y += bias.reshape(1, c1, 1, 1, 1).astype(out_dtype, copy=False)
    return y


def conv3d_backward(x, kernel, spec, grad_out):
    """Gradients of conv3d_forward: (grad_input, grad_weight, grad_bias)."""
    x = _check_input(x)
    grad_out = _check_input(grad_out, "grad_out")
    weight = kernel.weight
    expect = (x.shape[0], weight.shape[0]) + _out_extents(
        x.shape[2:], weight.shape[2:], spec.stride, spec.pad
    )
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expect}")
    gx = _input_grad_core(grad_out, weight, spec.stride, spec.pad, x.shape[2:], x.dtype)
    gw = _weight_grad_core(x, grad_out, weight.shape, spec.stride, spec.pad)
    gb = grad_out.sum(axis=(0, 2, 3, 4), dtype=np.float64)
    return gx, gw.astype(weight.dtype, copy=False), gb.astype(kernel.bias.dtype, copy=False)


def _tconv_out_hwb(in_hwb, ksize, stride, pad):
    """Output extents of the upsampling map, validated against its adjoint.

    The transposed conv targets exactly stride-times the input extent per
    axis; that is only self-consistent when the matching forward conv maps
    the target back to the input extent, which pins pad = (k - 1) / 2.
    """
    out = tuple(s * xlen for xlen, s in zip(in_hwb, stride))
    back = _out_extents(out, ksize, stride, pad)
    if back != tuple(in_hwb):
        raise ConfigError(
            f"stride {stride} / pad {pad} / kernel {ksize} do not form an "
            f"exact up-down pair: {out} maps back to {back}, not {tuple(in_hwb)}"
        )
    return out


def tconv3d_forward(x, kernel, spec):
    """Transposed conv mapping c1 -> c2 channels, upsampling by the stride.

    Exactly the adjoint of conv3d_forward with the same kernel and spec
    (plus a bias per c2 channel), so a stride of s plays the role of the
    fractional stride 1/s: output extents are s times the input's.
    """
    x = _check_input(x)
    weight, bias = kernel.weight, kernel.bias
    c1, c2 = weight.shape[:2]
    if x.shape[1] != c1:
        raise ShapeError(
            f"input has {x.shape[1]} channels but transposed kernel consumes {c1}"
        )
    if bias.shape[0] != c2:
        raise ShapeError(f"bias length {bias.shape[0]} != output channels {c2}")
    out_hwb = _tconv_out_hwb(x.shape[2:], weight.shape[2:], spec.stride, spec.pad)
    out_dtype = np.result_type(x.dtype, weight.dtype)
    y = _input_grad_core(x, weight, spec.stride, spec.pad, out_hwb, out_dtype)
    y += bias.reshape(1, c2, 1, 1, 1).astype(out_dtype, copy=False)
    return y


def tconv3d_backward(x, kernel, spec, grad_out):
    """Gradients of tconv3d_forward: (grad_input, grad_weight, grad_bias)."""
    x = _check_input(x)
    grad_out = _check_input(grad_out, "grad_out")
    weight = kernel.weight
    out_hwb = _tconv_out_hwb(x.shape[2:], weight.shape[2:], spec.stride, spec.pad)
    expect = (x.shape[0], weight.shape[1]) + out_hwb
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expect}")
    gx = _forward_core(grad_out, weight, spec.stride, spec.pad, x.dtype)
    gw = _weight_grad_core(grad_out, x, weight.shape, spec.stride, spec.pad)
    gb = grad_out.sum(axis=(0, 2, 3, 4), dtype=np.float64)
    return gx, gw.astype(weight.dtype, copy=False), gb.astype(kernel.bias.dtype, copy=False)


def activate(x, kind):
    """Elementwise nonlinearity: tanh, sigmoid, or identity (test hook)."""
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        # expit without the scipy import: stable split on sign.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "identity":
        return np.asarray(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def activate_grad(y, grad, kind):
    """Chain grad through the nonlinearity, given its *output* y."""
    if kind == "tanh":
        return grad * (1.0 - y * y)
    if kind == "sigmoid":
        return grad * y * (1.0 - y)
    if kind == "identity":
        return grad
    raise ConfigError(f"unknown activation kind {kind!r}")
