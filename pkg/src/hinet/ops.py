"""Neural operators: convolutions, activations, normalizations, splits.

Every differentiable op computes its output eagerly with numpy and, when
a tape is active, records a backward rule. Ops accept `Tensor` or
`Parameter` inputs interchangeably.

Convolutions are cross-correlations (no kernel flip) over zero-padded
inputs, implemented with an im2col gather and one GEMM; the transposed
convolution is the exact adjoint and shares the conv weight layout
(out_channels, in_channels, k, k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import active_tape, value_of
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2      # negative slope used everywhere in the model
NORM_EPS = 1e-5        # variance guard for every normalization variant

NORM_VARIANTS = ("none", "batch", "layer", "instance", "group",
                 "instance_half", "batch_then_instance_half")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel not in (1, 2, 3, 4):
            raise ShapeError(f"unsupported kernel size {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("invalid stride/padding")

    def out_extent(self, extent: int) -> int:
        out = (extent + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"conv {self.in_channels}->{self.out_channels} k={self.kernel} "
                f"s={self.stride} p={self.padding}: input extent {extent} yields "
                f"empty output")
        return out


@dataclass(frozen=True)
class NormKind:
    """Which normalization fills a block's norm slot."""

    variant: str = "none"
    groups: int = 1

    def __post_init__(self):
        if self.variant not in NORM_VARIANTS:
            raise ShapeError(f"unknown normalization variant {self.variant!r}")
        if self.variant == "group" and self.groups < 1:
            raise ShapeError("group norm needs groups >= 1")


def _tape_record(out, inputs, backward, name):
    t = active_tape()
    if t is not None:
        t.record(out, inputs, backward, name)
    return out


def _same_dtype(*tensors):
    dtypes = {value_of(t).dtype for t in tensors if t is not None}
    if len(dtypes) > 1:
        raise TypeError(f"mixed dtypes in op: {sorted(str(d) for d in dtypes)}")


# -- elementwise and scalar plumbing ----------------------------------

def add(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: shape mismatch {tuple(av.shape)} vs {tuple(bv.shape)}")
    _same_dtype(a, b)
    out = Tensor(av.data + bv.data, _checked=True)
    return _tape_record(out, (a, b), lambda dy: (dy, dy), "add")


def sub(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shape mismatch {tuple(av.shape)} vs {tuple(bv.shape)}")
    _same_dtype(a, b)
    out = Tensor(av.data - bv.data, _checked=True)
    return _tape_record(out, (a, b), lambda dy: (dy, -dy), "sub")


def mul(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shape mismatch {tuple(av.shape)} vs {tuple(bv.shape)}")
    _same_dtype(a, b)
    ad, bd = av.data, bv.data
    out = Tensor(ad * bd, _checked=True)
    return _tape_record(out, (a, b), lambda dy: (dy * bd, dy * ad), "mul")


def scale(x, k: float) -> Tensor:
    xv = value_of(x)
    out = Tensor(xv.data * xv.dtype.type(k), _checked=True)
    return _tape_record(out, (x,), lambda dy: (dy * xv.dtype.type(k),), "scale")


def add_const(x, k: float) -> Tensor:
    xv = value_of(x)
    out = Tensor(xv.data + xv.dtype.type(k), _checked=True)
    return _tape_record(out, (x,), lambda dy: (dy,), "add_const")


def mean_all(x) -> Tensor:
    xv = value_of(x)
    out = Tensor(np.full((1, 1, 1, 1), xv.data.mean(), dtype=xv.dtype), _checked=True)
    n = xv.size
    shape = tuple(xv.shape)

    def bw(dy):
        return (np.broadcast_to(dy / n, shape).astype(xv.dtype, copy=False),)

    return _tape_record(out, (x,), bw, "mean_all")


def sum_all(x) -> Tensor:
    xv = value_of(x)
    out = Tensor(np.full((1, 1, 1, 1), xv.data.sum(), dtype=xv.dtype), _checked=True)
    shape = tuple(xv.shape)

    def bw(dy):
        return (np.broadcast_to(dy, shape).astype(xv.dtype, copy=False),)

    return _tape_record(out, (x,), bw, "sum_all")


def log(x) -> Tensor:
    xv = value_of(x)
    if (xv.data <= 0).any():
        raise FloatingPointError("log: input must be strictly positive")
    out = Tensor(np.log(xv.data), _checked=True)
    return _tape_record(out, (x,), lambda dy: (dy / xv.data,), "log")


def clamp_min(x, floor: float) -> Tensor:
    xv = value_of(x)
    out = Tensor(np.maximum(xv.data, xv.dtype.type(floor)), _checked=True)
    mask = (xv.data > floor).astype(xv.dtype)
    return _tape_record(out, (x,), lambda dy: (dy * mask,), "clamp_min")


# -- activations ------------------------------------------------------

def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    xv = value_of(x)
    xd = xv.data
    out = Tensor(np.where(xd >= 0, xd, xv.dtype.type(slope) * xd), _checked=True)
    gate = np.where(xd >= 0, xv.dtype.type(1), xv.dtype.type(slope))
    return _tape_record(out, (x,), lambda dy: (dy * gate,), "leaky_relu")


def sigmoid(x) -> Tensor:
    xv = value_of(x)
    xd = xv.data
    out_d = np.empty_like(xd)
    pos = xd >= 0
    out_d[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_d[~pos] = ex / (1.0 + ex)
    out = Tensor(out_d, _checked=True)
    return _tape_record(out, (x,), lambda dy: (dy * out_d * (1.0 - out_d),), "sigmoid")


# -- convolution ------------------------------------------------------

def _im2col(xd: np.ndarray, k: int, s: int, p: int, oh: int, ow: int) -> np.ndarray:
    n, c = xd.shape[:2]
    if p:
        xd = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xd[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, n: int, c: int, h: int, w: int,
            k: int, s: int, p: int, oh: int, ow: int) -> np.ndarray:
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
    if p:
        return dxp[:, :, p:p + h, p:p + w]
    return dxp


def _check_conv_weight(weight, spec: ConvSpec, transposed: bool):
    wv = value_of(weight)
    if transposed:
        expect = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    else:
        expect = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if tuple(wv.shape) != expect:
        raise ShapeError(f"conv weight shape {tuple(wv.shape)}, expected {expect}")
    return wv


def _check_conv_bias(bias, spec: ConvSpec):
    if bias is None:
        return None
    bv = value_of(bias)
    if tuple(bv.shape) != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv bias shape {tuple(bv.shape)}, "
                         f"expected (1, {spec.out_channels}, 1, 1)")
    return bv


def conv2d(x, weight, bias, spec: ConvSpec) -> Tensor:
    """Strided cross-correlation with zero padding."""
    xv = value_of(x)
    wv = _check_conv_weight(weight, spec, transposed=False)
    bv = _check_conv_bias(bias, spec)
    _same_dtype(x, weight, bias)
    n, c, h, w = xv.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.out_extent(h), spec.out_extent(w)

    cols = _im2col(xv.data, k, s, p, oh, ow)
    w_mat = wv.data.reshape(spec.out_channels, c * k * k)
    y = np.matmul(w_mat, cols).reshape(n, spec.out_channels, oh, ow)
    if bv is not None:
        y = y + bv.data
    out = Tensor(y, _checked=True)

    def bw(dy):
        dy_mat = dy.reshape(n, spec.out_channels, oh * ow)
        cols_b = _im2col(xv.data, k, s, p, oh, ow)
        dw = np.matmul(dy_mat, cols_b.transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(w_mat.T, dy_mat)
        dx = _col2im(dcols, n, c, h, w, k, s, p, oh, ow)
        db = dy.sum(axis=(0, 2, 3)).reshape(1, spec.out_channels, 1, 1) if bv is not None else None
        return (dx, dw.reshape(wv.shape), db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _tape_record(out, inputs, (lambda dy: bw(dy)[:2]) if bias is None else bw, "conv2d")


def conv_transpose2d(x, weight, bias, spec: ConvSpec) -> Tensor:
    """Adjoint of conv2d: shares the (out, in, k, k) weight of the conv
    it transposes; `spec` describes this op (in_channels = input of the
    transpose). Output spatial extent is (in - 1) * stride + kernel.
    """
    if spec.padding != 0:
        raise ShapeError("conv_transpose2d supports padding 0 only")
    xv = value_of(x)
    wv = _check_conv_weight(weight, spec, transposed=True)
    bv = _check_conv_bias(bias, spec)
    _same_dtype(x, weight, bias)
    n, c, h, w = xv.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, "
                         f"spec expects {spec.in_channels}")
    k, s = spec.kernel, spec.stride
    out_c = spec.out_channels
    oh, ow = (h - 1) * s + k, (w - 1) * s + k

    w_mat = wv.data.reshape(c, out_c * k * k)
    x_mat = xv.data.reshape(n, c, h * w)
    cols = np.matmul(w_mat.T, x_mat)
    y = _col2im(cols, n, out_c, oh, ow, k, s, 0, h, w)
    if bv is not None:
        y = y + bv.data
    out = Tensor(y, _checked=True)

    def bw(dy):
        cols_out = _im2col(dy, k, s, 0, h, w)
        dx = np.matmul(w_mat, cols_out).reshape(n, c, h, w)
        dw = np.matmul(x_mat, cols_out.transpose(0, 2, 1)).sum(axis=0)
        db = dy.sum(axis=(0, 2, 3)).reshape(1, out_c, 1, 1) if bv is not None else None
        return (dx, dw.reshape(wv.shape), db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _tape_record(out, inputs, (lambda dy: bw(dy)[:2]) if bias is None else bw,
                        "conv_transpose2d")


# -- channel split / concat -------------------------------------------

def channel_split(x) -> tuple[Tensor, Tensor]:
    """First and last c/2 channels, in order."""
    xv = value_of(x)
    n, c, h, w = xv.shape
    if c % 2:
        raise ShapeError(f"channel_split needs an even channel count, got {c}")
    half = c // 2

    def slice_op(lo, hi):
        out = Tensor(xv.data[:, lo:hi], _checked=True)

        def bw(dy):
            dx = np.zeros(tuple(xv.shape), dtype=xv.dtype)
            dx[:, lo:hi] = dy
            return (dx,)

        return _tape_record(out, (x,), bw, "channel_slice")

    return slice_op(0, half), slice_op(half, c)


def channel_concat(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    _same_dtype(a, b)
    if (av.shape.n, av.shape.h, av.shape.w) != (bv.shape.n, bv.shape.h, bv.shape.w):
        raise ShapeError(f"channel_concat: spatial/batch mismatch "
                         f"{tuple(av.shape)} vs {tuple(bv.shape)}")
    ca = av.shape.c
    out = Tensor(np.concatenate([av.data, bv.data], axis=1), _checked=True)
    return _tape_record(out, (a, b),
                        lambda dy: (dy[:, :ca].copy(), dy[:, ca:].copy()),
                        "channel_concat")


# -- normalizations ---------------------------------------------------

def _affine_params(gamma, beta, channels):
    gv, bv = value_of(gamma), value_of(beta)
    expect = (1, channels, 1, 1)
    if tuple(gv.shape) != expect or tuple(bv.shape) != expect:
        raise ShapeError(f"affine params must be shaped {expect}, "
                         f"got {tuple(gv.shape)} / {tuple(bv.shape)}")
    return gv, bv


def _stat_norm(x, gamma, beta, eps: float, axes: tuple, name: str) -> Tensor:
    """Normalize over `axes` with per-channel affine; population variance."""
    xv = value_of(x)
    gv, bv = _affine_params(gamma, beta, xv.shape.c)
    _same_dtype(x, gamma, beta)
    xd = xv.data
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = (xd - mu) * inv
    out = Tensor(xhat * gv.data + bv.data, _checked=True)

    def bw(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = dy.sum(axis=(0, 2, 3), keepdims=True)
        dxh = dy * gv.data
        dx = inv * (dxh - dxh.mean(axis=axes, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=axes, keepdims=True))
        return (dx, dgamma, dbeta)

    return _tape_record(out, (x, gamma, beta), bw, name)


def instance_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Per-(instance, channel) normalization over the spatial axes only.

    Statistics never mix across the batch, and the same procedure runs at
    training and inference time.
    """
    return _stat_norm(x, gamma, beta, eps, (2, 3), "instance_norm")


def layer_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Per-instance statistics over (c, h, w); per-channel affine."""
    return _stat_norm(x, gamma, beta, eps, (1, 2, 3), "layer_norm")


def group_norm(x, gamma, beta, groups: int, eps: float = NORM_EPS) -> Tensor:
    xv = value_of(x)
    n, c, h, w = xv.shape
    if c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    gv, bv = _affine_params(gamma, beta, c)
    _same_dtype(x, gamma, beta)
    xd = xv.data.reshape(n, groups, c // groups, h, w)
    axes = (2, 3, 4)
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat5 = (xd - mu) * inv
    xhat = xhat5.reshape(n, c, h, w)
    out = Tensor(xhat * gv.data + bv.data, _checked=True)

    def bw(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = dy.sum(axis=(0, 2, 3), keepdims=True)
        dxh = (dy * gv.data).reshape(n, groups, c // groups, h, w)
        dx5 = inv * (dxh - dxh.mean(axis=axes, keepdims=True)
                     - xhat5 * (dxh * xhat5).mean(axis=axes, keepdims=True))
        return (dx5.reshape(n, c, h, w), dgamma, dbeta)

    return _tape_record(out, (x, gamma, beta), bw, "group_norm")


def batch_norm(x, gamma, beta, running_state: dict, train: bool,
               eps: float = NORM_EPS) -> Tensor:
    """Batch statistics over (n, h, w) with running mean/var for eval.

    Running statistics use the population variance, matching every other
    normalization here. `running_state` holds float arrays "mean"/"var"
    of length c plus "momentum"; it is updated in place during training.
    """
    xv = value_of(x)
    c = xv.shape.c
    gv, bv = _affine_params(gamma, beta, c)
    _same_dtype(x, gamma, beta)
    if running_state is None:
        raise ShapeError("batch_norm requires a running_state dict")
    if train:
        y = _stat_norm(x, gamma, beta, eps, (0, 2, 3), "batch_norm")
        m = xv.dtype.type(running_state.get("momentum", 0.1))
        batch_mean = xv.data.mean(axis=(0, 2, 3))
        batch_var = xv.data.var(axis=(0, 2, 3))
        # updated in place so aliases (param stores, checkpoints) stay live
        running_state["mean"][:] = (1 - m) * running_state["mean"] + m * batch_mean
        running_state["var"][:] = (1 - m) * running_state["var"] + m * batch_var
        return y
    rm = running_state["mean"].reshape(1, c, 1, 1).astype(xv.dtype)
    rv = running_state["var"].reshape(1, c, 1, 1).astype(xv.dtype)
    inv = 1.0 / np.sqrt(rv + xv.dtype.type(eps))
    xhat = (xv.data - rm) * inv
    out = Tensor(xhat * gv.data + bv.data, _checked=True)

    def bw(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = dy.sum(axis=(0, 2, 3), keepdims=True)
        return (dy * gv.data * inv, dgamma, dbeta)

    return _tape_record(out, (x, gamma, beta), bw, "batch_norm_eval")


def instance_half_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Instance-normalize the first c/2 channels, pass the rest through.

    The untouched half keeps its exact bit pattern; gamma/beta cover only
    the normalized half.
    """
    first, second = channel_split(x)
    return channel_concat(instance_norm(first, gamma, beta, eps), second)


def normalize(x, kind: NormKind, params: dict, eps: float = NORM_EPS,
              running_state: dict | None = None, train: bool = True) -> Tensor:
    """Dispatch over the swappable normalization variants.

    Layer norm takes its statistics over (c, h, w) per instance. The
    batch_then_instance_half variant instance-normalizes the first half
    of the channels and batch-normalizes the second half.
    """
    if kind.variant == "none":
        return x
    if kind.variant == "instance":
        return instance_norm(x, params["gamma"], params["beta"], eps)
    if kind.variant == "layer":
        return layer_norm(x, params["gamma"], params["beta"], eps)
    if kind.variant == "group":
        return group_norm(x, params["gamma"], params["beta"], kind.groups, eps)
    if kind.variant == "batch":
        return batch_norm(x, params["gamma"], params["beta"], running_state, train, eps)
    if kind.variant == "instance_half":
        return instance_half_norm(x, params["gamma"], params["beta"], eps)
    if kind.variant == "batch_then_instance_half":
        first, second = channel_split(x)
        left = instance_norm(first, params["in_gamma"], params["in_beta"], eps)
        right = batch_norm(second, params["bn_gamma"], params["bn_beta"],
                           running_state, train, eps)
        return channel_concat(left, right)
    raise ShapeError(f"unknown normalization variant {kind.variant!r}")


# -- padding helpers (inference-side, not differentiable) --------------

def pad_reflect_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, tuple[int, int]]:
    """Reflect-pad h/w up to the next multiple; returns (padded, (ph, pw)).

    Not recorded on the tape: callers must keep training inputs aligned so
    no padding happens under an active tape.
    """
    n, c, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (0, 0)
    if active_tape() is not None:
        raise ShapeError(
            f"input {h}x{w} needs padding to a multiple of {multiple}; "
            f"padding is not differentiable, use aligned sizes for training")
    padded = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return Tensor(padded, _checked=True), (ph, pw)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape.h == h and x.shape.w == w:
        return x
    return Tensor(x.data[:, :, :h, :w], _checked=True)
