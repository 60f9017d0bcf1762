"""Composite building blocks: HIN block, ResBlock, SAM, CSFF, resampling.

Blocks are parameter bundles (dataclasses of `Parameter`s) plus pure
forward functions, so the same code path serves training, inference and
the gradient-check harness. Parameters live in a `ParamStore` keyed by
hierarchical names; the store also owns the running statistics used by
the batch-norm ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, value_of
from .ops import (ConvSpec, NormKind, add, conv2d, conv_transpose2d,
                  instance_half_norm, leaky_relu, mul, normalize, sigmoid,
                  NORM_EPS)
from .tensor import RngState, ShapeError, Tensor


def conv_weight_std(in_channels: int, kernel: int, slope: float = 0.2) -> float:
    """Fan-in Gaussian std matched to the leaky-ReLU gain."""
    fan_in = in_channels * kernel * kernel
    return float(np.sqrt(2.0 / (fan_in * (1.0 + slope * slope))))


@dataclass
class ConvParams:
    spec: ConvSpec
    weight: Parameter
    bias: Parameter | None = None
    transposed: bool = False

    def __call__(self, x) -> Tensor:
        if self.transposed:
            return conv_transpose2d(x, self.weight, self.bias, self.spec)
        return conv2d(x, self.weight, self.bias, self.spec)


class ParamStore:
    """Registry of uniquely named parameters and norm running-stat buffers."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def register(self, param: Parameter) -> Parameter:
        if param.name in self.params:
            raise ShapeError(f"duplicate parameter name {param.name!r}")
        self.params[param.name] = param
        return param

    def conv(self, name: str, spec: ConvSpec, rng: RngState,
             transposed: bool = False) -> ConvParams:
        if transposed:
            shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        else:
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        std = conv_weight_std(spec.in_channels, spec.kernel)
        weight = self.register(Parameter(
            f"{name}.weight", Tensor(rng.normal(shape, 0.0, std), _checked=True)))
        bias = None
        if spec.has_bias:
            bias = self.register(Parameter(
                f"{name}.bias", Tensor.zeros((1, spec.out_channels, 1, 1))))
        return ConvParams(spec, weight, bias, transposed)

    def affine_named(self, gamma_name: str, beta_name: str,
                     channels: int) -> tuple[Parameter, Parameter]:
        gamma = self.register(Parameter(gamma_name, Tensor.full((1, channels, 1, 1), 1.0)))
        beta = self.register(Parameter(beta_name, Tensor.zeros((1, channels, 1, 1))))
        return gamma, beta

    def running_stats(self, name: str, channels: int) -> dict:
        """Running mean/var buffers; the returned state aliases the store's
        arrays, and batch_norm updates them in place."""
        mean = np.zeros(channels, dtype=np.float32)
        var = np.ones(channels, dtype=np.float32)
        self.buffers[f"{name}.running_mean"] = mean
        self.buffers[f"{name}.running_var"] = var
        return {"momentum": 0.1, "mean": mean, "var": var}


# -- HIN block ---------------------------------------------------------

@dataclass
class HinBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    shortcut: ConvParams
    use_hin: bool = False
    norm_kind: NormKind = field(default_factory=NormKind)
    norm_params: dict = field(default_factory=dict)
    norm_state: dict | None = None


def make_hin_block(store: ParamStore, name: str, c_in: int, c_out: int,
                   rng: RngState, use_hin: bool = False,
                   norm_kind: NormKind = NormKind()) -> HinBlockParams:
    conv1 = store.conv(f"{name}.conv1", ConvSpec(c_in, c_out, 3, 1, 1, True), rng)
    conv2 = store.conv(f"{name}.conv2", ConvSpec(c_out, c_out, 3, 1, 1, True), rng)
    shortcut = store.conv(f"{name}.shortcut", ConvSpec(c_in, c_out, 1, 1, 0, True), rng)
    norm_params: dict = {}
    norm_state = None
    if use_hin:
        if c_out % 2:
            raise ShapeError(f"{name}: HIN needs an even output width, got {c_out}")
        g, b = store.affine_named(f"{name}.norm.gamma", f"{name}.norm.beta", c_out // 2)
        norm_params = {"gamma": g, "beta": b}
    elif norm_kind.variant in ("instance", "layer", "group", "batch"):
        if norm_kind.variant == "group" and c_out % norm_kind.groups:
            raise ShapeError(f"{name}: {norm_kind.groups} groups do not divide {c_out}")
        g, b = store.affine_named(f"{name}.norm.gamma", f"{name}.norm.beta", c_out)
        norm_params = {"gamma": g, "beta": b}
        if norm_kind.variant == "batch":
            norm_state = store.running_stats(f"{name}.norm", c_out)
    elif norm_kind.variant == "instance_half":
        if c_out % 2:
            raise ShapeError(f"{name}: half-instance norm needs even width, got {c_out}")
        g, b = store.affine_named(f"{name}.norm.gamma", f"{name}.norm.beta", c_out // 2)
        norm_params = {"gamma": g, "beta": b}
    elif norm_kind.variant == "batch_then_instance_half":
        if c_out % 2:
            raise ShapeError(f"{name}: split norm needs even width, got {c_out}")
        half = c_out // 2
        ig, ib = store.affine_named(f"{name}.norm.in_gamma", f"{name}.norm.in_beta", half)
        bg, bb = store.affine_named(f"{name}.norm.bn_gamma", f"{name}.norm.bn_beta", half)
        norm_params = {"in_gamma": ig, "in_beta": ib, "bn_gamma": bg, "bn_beta": bb}
        norm_state = store.running_stats(f"{name}.norm", half)
    return HinBlockParams(conv1, conv2, shortcut, use_hin, norm_kind,
                          norm_params, norm_state)


def hin_block_forward(x, p: HinBlockParams, train: bool = True) -> Tensor:
    """conv -> (half-IN | swappable norm) -> lrelu -> conv -> lrelu, plus
    a 1x1-projected shortcut."""
    normed = _hin_norm_slot(p.conv1(x), p, train)
    r = leaky_relu(normed)
    r = leaky_relu(p.conv2(r))
    return add(r, p.shortcut(x))


def _hin_norm_slot(x, p: HinBlockParams, train: bool) -> Tensor:
    """The normalization step alone, for instrumentation and tests."""
    if p.use_hin:
        return instance_half_norm(x, p.norm_params["gamma"], p.norm_params["beta"])
    if p.norm_kind.variant == "none":
        return x
    return normalize(x, p.norm_kind, p.norm_params, NORM_EPS, p.norm_state, train)


# -- plain residual block (identity shortcut) --------------------------

@dataclass
class ResBlockParams:
    conv1: ConvParams
    conv2: ConvParams


def make_res_block(store: ParamStore, name: str, channels: int,
                   rng: RngState) -> ResBlockParams:
    conv1 = store.conv(f"{name}.conv1", ConvSpec(channels, channels, 3, 1, 1, True), rng)
    conv2 = store.conv(f"{name}.conv2", ConvSpec(channels, channels, 3, 1, 1, True), rng)
    return ResBlockParams(conv1, conv2)


def res_block_forward(x, p: ResBlockParams) -> Tensor:
    """Two 3x3 convs with leaky ReLUs, no normalization, identity add."""
    r = leaky_relu(p.conv1(x))
    r = leaky_relu(p.conv2(r))
    return add(r, x)


# -- supervised attention module ---------------------------------------

@dataclass
class SamParams:
    feat_conv: ConvParams
    img_conv: ConvParams
    mask_conv: ConvParams


def make_sam(store: ParamStore, name: str, channels: int, img_channels: int,
             rng: RngState) -> SamParams:
    feat = store.conv(f"{name}.feat", ConvSpec(channels, channels, 3, 1, 1, True), rng)
    img = store.conv(f"{name}.img", ConvSpec(channels, img_channels, 3, 1, 1, True), rng)
    mask = store.conv(f"{name}.mask", ConvSpec(img_channels, channels, 3, 1, 1, True), rng)
    return SamParams(feat, img, mask)


def sam_forward(f, x_img, p: SamParams) -> tuple[Tensor, Tensor]:
    """Returns (gated features for the next stage, restored image).

    The restored image is the supervised first-stage output; its sigmoid
    response gates which features flow onward.
    """
    fv, iv = value_of(f), value_of(x_img)
    if (fv.shape.h, fv.shape.w) != (iv.shape.h, iv.shape.w):
        raise ShapeError(f"sam: feature grid {fv.shape.h}x{fv.shape.w} does not match "
                         f"image {iv.shape.h}x{iv.shape.w}")
    restored = add(p.img_conv(f), x_img)
    mask = sigmoid(p.mask_conv(restored))
    features = add(f, mul(mask, p.feat_conv(f)))
    return features, restored


# -- cross-stage feature fusion -----------------------------------------

@dataclass
class CsffParams:
    enc_convs: list
    dec_convs: list


def make_csff(store: ParamStore, name: str, widths: list[int],
              rng: RngState) -> CsffParams:
    enc_convs, dec_convs = [], []
    for k, c in enumerate(widths):
        enc_convs.append(store.conv(f"{name}{k}.enc", ConvSpec(c, c, 3, 1, 1, True), rng))
        dec_convs.append(store.conv(f"{name}{k}.dec", ConvSpec(c, c, 3, 1, 1, True), rng))
    return CsffParams(enc_convs, dec_convs)


def csff_apply(enc1: list, dec1: list, p: CsffParams) -> list:
    """Per-scale additions for the second stage's encoder."""
    if not (len(enc1) == len(dec1) == len(p.enc_convs)):
        raise ShapeError(f"csff: got {len(enc1)} encoder / {len(dec1)} decoder scales, "
                         f"params cover {len(p.enc_convs)}")
    out = []
    for e, d, ce, cd in zip(enc1, dec1, p.enc_convs, p.dec_convs):
        if value_of(e).shape != value_of(d).shape:
            raise ShapeError(f"csff: per-scale shape mismatch "
                             f"{tuple(value_of(e).shape)} vs {tuple(value_of(d).shape)}")
        out.append(add(ce(e), cd(d)))
    return out


# -- resampling wrappers ------------------------------------------------

def make_downsample(store: ParamStore, name: str, c_in: int,
                    c_out: int | None, rng: RngState) -> ConvParams:
    """4x4 stride-2 conv halving h and w; defaults to doubling channels."""
    if c_out is None:
        c_out = 2 * c_in
    return store.conv(name, ConvSpec(c_in, c_out, 4, 2, 1, False), rng)


def make_upsample(store: ParamStore, name: str, c_in: int,
                  c_out: int | None, rng: RngState) -> ConvParams:
    """2x2 stride-2 transposed conv doubling h and w; defaults to halving
    channels."""
    if c_out is None:
        if c_in % 2:
            raise ShapeError(f"{name}: cannot halve odd channel count {c_in}")
        c_out = c_in // 2
    return store.conv(name, ConvSpec(c_in, c_out, 2, 2, 0, True), rng, transposed=True)


def downsample(x, params: ConvParams) -> Tensor:
    xv = value_of(x)
    if xv.shape.h % 2 or xv.shape.w % 2:
        raise ShapeError(f"downsample needs even spatial extents, got "
                         f"{xv.shape.h}x{xv.shape.w}")
    return params(x)


def upsample(x, params: ConvParams) -> Tensor:
    return params(x)
