"""Registered gradient-check suite covering every operator and block.

Each case builds fixed-seed inputs and parameters at the requested
precision and compares taped gradients of a weighted-sum scalarization
against central differences. In float32 mode the finite differences run
through a float64 twin built from the same parameter values, so the
single-precision backward pass is measured against the true derivative
rather than against single-precision evaluation noise. Thresholds:
1e-3 in float32, 1e-6 in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, default_eps, grad_check, resample_away_from_kinks
from .blocks import (ParamStore, csff_apply, hin_block_forward, make_csff,
                     make_hin_block, make_res_block, make_sam,
                     res_block_forward, sam_forward)
from .model import HinetConfig, build
from .ops import (ConvSpec, add, batch_norm, channel_concat, channel_split,
                  conv2d, conv_transpose2d, group_norm, instance_half_norm,
                  instance_norm, layer_norm, leaky_relu, mul, sigmoid, sum_all)
from .tensor import RngState, Tensor
from .train import psnr_loss, psnr_term

THRESHOLDS = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


@dataclass
class CheckResult:
    name: str
    dtype: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


@dataclass
class CaseInstance:
    f: callable
    x: Tensor
    params: list = field(default_factory=list)
    eps: float | None = None        # override of the dtype default step
    param_eps: float | None = None  # separate step for parameter checks


def _draw(rng: RngState, shape, mean, std, dtype) -> np.ndarray:
    """Draw in float32 then cast, so twin instances share exact values."""
    return rng.normal(shape, mean, std, dtype=np.float32).astype(dtype)


def _udraw(rng: RngState, shape, lo, hi, dtype) -> np.ndarray:
    return rng.uniform(shape, lo, hi, dtype=np.float32).astype(dtype)


def _weights_for(shape, rng, dtype) -> Tensor:
    """Fixed +-1-ish weights so the scalarization has O(1) gradients."""
    signs = np.where(rng.uniform(tuple(shape)) < 0.5, -1.0, 1.0).astype(np.float32)
    mags = rng.uniform(tuple(shape), 0.5, 1.5, dtype=np.float32)
    return Tensor((signs * mags).astype(dtype), _checked=True)


def _scalarize(out, weights) -> Tensor:
    return sum_all(mul(out, weights))


def _sum2(a, ua, b, ub):
    return add(sum_all(mul(a, ua)), sum_all(mul(b, ub)))


def _param(name, data) -> Parameter:
    return Parameter(name, Tensor(data, _checked=True))


# -- cases (each builder is deterministic per dtype) --------------------

def case_conv2d(dtype) -> CaseInstance:
    rng = RngState(11)
    spec = ConvSpec(3, 4, 3, 1, 1, True)
    w = _param("w", _draw(rng, (4, 3, 3, 3), 0.0, 0.3, dtype))
    b = _param("b", _draw(rng, (1, 4, 1, 1), 0.0, 0.1, dtype))
    x = Tensor(_draw(rng, (2, 3, 6, 6), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 4, 6, 6), rng, dtype)
    return CaseInstance(lambda v: _scalarize(conv2d(v, w, b, spec), u), x, [w, b])


def case_conv2d_strided(dtype) -> CaseInstance:
    rng = RngState(12)
    spec = ConvSpec(2, 3, 4, 2, 1, False)
    w = _param("w", _draw(rng, (3, 2, 4, 4), 0.0, 0.3, dtype))
    x = Tensor(_draw(rng, (2, 2, 8, 8), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 3, 4, 4), rng, dtype)
    return CaseInstance(lambda v: _scalarize(conv2d(v, w, None, spec), u), x, [w])


def case_conv_transpose2d(dtype) -> CaseInstance:
    rng = RngState(13)
    spec = ConvSpec(4, 2, 2, 2, 0, True)
    w = _param("w", _draw(rng, (4, 2, 2, 2), 0.0, 0.3, dtype))
    b = _param("b", _draw(rng, (1, 2, 1, 1), 0.0, 0.1, dtype))
    x = Tensor(_draw(rng, (2, 4, 3, 3), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 2, 6, 6), rng, dtype)
    return CaseInstance(lambda v: _scalarize(conv_transpose2d(v, w, b, spec), u),
                        x, [w, b])


def case_leaky_relu(dtype) -> CaseInstance:
    rng = RngState(14)
    # margin fixed across precisions so the float32/float64 twins share x
    margin = 10.0 * default_eps(np.float32) * 2.0
    x = resample_away_from_kinks(rng, (2, 3, 5, 5), margin, dtype=np.float32).astype(dtype)
    u = _weights_for((2, 3, 5, 5), rng, dtype)
    return CaseInstance(lambda v: _scalarize(leaky_relu(v, 0.2), u), x, [])


def case_sigmoid(dtype) -> CaseInstance:
    rng = RngState(15)
    x = Tensor(_draw(rng, (2, 3, 5, 5), 0.0, 1.5, dtype), _checked=True)
    u = _weights_for((2, 3, 5, 5), rng, dtype)
    return CaseInstance(lambda v: _scalarize(sigmoid(v), u), x, [])


def _norm_instance(seed, dtype, fn, affine_channels=6) -> CaseInstance:
    rng = RngState(seed)
    g = _param("g", _draw(rng, (1, affine_channels, 1, 1), 1.0, 0.2, dtype))
    b = _param("b", _draw(rng, (1, affine_channels, 1, 1), 0.0, 0.2, dtype))
    x = Tensor(_draw(rng, (2, 6, 5, 5), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 6, 5, 5), rng, dtype)
    return CaseInstance(lambda v: _scalarize(fn(v, g, b), u), x, [g, b])


def case_instance_norm(dtype) -> CaseInstance:
    return _norm_instance(16, dtype, instance_norm)


def case_layer_norm(dtype) -> CaseInstance:
    return _norm_instance(17, dtype, layer_norm)


def case_group_norm(dtype) -> CaseInstance:
    return _norm_instance(18, dtype, lambda x, g, b: group_norm(x, g, b, 3))


def case_batch_norm_train(dtype) -> CaseInstance:
    def bn(x, g, b):
        state = {"momentum": 0.1,
                 "mean": np.zeros(6, dtype=np.float32),
                 "var": np.ones(6, dtype=np.float32)}
        return batch_norm(x, g, b, state, train=True)

    return _norm_instance(19, dtype, bn)


def case_instance_half_norm(dtype) -> CaseInstance:
    return _norm_instance(20, dtype, instance_half_norm, affine_channels=3)


def case_split_concat(dtype) -> CaseInstance:
    rng = RngState(21)
    x = Tensor(_draw(rng, (2, 4, 4, 4), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 4, 4, 4), rng, dtype)

    def f(v):
        a, b = channel_split(v)
        return _scalarize(channel_concat(sigmoid(a), b), u)

    return CaseInstance(f, x, [])


def _cast_store(store: ParamStore, dtype) -> None:
    if np.dtype(dtype) != np.float32:
        for p in store.params.values():
            p.assign(p.value.astype(dtype))


def case_hin_block(dtype) -> CaseInstance:
    rng = RngState(22)
    store = ParamStore()
    block = make_hin_block(store, "blk", 8, 8, rng.child(1), use_hin=True)
    _cast_store(store, dtype)
    x = Tensor(_draw(rng, (2, 8, 8, 8), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((2, 8, 8, 8), rng, dtype)
    return CaseInstance(lambda v: _scalarize(hin_block_forward(v, block), u), x,
                        [block.conv1.weight, block.norm_params["gamma"]])


def case_res_block(dtype) -> CaseInstance:
    rng = RngState(23)
    store = ParamStore()
    block = make_res_block(store, "rb", 6, rng.child(1))
    _cast_store(store, dtype)
    x = Tensor(_draw(rng, (1, 6, 6, 6), 0.0, 1.0, dtype), _checked=True)
    u = _weights_for((1, 6, 6, 6), rng, dtype)
    return CaseInstance(lambda v: _scalarize(res_block_forward(v, block), u), x,
                        [block.conv1.weight])


def case_sam(dtype) -> CaseInstance:
    rng = RngState(24)
    store = ParamStore()
    sam = make_sam(store, "sam", 6, 3, rng.child(1))
    _cast_store(store, dtype)
    img = Tensor(_udraw(rng, (1, 3, 6, 6), 0.0, 1.0, dtype), _checked=True)
    x = Tensor(_draw(rng, (1, 6, 6, 6), 0.0, 1.0, dtype), _checked=True)
    uf = _weights_for((1, 6, 6, 6), rng, dtype)
    ui = _weights_for((1, 3, 6, 6), rng, dtype)

    def f(v):
        feats, restored = sam_forward(v, img, sam)
        return _sum2(feats, uf, restored, ui)

    return CaseInstance(f, x, [sam.feat_conv.weight, sam.mask_conv.weight])


def case_csff(dtype) -> CaseInstance:
    rng = RngState(25)
    store = ParamStore()
    csff = make_csff(store, "csff", [4, 8], rng.child(1))
    _cast_store(store, dtype)
    e0 = Tensor(_draw(rng, (1, 4, 6, 6), 0.0, 1.0, dtype), _checked=True)
    d0 = Tensor(_draw(rng, (1, 4, 6, 6), 0.0, 1.0, dtype), _checked=True)
    e1 = Tensor(_draw(rng, (1, 8, 3, 3), 0.0, 1.0, dtype), _checked=True)
    d1 = Tensor(_draw(rng, (1, 8, 3, 3), 0.0, 1.0, dtype), _checked=True)
    u0 = _weights_for((1, 4, 6, 6), rng, dtype)
    u1 = _weights_for((1, 8, 3, 3), rng, dtype)

    def f(v):
        adds = csff_apply([v, e1], [d0, d1], csff)
        return _sum2(adds[0], u0, adds[1], u1)

    return CaseInstance(f, e0, [csff.enc_convs[0].weight, csff.dec_convs[1].weight])


def case_psnr_loss(dtype) -> CaseInstance:
    rng = RngState(26)
    target = Tensor(_udraw(rng, (1, 3, 4, 4), 0.2, 0.8, dtype), _checked=True)
    x = Tensor(_udraw(rng, (1, 3, 4, 4), 0.0, 1.0, dtype), _checked=True)
    return CaseInstance(lambda v: psnr_term(v, target), x, [])


def case_tiny_model_loss(dtype) -> CaseInstance:
    rng = RngState(29)
    config = HinetConfig(base_width=4, scale_factor=1.0)
    model = build(config, rng.child(1))
    _cast_store(model.store, dtype)
    x = Tensor(_udraw(rng, (1, 3, 16, 16), 0.1, 0.9, dtype), _checked=True)
    y = Tensor(_udraw(rng, (1, 3, 16, 16), 0.1, 0.9, dtype), _checked=True)

    def f(v):
        out = model.forward(v, train=True)
        return psnr_loss(out, v, y)

    head = model.store.params["stage1.head.weight"]
    gamma = model.store.params["stage2.enc0.norm.gamma"]
    tail = model.store.params["stage2.tail.weight"]
    # deep graph: steps sized to stay under the distance to the nearest
    # internal activation kink while the f64 difference is still well
    # above accumulated rounding (weight perturbations fan out wider,
    # hence the smaller step)
    return CaseInstance(f, x, [head, gamma, tail], eps=2e-5, param_eps=1e-5)


DEFAULT_CASES = [
    ("conv2d", case_conv2d),
    ("conv2d_stride2_k4", case_conv2d_strided),
    ("conv_transpose2d", case_conv_transpose2d),
    ("leaky_relu", case_leaky_relu),
    ("sigmoid", case_sigmoid),
    ("instance_norm", case_instance_norm),
    ("layer_norm", case_layer_norm),
    ("group_norm", case_group_norm),
    ("batch_norm_train", case_batch_norm_train),
    ("instance_half_norm", case_instance_half_norm),
    ("channel_split_concat", case_split_concat),
    ("hin_block", case_hin_block),
    ("res_block", case_res_block),
    ("sam", case_sam),
    ("csff", case_csff),
    ("psnr_loss", case_psnr_loss),
    ("tiny_hinet_psnr_loss", case_tiny_model_loss),
]


def _param_check(inst: CaseInstance, p: Parameter, ref: CaseInstance | None,
                 p_ref: Parameter | None) -> float:
    saved = p.value

    def f_p(v):
        p.assign(v)
        try:
            return inst.f(inst.x)
        finally:
            p.assign(saved)

    f_pr = None
    if ref is not None:
        saved_r = p_ref.value

        def f_pr(v):
            p_ref.assign(v)
            try:
                return ref.f(ref.x)
            finally:
                p_ref.assign(saved_r)

    return grad_check(f_p, p.value, eps=inst.param_eps or inst.eps, f_ref=f_pr)


def run_case(builder, dtype) -> float:
    """Worst relative error over the input and the case's parameters."""
    dt = np.dtype(dtype)
    inst = builder(dt)
    ref = builder(np.float64) if dt == np.float32 else None
    err = grad_check(inst.f, inst.x, eps=inst.eps,
                     f_ref=(ref.f if ref is not None else None))
    for idx, p in enumerate(inst.params):
        p_ref = ref.params[idx] if ref is not None else None
        err = max(err, _param_check(inst, p, ref, p_ref))
    return err


def run_suite(dtypes=(np.float32, np.float64), cases=None) -> list:
    """Run every case at every precision; returns CheckResult list."""
    cases = DEFAULT_CASES if cases is None else cases
    results = []
    for dtype in dtypes:
        dt = np.dtype(dtype)
        threshold = THRESHOLDS[dt]
        for name, builder in cases:
            err = run_case(builder, dt)
            results.append(CheckResult(name, dt.name, float(err), threshold))
    return results
