"""Finite-difference checks over every primitive and composite block.

Shared by ``dalight3d gradcheck`` and the test suite. All learnable tensors
are re-drawn at random first, so zero-initialized paths are exercised too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import grad_check
from .layers import (
    SSFB,
    BlockConfig,
    CrossSliceAttention,
    Downsample,
    GroupNorm,
    InitProjection,
    Layer,
    LightweightBlock,
    Pointwise,
    ScannerAwareNorm,
    SegmentationHead,
    SEBlock,
    SepConv3d,
    SimpleFusion,
    Upsample,
)
from .model import DALightModel, ModelConfig
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def readout(y: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(seed + 7919).normal(size=y.shape) / np.sqrt(y.size)
    return ops.sum(ops.mul(y, Tensor(r)))


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def randomize(layer: Layer, rng, scale=0.5) -> list[Tensor]:
    params = layer.parameters()
    for t in params:
        t.data[...] = rng.normal(scale=scale, size=t.shape)
    return params


# each factory returns (inputs to check, closure producing the pre-readout output)
def _primitive_cases() -> dict[str, Callable]:
    return {
        "conv3d": lambda r: _prim([_p(r, 1, 2, 4, 4, 4), _p(r, 3, 2, 3, 3, 3), _p(r, 3)],
                                  lambda x, w, b: ops.conv3d(x, w, b, 1, 1)),
        "conv3d_stride2": lambda r: _prim([_p(r, 1, 2, 4, 4, 4), _p(r, 2, 2, 3, 3, 3), _p(r, 2)],
                                          lambda x, w, b: ops.conv3d(x, w, b, 2, 1)),
        "depthwise_conv3d": lambda r: _prim([_p(r, 1, 3, 4, 4, 4), _p(r, 3, 3, 3, 3)],
                                            lambda x, w: ops.depthwise_conv3d(x, w, 1, 1)),
        "pointwise_conv3d": lambda r: _prim([_p(r, 1, 3, 2, 3, 2), _p(r, 4, 3), _p(r, 4)], ops.pointwise_conv3d),
        "transposed_conv3d": lambda r: _prim([_p(r, 1, 3, 2, 2, 2), _p(r, 3, 2, 2, 2, 2), _p(r, 2)],
                                             ops.transposed_conv3d),
        "group_norm": lambda r: _prim([_p(r, 1, 4, 2, 3, 2), _p(r, 4), _p(r, 4)],
                                      lambda x, g, b: ops.group_norm(x, 2, g, b)),
        "gelu": lambda r: _prim([_p(r, 4, 5, scale=2.0)], ops.gelu),
        "sigmoid": lambda r: _prim([_p(r, 4, 5, scale=2.0)], ops.sigmoid),
        "softmax_channel": lambda r: _prim([_p(r, 1, 4, 2, 2, 2)], ops.softmax_channel),
        "pool_mean_over_HW": lambda r: _prim([_p(r, 1, 2, 3, 2, 2)], lambda x: ops.pool(x, "mean_over_HW")),
        "pool_global_mean": lambda r: _prim([_p(r, 1, 2, 3, 2, 2)], lambda x: ops.pool(x, "global_mean")),
        "matmul": lambda r: _prim([_p(r, 2, 3, 4), _p(r, 2, 4, 2)], ops.matmul),
        "interpolate_trilinear": lambda r: _prim([_p(r, 1, 2, 2, 3, 2)],
                                                 lambda x: ops.interpolate_trilinear(x, (4, 5, 3))),
        "elementwise_add": lambda r: _prim([_p(r, 1, 2, 3, 2, 2), _p(r, 1, 2, 3)], ops.add),
        "elementwise_mul": lambda r: _prim([_p(r, 1, 2, 3, 2, 2), _p(r, 1, 2)], ops.mul),
        "concat_channels": lambda r: _prim([_p(r, 1, 2, 2, 2, 2), _p(r, 1, 1, 2, 2, 2)],
                                           lambda a, b: ops.concat_channels([a, b])),
        "log": lambda r: _prim([Tensor(r.uniform(0.5, 2.0, (3, 4)), True)], ops.log),
        "div": lambda r: _prim([_p(r, 3, 4), Tensor(r.uniform(1.0, 2.0, (3, 4)), True)], ops.div),
    }


def _prim(inputs, fn):
    return inputs, lambda: fn(*inputs)


def _layer_case(layer: Layer, x_shapes, call, r):
    params = randomize(layer, r)
    xs = [_p(r, *s) for s in x_shapes]
    return xs + params, lambda: call(layer, *xs)


def _block_cases() -> dict[str, Callable]:
    def lwb(r, c_in, c_out, conv_kind, csa):
        cfg = BlockConfig(c_in, c_out, conv_kind, "scanner_aware", csa, 2, 4, 3)
        return _layer_case(LightweightBlock(cfg, r), [(1, c_in, 4, 4, 4)], lambda l, x: l(x, 1), r)

    return {
        "SepConv": lambda r: _layer_case(SepConv3d(2, 3, r), [(1, 2, 4, 4, 4)], lambda l, x: l(x), r),
        "ScannerAwareNorm": lambda r: _layer_case(ScannerAwareNorm(4, 3, groups=2), [(1, 4, 2, 3, 2)],
                                                  lambda l, x: l(x, 2), r),
        "ScannerAwareNorm_default": lambda r: _layer_case(ScannerAwareNorm(4, 3, groups=2), [(1, 4, 2, 3, 2)],
                                                          lambda l, x: l(x, None), r),
        "GroupNorm": lambda r: _layer_case(GroupNorm(4, groups=2), [(1, 4, 2, 3, 2)], lambda l, x: l(x), r),
        "SE": lambda r: _layer_case(SEBlock(4, r, reduction=2), [(1, 4, 2, 3, 2)], lambda l, x: l(x), r),
        "CSA": lambda r: _layer_case(CrossSliceAttention(3, 2, r), [(1, 3, 4, 2, 3)], lambda l, x: l(x), r),
        "SSFB": lambda r: _layer_case(SSFB(2, 3, 2, r), [(1, 2, 2, 3, 2), (1, 3, 2, 3, 2)],
                                      lambda l, a, b: l(a, b), r),
        "SimpleFusion": lambda r: _layer_case(SimpleFusion(2, 2, r), [(1, 2, 2, 2, 2), (1, 2, 2, 2, 2)],
                                              lambda l, a, b: l(a, b), r),
        "LightweightBlock": lambda r: lwb(r, 2, 2, "dense", False),
        "LightweightBlock_sep_csa": lambda r: lwb(r, 2, 2, "separable", True),
        "LightweightBlock_proj": lambda r: lwb(r, 2, 3, "separable", False),
        "InitProjection": lambda r: _layer_case(InitProjection(2, 2, r), [(1, 2, 3, 3, 3)], lambda l, x: l(x), r),
        "Downsample": lambda r: _layer_case(Downsample(2, 2, r), [(1, 2, 4, 4, 4)], lambda l, x: l(x), r),
        "Upsample": lambda r: _layer_case(Upsample(2, 2, r), [(1, 2, 2, 2, 2)], lambda l, x: l(x), r),
        "SegmentationHead": lambda r: _layer_case(SegmentationHead(2, 4, r), [(1, 2, 3, 3, 3)],
                                                  lambda l, x: l(x), r),
        "Pointwise": lambda r: _layer_case(Pointwise(3, 2, r), [(2, 3)], lambda l, x: l(x), r),
    }


def check_entry(name: str, factory: Callable, instances: int = 5, step: float = 1e-3) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(instances):
        inputs, fn = factory(np.random.default_rng(seed))
        worst = max(worst, grad_check(lambda: readout(fn(), seed), inputs, step))
    return CheckResult(name, instances, worst, time.perf_counter() - t0)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(base_width=2, channel_cap=384, bottleneck_width=8, ssfb_rank=2, num_buckets=2)


def end_to_end_check(seed: int = 0, step: float = 1e-3, full: bool = False) -> CheckResult:
    """Whole network on a ``[1, 4, 8, 8, 8]`` input, 2-wide config, loss included.

    By default the checked inputs are the image and the stem parameters: both
    gradients flow back through every layer, and every other parameter tensor
    is covered block by block. ``full=True`` checks all parameters (minutes).
    """
    from .losses import LossConfig, ce_loss, combine, dice_loss, one_hot

    t0 = time.perf_counter()
    r = np.random.default_rng(seed)
    model = DALightModel(tiny_model_config(), seed)
    params = randomize(model, r, scale=0.3)
    x = _p(r, 1, 4, 8, 8, 8)
    y = Tensor(one_hot(r.integers(0, 4, size=(1, 8, 8, 8))))
    checked = [x] + (params if full else model.stem.parameters())

    def closure():
        p = model(x, 1)
        return combine(dice_loss(p, y), ce_loss(p, y), LossConfig())

    err = grad_check(closure, checked, step)
    return CheckResult("end_to_end", 1, err, time.perf_counter() - t0)


def run_suite(instances: int = 5, include_end_to_end: bool = True) -> list[CheckResult]:
    results = [check_entry(n, f, instances) for n, f in _primitive_cases().items()]
    results += [check_entry(n, f, instances) for n, f in _block_cases().items()]
    if include_end_to_end:
        results.append(end_to_end_check())
    return results
