"""Gradient-check suite: every differentiable op against central differences.

Probe points are fixed-seed and biased away from relu kinks and pooling ties
so the finite-difference comparison is numerically meaningful. The end-to-end
entry differentiates the Dice loss through a depth-1 gated U-Net with respect
to every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import soft_dice_loss
from .model import AttentionUNet, ModelConfig
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    expand_channels,
    grad_check,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    upsample2d,
)

PRIMITIVE_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _projected(op):
    def wrap(*tensors):
        out = op(*tensors)
        r = Tensor(np.random.default_rng(4242).normal(size=out.shape))
        return mul(out, r).sum()
    return wrap


def _end_to_end_error() -> float:
    model = AttentionUNet(ModelConfig(depth=1, base_channels=4, init_seed=2024))
    rng = np.random.default_rng(321)
    # keep pre-activations clear of relu kinks at the probe point
    for p in model.parameters().values():
        p.data += rng.uniform(0.05, 0.15, p.shape) * np.where(p.data < 0, -1.0, 1.0)
    x = Tensor(rng.uniform(0.2, 0.8, (1, 1, 8, 8)))
    t = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.6).astype(float))
    params = list(model.parameters().values())
    return grad_check(lambda *_: soft_dice_loss(model.forward(x), t), params)


def gradient_check_report(fault_op: str | None = None) -> list[CheckResult]:
    """Run all gradient checks, optionally with an injected backward fault."""
    rng = np.random.default_rng(777)
    results: list[CheckResult] = []

    def run(name, op, inputs, tolerance=PRIMITIVE_TOLERANCE):
        err = grad_check(_projected(op), inputs)
        results.append(CheckResult(name, err, tolerance))

    prev_fault = T._fault_op
    T._fault_op = fault_op
    try:
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        run("conv2d", lambda *t: conv2d(t[0], t[1], t[2], stride=2, padding=1),
            [x, w, b])

        pooled = rng.normal(size=(1, 2, 4, 4))
        pooled += np.arange(pooled.size).reshape(pooled.shape) * 1e-3
        run("maxpool2d", maxpool2d, [Tensor(pooled, requires_grad=True)])

        up = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        run("upsample2d_nearest", lambda t: upsample2d(t, "nearest"), [up])
        run("upsample2d_bilinear", lambda t: upsample2d(t, "bilinear"), [up])

        off = np.sign(rng.normal(size=(2, 8))) * rng.uniform(0.2, 1.0, (2, 8))
        run("relu", relu, [Tensor(off, requires_grad=True)])
        run("sigmoid", sigmoid, [Tensor(rng.normal(size=(2, 8)), requires_grad=True)])

        a4 = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        bias = Tensor(rng.normal(size=3), requires_grad=True)
        run("add", lambda u, v: u + v, [a4, bias])
        run("mul", mul, [Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True),
                         Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)])
        run("concat_channels",
            lambda u, v: concat_channels([u, v]),
            [Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True),
             Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)])
        run("expand_channels", lambda t: expand_channels(t, 4),
            [Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)])
        run("sum", lambda t: t.sum(),
            [Tensor(rng.normal(size=(3, 3)), requires_grad=True)])
        run("div", lambda u, v: u / v,
            [Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True),
             Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)])

        results.append(CheckResult("dice_attention_unet_end_to_end",
                                   _end_to_end_error(), END_TO_END_TOLERANCE))
    finally:
        T._fault_op = prev_fault
    return results
