"""Multi-level residual fusion with parallel dilated context branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Variable, concat, lift, tape_of
from .errors import ShapeError
from .nnops import ArrayOrVar, BatchNormState, ConvParams, batchnorm, conv2d

DILATIONS = (1, 2, 4)


@dataclass
class MlrmParams:
    branches: list[ConvParams]  # 3x3, C -> C, one per dilation, ascending
    branch_bn: list[BatchNormState]
    fuse: ConvParams  # 1x1, 3C -> C

    @classmethod
    def zeros(cls, channels: int, mode: str = "eval") -> "MlrmParams":
        """Aggregation weights all zero: the module reduces to its residual path."""
        return cls(
            [ConvParams(np.zeros((channels, channels, 3, 3)), np.zeros(channels), padding=d, dilation=d)
             for d in DILATIONS],
            [BatchNormState.fresh(channels, mode) for _ in DILATIONS],
            ConvParams(np.zeros((channels, channels * len(DILATIONS), 1, 1)), np.zeros(channels)),
        )


@dataclass
class FusionFeature:
    value: Variable
    level: str  # "M1" or "M2"


def shortcut_fuse(upper: ArrayOrVar, prev: ArrayOrVar) -> Variable:
    """Residual shortcut: the lateral feature plus the deeper fused feature."""
    tape = tape_of(upper, prev)
    upper, prev = lift(upper, tape), lift(prev, tape)
    if upper.shape != prev.shape:
        raise ShapeError(f"shortcut operands differ in shape: {upper.shape} vs {prev.shape}")
    return upper + prev


def context_aggregate(sc: ArrayOrVar, p: MlrmParams) -> Variable:
    """sc + fuse(concat(relu(bn(conv_d(sc))) for d in 1, 2, 4))."""
    tape = tape_of(sc, p.fuse.weight)
    sc = lift(sc, tape)
    outs = []
    for conv, bn in zip(p.branches, p.branch_bn):
        y = conv2d(sc, conv)
        if y.shape != sc.shape:
            raise ShapeError(f"dilated branch changed shape {sc.shape} -> {y.shape}")
        outs.append(batchnorm(y, bn).relu())
    return sc + conv2d(concat(outs, axis=1), p.fuse)


def mlrm_forward(upper: ArrayOrVar, prev: ArrayOrVar, p: MlrmParams, level: str = "M1") -> FusionFeature:
    return FusionFeature(context_aggregate(shortcut_fuse(upper, prev), p), level)
