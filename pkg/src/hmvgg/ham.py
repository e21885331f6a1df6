"""Hybrid attention: parallel spatial and channel gates fused by a sigmoid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Variable, lift, reshape, sigmoid, tape_of
from .nnops import ArrayOrVar, ConvParams, _value, conv2d, fc, gap
from .errors import ShapeError

MIN_HIDDEN = 4


def hidden_width(channels: int, reduction: int = 16) -> int:
    """Bottleneck width of the channel branch, floored so small models stay trainable."""
    return max(channels // reduction, MIN_HIDDEN)


@dataclass
class HamParams:
    spatial: ConvParams  # C -> 1, 1x1
    fc1_weight: ArrayOrVar  # hidden x C
    fc1_bias: ArrayOrVar
    fc2_weight: ArrayOrVar  # C x hidden
    fc2_bias: ArrayOrVar
    reduction: int = 16

    @property
    def channels(self) -> int:
        return _value(self.fc2_weight).shape[0]

    @classmethod
    def zeros(cls, channels: int, reduction: int = 16) -> "HamParams":
        hid = hidden_width(channels, reduction)
        return cls(
            ConvParams(np.zeros((1, channels, 1, 1)), np.zeros(1)),
            np.zeros((hid, channels)), np.zeros(hid),
            np.zeros((channels, hid)), np.zeros(channels),
            reduction,
        )


@dataclass
class HamTrace:
    S: Variable
    S_L: Variable
    A: Variable
    W: Variable
    C_R: Variable
    H_out: Variable


def _check(R: Variable, p: HamParams) -> None:
    if R.value.ndim != 4:
        raise ShapeError(f"attention input must be N x C x H x W, got {R.shape}")
    if R.shape[1] != p.channels:
        raise ShapeError(f"attention params expect {p.channels} channels, input has {R.shape[1]}")
    if _value(p.spatial.weight).shape[:2] != (1, p.channels):
        raise ShapeError("spatial attention conv must map C channels to 1")


def spatial_attention(R: ArrayOrVar, p: HamParams) -> tuple[Variable, Variable]:
    """S = sigmoid(conv1x1(R)) in N x 1 x H x W; S_L = R * S broadcast over channels."""
    R = lift(R, tape_of(R, p.spatial.weight))
    _check(R, p)
    S = sigmoid(conv2d(R, p.spatial))
    return S, R * S


def channel_attention(R: ArrayOrVar, p: HamParams) -> tuple[Variable, Variable, Variable]:
    """A = gap(R); W = sigmoid(fc2(relu(fc1(A)))); C_R = W * R broadcast over H x W."""
    R = lift(R, tape_of(R, p.fc1_weight))
    _check(R, p)
    n, c = R.shape[:2]
    A = gap(R)
    hidden = fc(reshape(A, (n, c)), p.fc1_weight, p.fc1_bias).relu()
    W = reshape(sigmoid(fc(hidden, p.fc2_weight, p.fc2_bias)), (n, c, 1, 1))
    return A, W, W * R


def ham_forward(R: ArrayOrVar, p: HamParams) -> HamTrace:
    """H = R * sigmoid(S_L + C_R), with every intermediate kept for inspection."""
    R = lift(R, tape_of(R, p.spatial.weight, p.fc1_weight))
    S, S_L = spatial_attention(R, p)
    A, W, C_R = channel_attention(R, p)
    H = R * sigmoid(S_L + C_R)
    return HamTrace(S, S_L, A, W, C_R, H)
