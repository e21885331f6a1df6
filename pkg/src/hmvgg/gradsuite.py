"""Finite-difference gradient checks for every differentiable operation.

Each check reduces an operation's output to a scalar by contracting it with
a fixed random tensor, then compares the tape gradient against central
differences via :func:`~hmvgg.autograd.grad_check`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tape, Variable, analytic_grad, grad_check, reduce_sum
from .ham import HamParams, channel_attention, ham_forward, hidden_width, spatial_attention
from .mlrm import DILATIONS, MlrmParams, context_aggregate, shortcut_fuse
from .model import ModelConfig, hmvgg_forward, init_params
from .nnops import (BatchNormState, ConvParams, batchnorm, conv2d, fc, gap, maxpool2d,
                    softmax_ce, upsample_nearest)

OP_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
EPS = 1e-3
# eps=1e-3 input nudges cross relu kinks inside the deep network; 1e-6 keeps the stencil smooth
MODEL_EPS = 1e-6
# probe points keep every inner relu input at least this far from zero
KINK_MARGIN = 1e-2
# contraction weights are redrawn until no gradient entry falls below this fraction of the rms
GRAD_FLOOR = 1e-2
MAX_REDRAWS = 20


def _contract(weights: np.ndarray, out_fn: Callable[[Variable], Variable]):
    """Scalarize ``out_fn`` by contracting its output with fixed ``weights``."""
    return lambda v: reduce_sum(out_fn(v) * weights)


def _signed_weights(rng, shape):
    # magnitudes bounded away from zero so no output entry drops out of the contraction
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def _well_scaled(g: np.ndarray) -> bool:
    """False when some nonzero gradient entry nearly cancels, where relative error is ill-conditioned."""
    mag = np.abs(g)
    nonzero = mag[mag > 0]
    if nonzero.size == 0:
        return True
    rms = np.sqrt(np.mean(nonzero ** 2))
    return bool(nonzero.min() >= GRAD_FLOOR * rms)


def _off_kink(rng, shape, margin):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape, gap_size):
    # a permutation of well-separated values so no max-pool window ties within eps
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap_size + rng.uniform(0, 0.1 * gap_size, n)).reshape(shape) - n * gap_size / 2


def _ham_params(rng, c, scale=0.5):
    hid = hidden_width(c)
    return dict(
        sw=rng.normal(size=(1, c, 1, 1)) * scale, sb=rng.normal(size=1) * scale,
        w1=rng.normal(size=(hid, c)) * scale, b1=rng.normal(size=hid) * scale,
        w2=rng.normal(size=(c, hid)) * scale, b2=rng.normal(size=c) * scale,
    )


def _ham_from(d, tape: Tape | None = None, wrt: str | None = None, v: Variable | None = None) -> HamParams:
    vals = {k: (v if k == wrt else a) for k, a in d.items()}
    if tape is not None:
        vals = {k: (x if isinstance(x, Variable) else tape.leaf(x, requires_grad=False)) for k, x in vals.items()}
    return HamParams(ConvParams(vals["sw"], vals["sb"]), vals["w1"], vals["b1"], vals["w2"], vals["b2"])


def _mlrm_params(rng, c, scale=0.3):
    d = {}
    for dil in DILATIONS:
        d[f"w{dil}"] = rng.normal(size=(c, c, 3, 3)) * scale
        d[f"b{dil}"] = rng.normal(size=c) * scale
        d[f"g{dil}"] = 1.0 + 0.2 * rng.normal(size=c)
        d[f"be{dil}"] = 0.2 * rng.normal(size=c)
    d["fw"] = rng.normal(size=(c, 3 * c, 1, 1)) * scale
    d["fb"] = rng.normal(size=c) * scale
    d["rm"] = 0.1 * rng.normal(size=c)
    d["rv"] = rng.uniform(0.5, 1.5, size=c)
    return d


def _branch_margin(x, d) -> float:
    """Smallest |pre-activation| feeding a branch relu."""
    p = _mlrm_from(d)
    return min(float(np.abs(batchnorm(conv2d(x, c), bn).value).min())
               for c, bn in zip(p.branches, p.branch_bn))


def _hidden_margin(x, d) -> float:
    n, c = x.shape[:2]
    pooled = x.mean(axis=(2, 3)).reshape(n, c)
    return float(np.abs(pooled @ d["w1"].T + d["b1"]).min())


def _mlrm_from(d, wrt=None, v=None) -> MlrmParams:
    g = lambda k: v if k == wrt else d[k]
    return MlrmParams(
        [ConvParams(g(f"w{dil}"), g(f"b{dil}"), padding=dil, dilation=dil) for dil in DILATIONS],
        [BatchNormState(g(f"g{dil}"), g(f"be{dil}"), d["rm"].copy(), d["rv"].copy(), mode="eval")
         for dil in DILATIONS],
        ConvParams(g("fw"), g("fb")),
    )


def op_checks(seed: int = 0) -> dict[str, tuple[Callable[[Variable], Variable], np.ndarray]]:
    """Named (scalar function, probe point) pairs covering every differentiable op."""
    rng = np.random.default_rng(seed)
    checks = {}

    def add(name, out_fn, x):
        x = np.asarray(x, dtype=np.float64)
        shape = out_fn(Tape().leaf(x)).shape
        for _ in range(MAX_REDRAWS):
            f = _contract(_signed_weights(rng, shape), out_fn)
            if _well_scaled(analytic_grad(f, x)):
                break
        checks[name] = (f, x)

    # elementwise and reductions
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 3, 1))
    add("add.a", lambda v: v + b, a)
    add("mul.a", lambda v: v * b, a)
    add("mul.b_broadcast", lambda v: a * v, b)
    add("sigmoid", lambda v: v.sigmoid(), rng.normal(size=(3, 5)) * 2)
    add("relu", lambda v: v.relu(), _off_kink(rng, (4, 5), 20 * EPS))
    add("mean", lambda v: v.mean(axes=(1,), keep=True), rng.normal(size=(3, 4)))
    m2 = rng.normal(size=(4, 2))
    add("matmul", lambda v: v @ m2, rng.normal(size=(3, 4)))

    # convolution: input, kernel and bias, several geometries
    x = rng.normal(size=(2, 3, 6, 6))
    for k, s, p, d in [(3, 1, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1), (3, 2, 1, 1), (3, 1, 4, 4)]:
        w = rng.normal(size=(2, 3, k, k))
        bias = rng.normal(size=2)
        tag = f"k{k}s{s}p{p}d{d}"
        add(f"conv2d.{tag}.x", lambda v, w=w, bias=bias, s=s, p=p, d=d: conv2d(v, ConvParams(v.tape.leaf(w, False), bias, s, p, d)), x)
        add(f"conv2d.{tag}.kernel", lambda v, bias=bias, s=s, p=p, d=d: conv2d(v.tape.leaf(x, False), ConvParams(v, bias, s, p, d)), w)
        add(f"conv2d.{tag}.bias", lambda v, w=w, s=s, p=p, d=d: conv2d(v.tape.leaf(x, False), ConvParams(w, v, s, p, d)), bias)

    add("maxpool2d", maxpool2d, _distinct(rng, (2, 2, 4, 6), 20 * EPS))
    add("gap", gap, rng.normal(size=(2, 3, 4, 5)))
    add("upsample_nearest.2x2_to_5x3", lambda v: upsample_nearest(v, 5, 3), rng.normal(size=(1, 2, 2, 2)))
    add("upsample_nearest.2x2_to_4x4", lambda v: upsample_nearest(v, 4, 4), rng.normal(size=(2, 2, 2, 2)))

    fw, fb = rng.normal(size=(3, 5)), rng.normal(size=3)
    fx = rng.normal(size=(4, 5))
    add("fc.x", lambda v: fc(v, fw, fb), fx)
    add("fc.weight", lambda v: fc(v.tape.leaf(fx, False), v, fb), fw)
    add("fc.bias", lambda v: fc(v.tape.leaf(fx, False), fw, v), fb)

    bx = rng.normal(size=(3, 2, 3, 3))
    gam, bet = 1.0 + 0.3 * rng.normal(size=2), rng.normal(size=2)
    rmean, rvar = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
    ev = lambda: BatchNormState(gam, bet, rmean.copy(), rvar.copy(), mode="eval")
    add("batchnorm_eval.x", lambda v: batchnorm(v, ev()), bx)
    add("batchnorm_eval.gamma", lambda v: batchnorm(v.tape.leaf(bx, False), BatchNormState(v, bet, rmean.copy(), rvar.copy(), mode="eval")), gam)
    add("batchnorm_eval.beta", lambda v: batchnorm(v.tape.leaf(bx, False), BatchNormState(gam, v, rmean.copy(), rvar.copy(), mode="eval")), bet)
    add("batchnorm_train.x", lambda v: batchnorm(v, BatchNormState(gam, bet, rmean.copy(), rvar.copy())), bx)

    labels = [0, 2, 1, 2]
    checks["softmax_ce"] = (lambda v: softmax_ce(v, labels), rng.normal(size=(4, 3)) * 2)

    # attention
    c = 8
    while True:
        R = rng.normal(size=(2, c, 3, 4))
        hp = _ham_params(rng, c)
        if _hidden_margin(R, hp) > KINK_MARGIN:
            break
    add("spatial_attention.R", lambda v: spatial_attention(v, _ham_from(hp))[1], R)
    add("spatial_attention.S", lambda v: spatial_attention(v, _ham_from(hp))[0], R)
    add("channel_attention.R", lambda v: channel_attention(v, _ham_from(hp))[2], R)
    add("channel_attention.W", lambda v: channel_attention(v, _ham_from(hp))[1], R)
    add("ham_forward.R", lambda v: ham_forward(v, _ham_from(hp)).H_out, R)
    for key in hp:
        add(f"ham_forward.{key}",
            lambda v, key=key: ham_forward(v.tape.leaf(R, False), _ham_from(hp, v.tape, key, v)).H_out, hp[key])

    # residual fusion
    prev = rng.normal(size=(1, 4, 6, 6))
    while True:
        up = rng.normal(size=(1, 4, 6, 6))
        mp = _mlrm_params(rng, 4)
        if _branch_margin(up, mp) > KINK_MARGIN:
            break
    add("shortcut_fuse.upper", lambda v: shortcut_fuse(v, prev), up)
    add("shortcut_fuse.prev", lambda v: shortcut_fuse(up, v), prev)
    add("context_aggregate.x", lambda v: context_aggregate(v, _mlrm_from(mp)), up)
    for key in [k for k in mp if k not in ("rm", "rv")]:
        add(f"context_aggregate.{key}",
            lambda v, key=key: context_aggregate(v.tape.leaf(up, False), _mlrm_from(mp, key, v)), mp[key])
    return checks


def run_op_suite(seed: int = 0, eps: float = EPS) -> dict[str, float]:
    """Max relative error per check."""
    return {name: grad_check(f, x, eps) for name, (f, x) in op_checks(seed).items()}


def full_model_check(seed: int = 0, eps: float = MODEL_EPS, config: ModelConfig | None = None) -> float:
    """Gradient of a random contraction of the eval-mode logits with respect to the input image."""
    config = config or ModelConfig.desk()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    h, w = config.input_size
    image = rng.normal(size=(1, config.input_channels, h, w))
    weights = rng.normal(size=(1, config.classes))

    def f(v: Variable) -> Variable:
        return reduce_sum(hmvgg_forward(v, params, config, "eval").logits * weights)

    return grad_check(f, image, eps)
