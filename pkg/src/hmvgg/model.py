"""VGG backbone and the full HM-VGG network.

Parameters live in a flat, ordered ``dict[str, ndarray]`` whose keys and
shapes are fully determined by :class:`ModelConfig` (see
:func:`param_shapes`).  Names ending in ``running_mean``/``running_var`` are
batch-norm buffers; every other entry is learnable.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .autograd import Tape, Variable, lift, reshape
from .errors import CheckpointError, ConfigError, ShapeError
from .ham import HamParams, HamTrace, ham_forward, hidden_width
from .mlrm import DILATIONS, FusionFeature, MlrmParams, mlrm_forward
from .nnops import BatchNormState, ConvParams, batchnorm, conv2d, fc, gap, maxpool2d, upsample_nearest

Params = dict[str, np.ndarray]

CKPT_MAGIC = b"HMVK"
CKPT_VERSION = 1
BLOCK_DEPTHS = (2, 2, 3, 3, 3)
BUFFER_SUFFIXES = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    input_size: tuple[int, int] = (224, 224)
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    head_hidden: int = 64
    classes: int = 3
    ham_reduction: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset that keeps every structural ratio of the default network."""
        base = dict(input_size=(32, 32), widths=(4, 8, 16, 32, 32), head_hidden=8)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        h, w = self.input_size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} must be a positive multiple of 32")
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ConfigError(f"widths must be five positive ints, got {self.widths}")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.head_hidden < 1 or self.ham_reduction < 1:
            raise ConfigError("head_hidden and ham_reduction must be positive")

    def to_text(self) -> str:
        h, w = self.input_size
        return (
            f"input_channels={self.input_channels}\n"
            f"input_size={h}x{w}\n"
            f"widths={','.join(str(v) for v in self.widths)}\n"
            f"head_hidden={self.head_hidden}\n"
            f"classes={self.classes}\n"
            f"ham_reduction={self.ham_reduction}\n"
        )

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(items) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, raw in items.items():
                if key == "input_size":
                    parts = raw.lower().replace(",", "x").split("x")
                    kwargs[key] = (int(parts[0]), int(parts[-1]))
                elif key == "widths":
                    kwargs[key] = tuple(int(v) for v in raw.split(","))
                else:
                    kwargs[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad model config value: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        items = {}
        for line in text.splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                items[key.strip()] = val.strip()
        return cls.from_items(items)


@dataclass
class FeaturePyramid:
    R3: Variable
    R4: Variable
    R5: Variable


# ------------------------------------------------------------------ params

def _conv_bn_shapes(prefix: str, cin: int, cout: int, k: int = 3) -> dict[str, tuple]:
    return {
        f"{prefix}.weight": (cout, cin, k, k),
        f"{prefix}.bias": (cout,),
        f"{prefix}.bn.gamma": (cout,),
        f"{prefix}.bn.beta": (cout,),
        f"{prefix}.bn.running_mean": (cout,),
        f"{prefix}.bn.running_var": (cout,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in checkpoint order."""
    shapes: dict[str, tuple] = {}
    w = config.widths
    cin = config.input_channels
    for b, depth in enumerate(BLOCK_DEPTHS, start=1):
        for j in range(1, depth + 1):
            shapes.update(_conv_bn_shapes(f"backbone.b{b}.c{j}", cin, w[b - 1]))
            cin = w[b - 1]
    for level in (3, 4, 5):
        c = w[level - 1]
        hid = hidden_width(c, config.ham_reduction)
        shapes.update({
            f"ham{level}.spatial.weight": (1, c, 1, 1),
            f"ham{level}.spatial.bias": (1,),
            f"ham{level}.fc1.weight": (hid, c),
            f"ham{level}.fc1.bias": (hid,),
            f"ham{level}.fc2.weight": (c, hid),
            f"ham{level}.fc2.bias": (c,),
        })
    top = w[4]
    shapes.update(_conv_bn_shapes("lateral4.c1", w[3], top))
    shapes.update(_conv_bn_shapes("lateral3.c1", w[2], top))
    shapes.update(_conv_bn_shapes("lateral3.c2", top, top))
    for stage in (1, 2):
        for d in DILATIONS:
            shapes.update(_conv_bn_shapes(f"mlrm{stage}.branch{d}", top, top))
        shapes[f"mlrm{stage}.fuse.weight"] = (top, top * len(DILATIONS), 1, 1)
        shapes[f"mlrm{stage}.fuse.bias"] = (top,)
    shapes["global.weight"] = (top, top, 1, 1)
    shapes["global.bias"] = (top,)
    shapes["head.fc1.weight"] = (config.head_hidden, top)
    shapes["head.fc1.bias"] = (config.head_hidden,)
    shapes["head.fc2.weight"] = (config.classes, config.head_hidden)
    shapes["head.fc2.bias"] = (config.classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def learnable_names(params: Params) -> list[str]:
    return [k for k in params if not is_buffer(k)]


def init_params(config: ModelConfig, seed: int) -> Params:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf in ("gamma", "running_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# ----------------------------------------------------------------- forward

class _Binder:
    """Wraps stored parameters as tape leaves and collects batch-norm updates."""

    def __init__(self, tape: Tape, params: Params, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.tape = tape
        self.params = params
        self.mode = mode
        self.vars: dict[str, Variable] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def var(self, name: str) -> Variable:
        if name not in self.vars:
            try:
                value = self.params[name]
            except KeyError:
                raise ShapeError(f"missing parameter {name!r}") from None
            self.vars[name] = self.tape.leaf(value, requires_grad=True)
        return self.vars[name]

    def conv(self, prefix: str, padding: int = 0, dilation: int = 1) -> ConvParams:
        return ConvParams(self.var(f"{prefix}.weight"), self.var(f"{prefix}.bias"),
                          padding=padding, dilation=dilation)

    def bn(self, prefix: str) -> BatchNormState:
        state = BatchNormState(
            self.var(f"{prefix}.bn.gamma"), self.var(f"{prefix}.bn.beta"),
            self.params[f"{prefix}.bn.running_mean"].copy(),
            self.params[f"{prefix}.bn.running_var"].copy(),
            mode=self.mode,
        )
        self.bn_states[prefix] = state
        return state

    def conv3(self, x: Variable, prefix: str) -> Variable:
        """3x3 convolution, batch norm, relu."""
        return batchnorm(conv2d(x, self.conv(prefix, padding=1)), self.bn(prefix)).relu()

    def ham(self, level: int, reduction: int) -> HamParams:
        p = f"ham{level}"
        return HamParams(self.conv(f"{p}.spatial"), self.var(f"{p}.fc1.weight"), self.var(f"{p}.fc1.bias"),
                         self.var(f"{p}.fc2.weight"), self.var(f"{p}.fc2.bias"), reduction)

    def mlrm(self, stage: int) -> MlrmParams:
        p = f"mlrm{stage}"
        return MlrmParams(
            [self.conv(f"{p}.branch{d}", padding=d, dilation=d) for d in DILATIONS],
            [self.bn(f"{p}.branch{d}") for d in DILATIONS],
            self.conv(f"{p}.fuse"),
        )

    def buffer_updates(self) -> Params:
        out: Params = {}
        for prefix, state in self.bn_states.items():
            out[f"{prefix}.bn.running_mean"] = state.running_mean
            out[f"{prefix}.bn.running_var"] = state.running_var
        return out


@dataclass
class ForwardResult:
    logits: Variable
    tape: Tape
    pyramid: FeaturePyramid
    traces: dict[int, HamTrace]
    fusions: list[FusionFeature]
    param_vars: dict[str, Variable]
    buffers: Params = field(default_factory=dict)

    def gradients(self, grads: dict[int, np.ndarray]) -> Params:
        """Map a :func:`~hmvgg.autograd.backward` result onto parameter names."""
        return {name: grads[v.id] for name, v in self.param_vars.items()}

    def activation(self, tag: str) -> Variable:
        table = {
            "R3": self.pyramid.R3, "R4": self.pyramid.R4, "R5": self.pyramid.R5,
            "H3": self.traces[3].H_out, "H4": self.traces[4].H_out, "H5": self.traces[5].H_out,
            "M1": self.fusions[0].value, "M2": self.fusions[1].value,
        }
        try:
            return table[tag]
        except KeyError:
            raise ValueError(f"unknown layer tag {tag!r}; expected one of {sorted(table)}") from None


def _input_var(image, tape: Optional[Tape], config: ModelConfig) -> Variable:
    if isinstance(image, Variable):
        x = image
    else:
        x = (tape or Tape()).leaf(T.as_tensor(image), requires_grad=False)
    h, w = config.input_size
    if x.value.ndim != 4 or x.shape[1:] != (config.input_channels, h, w):
        raise ShapeError(f"input must be N x {config.input_channels} x {h} x {w}, got {x.shape}")
    return x


def _backbone(x: Variable, b: _Binder) -> FeaturePyramid:
    kept = {}
    for blk, depth in enumerate(BLOCK_DEPTHS, start=1):
        for j in range(1, depth + 1):
            x = b.conv3(x, f"backbone.b{blk}.c{j}")
        x = maxpool2d(x)
        kept[blk] = x
    return FeaturePyramid(kept[3], kept[4], kept[5])


def backbone_forward(image, params: Params, config: ModelConfig, mode: str = "eval") -> FeaturePyramid:
    """Five VGG blocks of 3x3 conv + BN + relu with 2x2 max pooling; returns the last three."""
    x = _input_var(image, None, config)
    return _backbone(x, _Binder(x.tape, params, mode))


def hmvgg_forward(image, params: Params, config: ModelConfig, mode: str = "eval",
                  tape: Optional[Tape] = None) -> ForwardResult:
    """Full network: attention on R3..R5, two top-down residual fusions, pooled head.

    Train mode updates batch-norm statistics; the new buffers are returned in
    ``result.buffers`` and ``params`` itself is left untouched.
    """
    x = _input_var(image, tape, config)
    b = _Binder(x.tape, params, mode)
    pyr = _backbone(x, b)

    traces = {
        5: ham_forward(pyr.R5, b.ham(5, config.ham_reduction)),
        4: ham_forward(pyr.R4, b.ham(4, config.ham_reduction)),
        3: ham_forward(pyr.R3, b.ham(3, config.ham_reduction)),
    }
    H3, H4, H5 = traces[3].H_out, traces[4].H_out, traces[5].H_out

    lat4 = b.conv3(H4, "lateral4.c1")
    h, w = lat4.shape[2:]
    M1 = mlrm_forward(lat4, upsample_nearest(H5, h, w), b.mlrm(1), "M1")

    lat3 = b.conv3(b.conv3(H3, "lateral3.c1"), "lateral3.c2")
    h, w = lat3.shape[2:]
    M2 = mlrm_forward(lat3, upsample_nearest(M1.value, h, w), b.mlrm(2), "M2")

    n, c = M2.value.shape[:2]
    glob = conv2d(gap(pyr.R5), b.conv("global"))
    fused = reshape(gap(M2.value) + glob, (n, c))
    hidden = fc(fused, b.var("head.fc1.weight"), b.var("head.fc1.bias")).relu()
    logits = fc(hidden, b.var("head.fc2.weight"), b.var("head.fc2.bias"))

    return ForwardResult(logits, x.tape, pyr, traces, [M1, M2], b.vars, b.buffer_updates())


def predict(params: Params, config: ModelConfig, images: np.ndarray) -> np.ndarray:
    """Eval-mode logits for a batch as a plain array."""
    return hmvgg_forward(images, params, config, "eval").logits.value


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path: Union[str, Path], config: ModelConfig, params: Params) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, params))


def checkpoint_bytes(config: ModelConfig, params: Params) -> bytes:
    shapes = param_shapes(config)
    if list(params) != list(shapes):
        missing = set(shapes) ^ set(params)
        if missing:
            raise CheckpointError(f"parameter set does not match config: {sorted(missing)[:5]}")
    buf = io.BytesIO()
    text = config.to_text().encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        arr = params[name]
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {shape}")
        T.write_tensor(buf, arr)
    return buf.getvalue()


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelConfig, Params]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, Params]:
    f = io.BytesIO(data)
    if f.read(4) != CKPT_MAGIC:
        raise CheckpointError("not an HM-VGG checkpoint (bad magic)")
    try:
        version, tlen = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_text(f.read(tlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        shapes = param_shapes(config)
        if count != len(shapes):
            raise CheckpointError(f"checkpoint holds {count} tensors, config needs {len(shapes)}")
        params: Params = {}
        for name, shape in shapes.items():
            arr = T.read_tensor(f)
            if arr.shape != shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} != expected {shape}")
            params[name] = arr
    except (struct.error, ShapeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return config, params
