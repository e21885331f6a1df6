"""Optimizers, the training loop, evaluation metrics and config files."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

import numpy as np

from .autograd import backward
from .data import Manifest, load_arrays
from .errors import ConfigError, ShapeError
from .model import ModelConfig, Params, hmvgg_forward, init_params, is_buffer, predict
from .nnops import softmax_ce

log = logging.getLogger(__name__)


# --------------------------------------------------------------- optimizer

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 4

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.batch_size < 1 or self.lr < 0:
            raise ConfigError("batch_size must be >= 1 and lr >= 0")


@dataclass
class OptimState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9  # momentum for sgd
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        beta1 = cfg.beta1 if cfg.optimizer == "adam" else cfg.momentum
        return cls(cfg.optimizer, cfg.lr, beta1, cfg.beta2, cfg.epsilon)


def optimizer_step(params: Params, grads: Params, state: OptimState) -> tuple[Params, OptimState]:
    """Apply one update to every parameter that has a gradient; buffers pass through."""
    state.step += 1
    t = state.step
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if state.kind == "adam":
            m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
            v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        elif state.kind == "sgd":
            vel = state.beta1 * state.m.get(name, 0.0) + g
            state.m[name] = vel
            out[name] = p - state.lr * vel
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")
    return out, state


# ----------------------------------------------------------------- metrics

@dataclass
class Metrics:
    confusion: np.ndarray  # rows = true class, cols = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float

    def lines(self) -> list[str]:
        """``key=value`` lines for machine-readable output."""
        conf = ";".join(",".join(str(int(v)) for v in row) for row in self.confusion)
        out = [f"confusion={conf}"]
        for k in range(len(self.precision)):
            out += [f"precision_{k}={self.precision[k]:.6f}",
                    f"recall_{k}={self.recall[k]:.6f}",
                    f"f1_{k}={self.f1[k]:.6f}"]
        out += [f"macro_precision={self.macro_precision:.6f}",
                f"macro_recall={self.macro_recall:.6f}",
                f"macro_f1={self.macro_f1:.6f}",
                f"accuracy={self.accuracy:.6f}"]
        return out


def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError("true and predicted label vectors differ in length")
    for y in (y_true, y_pred):
        if y.size and (y.min() < 0 or y.max() >= classes):
            raise ValueError(f"labels must lie in [0, {classes})")
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def metrics_from_confusion(conf: np.ndarray) -> Metrics:
    """Per-class and macro-averaged precision/recall/F1 plus accuracy (0 where undefined)."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    precision = _safe_div(tp, conf.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, conf.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = conf.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return Metrics(conf, precision, recall, f1, float(precision.mean()), float(recall.mean()),
                   float(f1.mean()), accuracy)


def compute_metrics(y_true, y_pred, classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, classes))


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    params: Params
    history: list[EpochRecord]


def train_loop(config: ModelConfig, manifest: Manifest, seed: int, epochs: int,
               train_cfg: TrainConfig | None = None) -> TrainResult:
    """Seeded mini-batch training with train-mode batch norm and softmax cross-entropy."""
    train_cfg = train_cfg or TrainConfig()
    if len(manifest) == 0:
        raise ValueError("cannot train on an empty manifest")
    if train_cfg.batch_size > len(manifest):
        raise ValueError(f"batch size {train_cfg.batch_size} exceeds dataset size {len(manifest)}")
    if len(manifest.class_names) != config.classes:
        raise ConfigError(f"manifest has {len(manifest.class_names)} classes, model has {config.classes}")
    x, y = load_arrays(manifest, config)
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_params(config, int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seq)
    state = OptimState.from_config(train_cfg)
    history = []
    bs = train_cfg.batch_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(y))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            res = hmvgg_forward(x[idx], params, config, "train")
            loss = softmax_ce(res.logits, y[idx])
            grads = res.gradients(backward(res.tape, loss))
            grads = {k: g for k, g in grads.items() if not is_buffer(k)}
            params, state = optimizer_step(params, grads, state)
            params.update(res.buffers)
            loss_sum += loss.value.item() * len(idx)
            correct += int((res.logits.value.argmax(axis=1) == y[idx]).sum())
        rec = EpochRecord(epoch, loss_sum / len(y), correct / len(y))
        history.append(rec)
        log.info("epoch %d loss %.6f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
    return TrainResult(params, history)


def history_text(history: list[EpochRecord]) -> str:
    lines = ["epoch\tloss\ttrain_accuracy"]
    lines += [f"{r.epoch}\t{r.loss!r}\t{r.accuracy!r}" for r in history]
    return "\n".join(lines) + "\n"


def write_history(path: Union[str, Path], history: list[EpochRecord]) -> None:
    Path(path).write_text(history_text(history), encoding="utf-8")


def predict_labels(params: Params, config: ModelConfig, x: np.ndarray, batch: int = 16) -> np.ndarray:
    preds = [predict(params, config, x[i:i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(preds)


def evaluate(params: Params, manifest: Manifest, config: ModelConfig) -> Metrics:
    """Eval-mode predictions on every sample, summarised as Metrics."""
    if len(manifest.class_names) != config.classes:
        raise ConfigError(f"manifest has {len(manifest.class_names)} classes, model has {config.classes}")
    x, y = load_arrays(manifest, config)
    return compute_metrics(y, predict_labels(params, config, x), config.classes)


# ------------------------------------------------------------- config file

_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """``key = value`` lines; ``preset = desk`` starts from the small preset."""
    model_items: dict[str, str] = {}
    train_kwargs: dict[str, object] = {}
    preset = "default"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key == "preset":
            if val not in ("default", "desk"):
                raise ConfigError(f"line {lineno}: unknown preset {val!r}")
            preset = val
        elif key in _MODEL_KEYS:
            model_items[key] = val
        elif key in _TRAIN_TYPES:
            try:
                if key == "optimizer":
                    train_kwargs[key] = val
                elif key == "batch_size":
                    train_kwargs[key] = int(val)
                else:
                    train_kwargs[key] = float(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    base = ModelConfig.desk() if preset == "desk" else ModelConfig()
    model = ModelConfig.from_items({**_config_items(base), **model_items})
    return model, TrainConfig(**train_kwargs)


def _config_items(cfg: ModelConfig) -> dict[str, str]:
    return dict(line.split("=", 1) for line in cfg.to_text().splitlines())


def load_config_file(path: Union[str, Path]) -> tuple[ModelConfig, TrainConfig]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
