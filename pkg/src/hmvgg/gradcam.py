"""Gradient-weighted class activation maps."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .autograd import Tape, Variable, backward, reduce_sum
from .model import ModelConfig, Params, hmvgg_forward
from .nnops import _nearest_index

LAYER_TAGS = ("R3", "R4", "R5", "H3", "H4", "H5", "M1", "M2")


def normalize_heatmap(cam: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map stays zero and a flat positive map becomes ones."""
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo > 0:
        return (cam - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(cam)
    return np.zeros_like(cam)


def cam_from(activation: np.ndarray, grad: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """relu(sum_c alpha_c * A_c) with alpha = spatially pooled gradient, resized and normalized."""
    alpha = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((alpha * activation).sum(axis=1, keepdims=True), 0.0)
    rows = _nearest_index(out_hw[0], cam.shape[2])
    cols = _nearest_index(out_hw[1], cam.shape[3])
    return normalize_heatmap(cam[:, :, rows][:, :, :, cols])


def gradcam_generic(forward: Callable[[Variable], tuple[Variable, Variable]], image: np.ndarray,
                    target_class: int) -> np.ndarray:
    """Grad-CAM for any ``forward(x) -> (logits, activation)`` recorded on x's tape."""
    image = T.as_tensor(image)
    tape = Tape()
    # the input requires grad so every activation downstream of it is tracked
    x = tape.leaf(image, requires_grad=True)
    logits, act = forward(x)
    k = logits.shape[1]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[0, target_class] = 1.0
    score = reduce_sum(logits * onehot)
    grads = backward(tape, score)
    grad = grads.get(act.id, np.zeros_like(act.value))
    return cam_from(act.value, grad, image.shape[2:])


def gradcam(params: Params, config: ModelConfig, image, target_class: int,
            layer: str = "R5") -> np.ndarray:
    """Heatmap of shape 1 x 1 x H x W in [0, 1] for one input image (1 x C x H x W)."""
    if layer not in LAYER_TAGS:
        raise ValueError(f"unknown layer tag {layer!r}; expected one of {LAYER_TAGS}")
    image = T.as_tensor(image)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError("gradcam takes a single image")

    def forward(x):
        res = hmvgg_forward(x, params, config, "eval")
        return res.logits, res.activation(layer)

    return gradcam_generic(forward, image, target_class)
