"""Gradient-weighted class activation maps."""
from __future__ import annotations

import numpy as np

from ..interp import bilinear
from .layers import Conv2D, Residual, SpecError
from .network import backward_from_logits, network_forward


class UnsupportedSpecError(SpecError):
    pass


def _contains_conv(layer) -> bool:
    if isinstance(layer, Conv2D):
        return True
    return isinstance(layer, Residual) and any(_contains_conv(l) for l in layer.inner)


def last_conv_index(spec) -> int:
    """Index of the last top-level Conv2D (or residual block wrapping one)."""
    for i in reversed(range(len(spec.layers))):
        if _contains_conv(spec.layers[i]):
            return i
    raise UnsupportedSpecError("Grad-CAM needs at least one convolutional layer")


def normalize_map(cam):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def grad_cam(spec, params, x, target_class: int):
    """Heatmap (H, W) in [0, 1] of the regions driving the ``target_class`` logit.

    Channel weights are the spatial mean of d(logit)/d(feature map) at the last conv
    layer; the weighted sum is ReLU-rectified, bilinearly upsampled to the input size and
    min-max normalized.
    """
    layer_idx = last_conv_index(spec)
    x = np.asarray(x)
    if x.shape != spec.input_shape:
        raise ValueError(f"grad_cam takes one sample of shape {spec.input_shape}")
    if not 0 <= target_class < spec.num_classes:
        raise IndexError("target class out of range")
    _, trace = network_forward(spec, params, x)
    dlogits = np.zeros_like(trace.logits)
    dlogits[0, target_class] = 1.0
    _, dinputs = backward_from_logits(spec, params, trace, dlogits)
    fmap = trace.outputs[layer_idx][0].astype(np.float64)
    dfmap = dinputs[layer_idx + 1][0].astype(np.float64)
    weights = dfmap.mean(axis=(0, 1))
    cam = np.maximum(fmap @ weights, 0.0)
    h, w = spec.input_shape[:2]
    if cam.shape != (h, w):
        cam = bilinear(cam, h, w)
    return normalize_map(cam)
