"""A small numpy network kernel: layers, exact backprop, training and Grad-CAM."""
import numpy as np

from .functional import (conv2d_backward, conv2d_forward, cross_entropy_loss, dense_backward,
                         dense_forward, maxpool2d_backward, maxpool2d_forward, sigmoid, softmax)
from .gradcam import UnsupportedSpecError, grad_cam
from .layers import (Conv2D, Dense, DimensionError, Dropout, Flatten, GruCell, LstmCell, MaxPool2D,
                     NetworkSpec, Reshape, Residual, SoftmaxOutput, SpecError, Upsample2D,
                     count_parameters, infer_shapes, init_params)
from .network import (ForwardTrace, argmax_label, backward_from_logits, forward_layers, input_gradient,
                      network_backward, network_forward, predict_proba)
from .recurrent import gru_cell_step, lstm_cell_step
from .train import EpochRecord, evaluate_accuracy, fit

__all__ = [
    "conv2d_backward",
    "conv2d_forward",
    "cross_entropy_loss",
    "dense_backward",
    "dense_forward",
    "maxpool2d_backward",
    "maxpool2d_forward",
    "sigmoid",
    "softmax",
    "UnsupportedSpecError",
    "grad_cam",
    "Conv2D",
    "Dense",
    "DimensionError",
    "Dropout",
    "Flatten",
    "GruCell",
    "LstmCell",
    "MaxPool2D",
    "NetworkSpec",
    "Reshape",
    "Residual",
    "SoftmaxOutput",
    "SpecError",
    "Upsample2D",
    "count_parameters",
    "infer_shapes",
    "init_params",
    "ForwardTrace",
    "argmax_label",
    "backward_from_logits",
    "forward_layers",
    "input_gradient",
    "network_backward",
    "network_forward",
    "predict_proba",
    "gru_cell_step",
    "lstm_cell_step",
    "EpochRecord",
    "evaluate_accuracy",
    "fit",
    "residual_block_forward",
]


def residual_block_forward(x, inner_layers, params, prefix=""):
    """``inner(x) + x`` for a stack that preserves shape; ``x`` carries a batch axis."""
    out, _ = forward_layers(inner_layers, params, np.asarray(x), prefix=prefix)
    if out.shape != np.shape(x):
        raise DimensionError(f"residual inner stack changed shape {np.shape(x)} -> {out.shape}")
    return out + x
