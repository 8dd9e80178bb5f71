"""Whole-network forward and backward passes over a :class:`NetworkSpec`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .layers import (Conv2D, Dense, DimensionError, Dropout, Flatten, GruCell, LstmCell, MaxPool2D,
                     NetworkSpec, Reshape, Residual, SoftmaxOutput, SpecError, Upsample2D,
                     check_params, sequence_view)
from .recurrent import gru_backward, gru_forward, lstm_backward, lstm_forward


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward call, enough to backpropagate exactly.

    ``outputs[i]`` is the (batched) output of layer ``i``; ``caches[i]`` holds the
    pre-activations, pooling argmax indices or dropout mask that layer needs.
    """
    spec: object
    caches: list
    outputs: list
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    batched: bool = True
    keys: tuple = field(default=())


def _layer_forward(layer, path, params, x, training, rng):
    if isinstance(layer, Conv2D):
        return F.conv2d_forward(x, params[f"{path}.kernel"], params[f"{path}.bias"], layer.activation)
    if isinstance(layer, MaxPool2D):
        return F.maxpool2d_forward(x, layer.window)
    if isinstance(layer, Dense):
        return F.dense_forward(x, params[f"{path}.weight"], params[f"{path}.bias"], layer.activation)
    if isinstance(layer, SoftmaxOutput):
        return F.dense_forward(x, params[f"{path}.weight"], params[f"{path}.bias"], "linear")
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Reshape):
        return x.reshape((x.shape[0],) + layer.shape), x.shape
    if isinstance(layer, Upsample2D):
        return F.upsample2d_forward(x, layer.factor), None
    if isinstance(layer, Dropout):
        if not training or layer.rate == 0.0:
            return x, None
        if layer.rate >= 1.0:
            mask = np.zeros_like(x)
        else:
            if rng is None:
                raise ValueError("training-mode dropout needs a random generator")
            keep = rng.random(x.shape) >= layer.rate
            mask = keep.astype(x.dtype) / x.dtype.type(1.0 - layer.rate)
        return x * mask, mask
    if isinstance(layer, Residual):
        inner_out, inner_trace = forward_layers(layer.inner, params, x, training, rng, prefix=f"{path}.")
        if inner_out.shape != x.shape:
            raise DimensionError(f"residual inner stack changed shape {x.shape} -> {inner_out.shape}")
        return inner_out + x, inner_trace
    if isinstance(layer, (LstmCell, GruCell)):
        steps, feats = sequence_view(x.shape[1:])
        seq = x.reshape(x.shape[0], steps, feats)
        if isinstance(layer, LstmCell):
            out, cache = lstm_forward(seq, params[f"{path}.W"], params[f"{path}.b"], layer.return_sequences)
        else:
            out, cache = gru_forward(seq, params[f"{path}.W"], params[f"{path}.U"], params[f"{path}.b"],
                                     layer.return_sequences)
        return out, (cache, x.shape)
    raise SpecError(f"unsupported layer {layer!r}")


def _layer_backward(layer, path, params, cache, dout, grads):
    if isinstance(layer, Conv2D):
        dx, dk, db = F.conv2d_backward(dout, params[f"{path}.kernel"], cache)
        grads[f"{path}.kernel"] = dk
        grads[f"{path}.bias"] = db
        return dx
    if isinstance(layer, MaxPool2D):
        return F.maxpool2d_backward(dout, cache)
    if isinstance(layer, (Dense, SoftmaxOutput)):
        dx, dw, db = F.dense_backward(dout, params[f"{path}.weight"], cache)
        grads[f"{path}.weight"] = dw
        grads[f"{path}.bias"] = db
        return dx
    if isinstance(layer, (Flatten, Reshape)):
        return dout.reshape(cache)
    if isinstance(layer, Upsample2D):
        return F.upsample2d_backward(dout, layer.factor)
    if isinstance(layer, Dropout):
        return dout if cache is None else dout * cache
    if isinstance(layer, Residual):
        dinner = backward_layers(layer.inner, params, cache, dout, grads, prefix=f"{path}.")[0]
        return dinner + dout
    if isinstance(layer, LstmCell):
        rcache, in_shape = cache
        dx, dW, db = lstm_backward(dout, params[f"{path}.W"], rcache)
        grads[f"{path}.W"] = dW
        grads[f"{path}.b"] = db
        return dx.reshape(in_shape)
    if isinstance(layer, GruCell):
        rcache, in_shape = cache
        dx, dW, dU, db = gru_backward(dout, params[f"{path}.W"], params[f"{path}.U"], rcache)
        grads[f"{path}.W"] = dW
        grads[f"{path}.U"] = dU
        grads[f"{path}.b"] = db
        return dx.reshape(in_shape)
    raise SpecError(f"unsupported layer {layer!r}")


def forward_layers(layers, params, x, training=False, rng=None, prefix=""):
    """Run a batched input through a layer stack. Returns ``(output, (caches, outputs))``."""
    caches, outputs = [], []
    for i, layer in enumerate(layers):
        x, cache = _layer_forward(layer, f"{prefix}{i}", params, x, training, rng)
        caches.append(cache)
        outputs.append(x)
    return x, (caches, outputs)


def backward_layers(layers, params, trace, dout, grads, prefix=""):
    """Backpropagate ``dout`` through a stack, filling ``grads``.

    Returns the list of gradients w.r.t. each layer's *input*; element 0 is dL/dx.
    """
    caches, _ = trace
    dinputs = [None] * len(layers)
    for i in reversed(range(len(layers))):
        dout = _layer_backward(layers[i], f"{prefix}{i}", params, caches[i], dout, grads)
        dinputs[i] = dout
    return dinputs


def _as_batch(spec_input_shape, x):
    x = np.asarray(x)
    if x.shape == tuple(spec_input_shape):
        return x[None], False
    if x.shape[1:] == tuple(spec_input_shape):
        return x, True
    raise DimensionError(f"input shape {x.shape} does not match network input {spec_input_shape}")


def network_forward(spec: NetworkSpec, params: dict, x, training: bool = False, rng=None):
    """Class probabilities for one sample (shape ``spec.input_shape``) or a batch.

    Computation runs in the parameters' dtype. Dropout is applied only when
    ``training`` is true, using ``rng`` for the masks.
    """
    check_params(spec, params)
    dtype = next(iter(params.values())).dtype
    xb, batched = _as_batch(spec.input_shape, x)
    logits, (caches, outputs) = forward_layers(spec.layers, params, xb.astype(dtype, copy=False), training, rng)
    probs = F.softmax(logits, axis=-1)
    trace = ForwardTrace(spec=spec, caches=caches, outputs=outputs, logits=logits, probs=probs,
                         batched=batched, keys=tuple(params))
    return (probs if batched else probs[0]), trace


def _check_trace(spec, params, trace):
    if not isinstance(trace, ForwardTrace) or trace.spec != spec or trace.keys != tuple(params):
        raise ValueError("trace was not produced by a forward pass of this network")


def backward_from_logits(spec: NetworkSpec, params: dict, trace: ForwardTrace, dlogits):
    """Gradients for an arbitrary upstream dL/dlogits. Returns ``(grads, dinputs)``."""
    _check_trace(spec, params, trace)
    dlogits = np.asarray(dlogits, dtype=trace.logits.dtype).reshape(trace.logits.shape)
    grads = {}
    dinputs = backward_layers(spec.layers, params, (trace.caches, trace.outputs), dlogits, grads)
    ordered = {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}
    return ordered, dinputs


def network_backward(spec: NetworkSpec, params: dict, trace: ForwardTrace, labels):
    """Exact gradient of the mean cross-entropy w.r.t. every parameter.

    Uses the softmax/cross-entropy residual ``probs - onehot`` at the output.
    """
    _check_trace(spec, params, trace)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    probs = trace.probs
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {probs.shape[0]}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError("label out of range")
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    return backward_from_logits(spec, params, trace, dlogits)[0]


def input_gradient(spec: NetworkSpec, params: dict, x, labels):
    """dLoss/dInput (mean cross-entropy), evaluation mode."""
    _, trace = network_forward(spec, params, x)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    dlogits = trace.probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    dx = backward_from_logits(spec, params, trace, dlogits)[1][0]
    return dx if trace.batched else dx[0]


def predict_proba(spec, params, x, batch_size=256):
    """Evaluation-mode probabilities for a batch, processed in chunks."""
    x = np.asarray(x)
    out = [network_forward(spec, params, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, spec.num_classes), dtype=np.float32)
    return np.concatenate(out, axis=0)


def argmax_label(probs):
    """Index of the largest entry; ties go to the lowest index."""
    return int(np.argmax(np.asarray(probs)))
