"""Mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .functional import cross_entropy_loss
from .network import network_backward, network_forward, predict_proba

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def fit(spec, params, x, y, optimizer, epochs=10, batch_size=32, seed=0, augment=None):
    """Train ``params`` in place with shuffled mini-batches.

    ``augment(batch, rng)`` may transform each batch before the forward pass. Returns one
    :class:`EpochRecord` per epoch with the mean training loss and accuracy seen during the
    epoch. Stops early (returning what it has) if the loss becomes non-finite.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=int)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and labels differ in length")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total_loss, correct = 0.0, 0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            if augment is not None:
                xb = augment(xb, rng)
            probs, trace = network_forward(spec, params, xb, training=True, rng=rng)
            total_loss += cross_entropy_loss(probs, y[idx]) * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
            grads = network_backward(spec, params, trace, y[idx])
            optimizer.step(params, grads)
        record = EpochRecord(epoch, total_loss / len(x), correct / len(x))
        history.append(record)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, record.loss, record.accuracy)
        if not np.isfinite(record.loss):
            break
    return history


def evaluate_accuracy(spec, params, x, y) -> float:
    probs = predict_proba(spec, params, x)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))
