"""Two-level hierarchical classification with whole-slide MAP aggregation.

The parent model separates Normal / EE / CD. Patches whose parent MAP label is the routed
parent (CD) go on to the child model, which grades Marsh severity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nn.layers import Conv2D, Dense, Dropout, Flatten, MaxPool2D, NetworkSpec, SoftmaxOutput, init_params
from .nn.network import predict_proba
from .nn.train import fit
from .optim import Adam, RmsProp
from .preprocess import (DEFAULT_BALANCE_LEVELS, IDENTITY_BALANCE, ColorBalanceParams, StainNormParams,
                         balance_level_params, color_balance, stain_normalize, stain_stats, to_float)

PROB_TOL = 1e-6


class HierarchyStateError(RuntimeError):
    """Raised when inference is attempted with an untrained model handle."""


class LabelError(ValueError):
    pass


def parent_architecture(input_size: int = 1000, filters=(32, 32, 64), pools=(5, 5, 5), dense: int = 128,
                        n_classes: int = 3, dropout: float | None = None) -> NetworkSpec:
    """Three conv/pool blocks, a dense layer and a softmax head (optionally with dropout)."""
    layers = []
    for f, p in zip(filters, pools):
        layers += [Conv2D(f, 3, "relu"), MaxPool2D(p)]
    layers += [Flatten(), Dense(dense, "relu")]
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(SoftmaxOutput(n_classes))
    return NetworkSpec((input_size, input_size, 3), tuple(layers))


def child_architecture(input_size: int = 1000, filters=(64, 64, 128), pools=(5, 5, 5), dense: int = 128,
                       n_classes: int = 4, dropout: float = 0.5) -> NetworkSpec:
    """Parent layout with doubled filter counts and a dropout head."""
    return parent_architecture(input_size, filters, pools, dense, n_classes, dropout)


@dataclass
class LevelModel:
    """A trained network plus the preprocessing its level expects.

    Exactly one of ``balance`` (parent level) or ``stain`` (child level) is normally set.
    """
    spec: NetworkSpec
    params: dict | None
    labels: tuple
    balance: ColorBalanceParams | None = None
    stain: StainNormParams | None = None

    def prepare(self, images) -> np.ndarray:
        images = np.asarray(images)
        if self.stain is not None:
            images = np.stack([stain_normalize(im, self.stain) for im in images])
        if self.balance is not None and self.balance != IDENTITY_BALANCE:
            images = np.stack([color_balance(im, self.balance) for im in images])
        return to_float(images)

    def predict_proba(self, images) -> np.ndarray:
        if self.params is None:
            raise HierarchyStateError("model has not been trained")
        return predict_proba(self.spec, self.params, self.prepare(images))


@dataclass
class HierarchyConfig:
    parent_labels: tuple = ("Normal", "EE", "CD")
    routed_parent: str = "CD"
    child_labels: tuple = ("I", "IIIa", "IIIb", "IIIc")
    parent: object = None
    child: object = None

    def __post_init__(self):
        self.parent_labels = tuple(self.parent_labels)
        self.child_labels = tuple(self.child_labels)
        if not self.parent_labels or not self.child_labels:
            raise LabelError("label sets must be non-empty")
        if self.routed_parent not in self.parent_labels:
            raise LabelError(f"routed parent {self.routed_parent!r} is not a parent label")
        if set(self.parent_labels) & set(self.child_labels):
            raise LabelError("parent and child label sets must be disjoint")
        for labels in (self.parent_labels, self.child_labels):
            if len(set(labels)) != len(labels):
                raise LabelError("duplicate labels")

    def joint_label(self, parent: str, child: str | None) -> str:
        return parent if child is None else f"{parent}/{child}"


@dataclass
class PatchPrediction:
    parent_label: str
    parent_probs: np.ndarray
    child_label: str | None = None
    child_probs: np.ndarray | None = None


@dataclass
class SlidePrediction:
    slide_id: str
    sums: np.ndarray
    label: int
    n: int


def patch_map_label(probs) -> int:
    """MAP class of a probability vector; the lowest index wins ties."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if np.any(p < -PROB_TOL) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError("input is not a probability distribution")
    return int(np.argmax(p))


def _require(model, level):
    if model is None or getattr(model, "params", True) is None:
        raise HierarchyStateError(f"{level} model is not trained")
    return model


def hmic_predict(config: HierarchyConfig, patches) -> list:
    """Hierarchical predictions for a batch of uint8 patches."""
    parent = _require(config.parent, "parent")
    patches = np.asarray(patches)
    if len(patches) == 0:
        return []
    p_probs = np.asarray(parent.predict_proba(patches), dtype=np.float64)
    p_idx = np.argmax(p_probs, axis=1)
    out = [PatchPrediction(config.parent_labels[i], pr) for i, pr in zip(p_idx, p_probs)]
    routed = np.flatnonzero(p_idx == config.parent_labels.index(config.routed_parent))
    if len(routed):
        child = _require(config.child, "child")
        c_probs = np.asarray(child.predict_proba(patches[routed]), dtype=np.float64)
        for j, pr in zip(routed, c_probs):
            out[j].child_label = config.child_labels[int(np.argmax(pr))]
            out[j].child_probs = pr
    return out


def hmic_predict_patch(config: HierarchyConfig, patch) -> PatchPrediction:
    return hmic_predict(config, np.asarray(patch)[None])[0]


def aggregate_slide(prob_vectors, slide_id: str = "") -> SlidePrediction:
    """Sum per-patch probability vectors and take the argmax (lowest index on ties).

    The sum uses ``math.fsum`` per class so it does not depend on patch order.
    """
    probs = np.asarray(prob_vectors, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("a slide needs at least one patch prediction")
    sums = np.array([math.fsum(probs[:, c]) for c in range(probs.shape[1])])
    return SlidePrediction(slide_id, sums, int(np.argmax(sums)), len(probs))


@dataclass
class TrainParams:
    parent_spec: NetworkSpec | None = None
    child_spec: NetworkSpec | None = None
    parent_lr: float = 0.001
    child_lr: float = 1e-5
    parent_epochs: int = 10
    child_epochs: int = 10
    batch_size: int = 32
    balance_levels: tuple = DEFAULT_BALANCE_LEVELS
    inference_balance: ColorBalanceParams = IDENTITY_BALANCE
    seed: int = 0
    history: dict = field(default_factory=dict)


def _encode_labels(labels, label_set, level):
    idx = {name: i for i, name in enumerate(label_set)}
    try:
        return np.array([idx[l] for l in labels], dtype=int)
    except KeyError as e:
        raise LabelError(f"{level} label {e.args[0]!r} is not in {label_set}") from None


def balance_augment(images, levels) -> np.ndarray:
    """Stack one color-balanced copy of ``images`` per balancing level."""
    return np.concatenate([[color_balance(im, balance_level_params(p)) for im in images] for p in levels])


def hmic_train(config: HierarchyConfig, parent_x, parent_y, child_x, child_y,
               params: TrainParams | None = None) -> HierarchyConfig:
    """Train the parent and child levels independently.

    Parent: balancing-level augmentation, Adam. Child: stain normalization to the child
    training set's statistics, RMSProp. Returns a new config holding both models.
    """
    params = params or TrainParams()
    parent_x, child_x = np.asarray(parent_x), np.asarray(child_x)
    if len(parent_x) == 0:
        raise ValueError("parent dataset is empty")
    if len(child_x) == 0:
        raise ValueError("child dataset is empty: the routed parent has nothing to train on")
    py = _encode_labels(parent_y, config.parent_labels, "parent")
    cy = _encode_labels(child_y, config.child_labels, "child")
    size = parent_x.shape[1]
    seeds = np.random.SeedSequence(params.seed).generate_state(4)

    p_spec = params.parent_spec or parent_architecture(size, n_classes=len(config.parent_labels))
    p_params = init_params(p_spec.input_shape, p_spec.layers, seed=int(seeds[0]))
    levels = tuple(params.balance_levels) or (0.0,)
    xa = to_float(balance_augment(parent_x, levels))
    ya = np.tile(py, len(levels))
    p_hist = fit(p_spec, p_params, xa, ya, Adam(lr=params.parent_lr), epochs=params.parent_epochs,
                 batch_size=params.batch_size, seed=int(seeds[1]))
    parent = LevelModel(p_spec, p_params, config.parent_labels, balance=params.inference_balance)

    c_spec = params.child_spec or child_architecture(size, n_classes=len(config.child_labels))
    c_params = init_params(c_spec.input_shape, c_spec.layers, seed=int(seeds[2]))
    stain = stain_stats(child_x)
    child = LevelModel(c_spec, c_params, config.child_labels, stain=stain)
    c_hist = fit(c_spec, c_params, child.prepare(child_x), cy, RmsProp(lr=params.child_lr),
                 epochs=params.child_epochs, batch_size=params.batch_size, seed=int(seeds[3]))
    params.history.update(parent=p_hist, child=c_hist)
    return replace(config, parent=parent, child=child)
