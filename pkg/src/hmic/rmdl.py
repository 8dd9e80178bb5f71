"""Random Multimodel Deep Learning: randomly sized MLP, CNN and RNN members trained
independently under Adam or RMSProp and combined by majority vote."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.layers import (Conv2D, Dense, Flatten, GruCell, LstmCell, MaxPool2D, NetworkSpec, SoftmaxOutput,
                        init_params)
from .nn.network import predict_proba
from .nn.train import fit
from .optim import make_optimizer

log = logging.getLogger(__name__)

FAMILIES = ("MLP", "CNN", "RNN")
MEMBER_OPTIMIZERS = ("adam", "rmsprop")


class EnsembleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    """Sampling plan. Ranges are inclusive ``(low, high)`` pairs; ``None`` disables a family."""
    n_members: int = 9
    mix: tuple = (3, 3, 3)  # (MLP, CNN, RNN)
    seed: int = 0
    n_classes: int = 3
    input_size: int = 100
    channels: int = 3
    mlp_layers: tuple | None = (1, 4)
    mlp_units: tuple | None = (32, 256)
    cnn_blocks: tuple | None = (1, 3)
    cnn_filters: tuple | None = (8, 64)
    cnn_dense: int = 64
    rnn_layers: tuple | None = (1, 2)
    rnn_units: tuple | None = (16, 128)
    cell_kinds: tuple = ("lstm", "gru")
    adam_lr: float = 0.001
    rmsprop_lr: float = 0.001

    def validate(self) -> None:
        if self.n_members < 1:
            raise EnsembleConfigError("an ensemble needs at least one member")
        if len(self.mix) != 3 or min(self.mix) < 0 or sum(self.mix) != self.n_members:
            raise EnsembleConfigError(f"family mix {self.mix} must sum to n_members={self.n_members}")
        needs = {"MLP": (self.mlp_layers, self.mlp_units), "CNN": (self.cnn_blocks, self.cnn_filters),
                 "RNN": (self.rnn_layers, self.rnn_units)}
        for family, count in zip(FAMILIES, self.mix):
            if count == 0:
                continue
            for rng_ in needs[family]:
                if rng_ is None or len(rng_) != 2 or rng_[0] < 1 or rng_[0] > rng_[1]:
                    raise EnsembleConfigError(f"{family} members requested but its range {rng_} is empty")
        if self.mix[2] and not self.cell_kinds:
            raise EnsembleConfigError("RNN members need at least one cell kind")
        if self.mix[1] and self.input_size < 2 ** self.cnn_blocks[1]:
            raise EnsembleConfigError("input too small for the deepest CNN member")


@dataclass(frozen=True)
class RandomModelSpec:
    family: str
    network: NetworkSpec
    optimizer: str
    seed: int


def _draw(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _mlp(rng, spec, input_shape):
    layers = [Flatten()]
    for _ in range(_draw(rng, spec.mlp_layers)):
        layers.append(Dense(_draw(rng, spec.mlp_units), "relu"))
    return NetworkSpec(input_shape, tuple(layers) + (SoftmaxOutput(spec.n_classes),))


def _cnn(rng, spec, input_shape):
    layers = []
    for _ in range(_draw(rng, spec.cnn_blocks)):
        layers += [Conv2D(_draw(rng, spec.cnn_filters), 3, "relu"), MaxPool2D(2)]
    layers += [Flatten(), Dense(spec.cnn_dense, "relu"), SoftmaxOutput(spec.n_classes)]
    return NetworkSpec(input_shape, tuple(layers))


def _rnn(rng, spec, input_shape):
    depth = _draw(rng, spec.rnn_layers)
    cell = spec.cell_kinds[int(rng.integers(len(spec.cell_kinds)))]
    cls = LstmCell if cell == "lstm" else GruCell
    layers = [cls(_draw(rng, spec.rnn_units), return_sequences=(i < depth - 1)) for i in range(depth)]
    return NetworkSpec(input_shape, tuple(layers) + (SoftmaxOutput(spec.n_classes),))


def sample_ensemble(spec: EnsembleSpec) -> list:
    """Draw member architectures: MLPs first, then CNNs, then RNNs.

    Optimizers alternate Adam / RMSProp by member index. Deterministic in ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    member_seeds = np.random.SeedSequence(spec.seed).generate_state(spec.n_members)
    input_shape = (spec.input_size, spec.input_size, spec.channels)
    builders = {"MLP": _mlp, "CNN": _cnn, "RNN": _rnn}
    members = []
    for family, count in zip(FAMILIES, spec.mix):
        for _ in range(count):
            i = len(members)
            members.append(RandomModelSpec(family, builders[family](rng, spec, input_shape),
                                           MEMBER_OPTIMIZERS[i % 2], int(member_seeds[i])))
    return members


@dataclass
class TrainedMember:
    spec: RandomModelSpec
    params: dict
    curve: list = field(default_factory=list)
    reinitialized: bool = False

    def predict_proba(self, x):
        return predict_proba(self.spec.network, self.params, x)


@dataclass
class Ensemble:
    members: list
    n_classes: int

    def vote_matrix(self, x):
        """``(labels[n_samples, n_members], probs[n_samples, n_members, K])``."""
        probs = np.stack([m.predict_proba(x) for m in self.members], axis=1)
        return np.argmax(probs, axis=2), probs


def _train_member(member: RandomModelSpec, x, y, epochs, batch_size, lrs, attempt=0):
    seed = member.seed + attempt
    params = init_params(member.network.input_shape, member.network.layers, seed=seed)
    opt = make_optimizer(member.optimizer, lr=lrs[member.optimizer])
    curve = fit(member.network, params, x, y, opt, epochs=epochs, batch_size=batch_size, seed=seed)
    return params, curve


def train_ensemble(members, x, y, epochs: int = 10, batch_size: int = 32, adam_lr: float = 0.001,
                   rmsprop_lr: float = 0.001, n_classes: int | None = None) -> Ensemble:
    """Train every member independently on the same data.

    A member whose loss turns non-finite is reinitialized once with a shifted seed and then
    kept whatever happens; majority voting absorbs weak members.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=int)
    if len(x) == 0:
        raise ValueError("cannot train an ensemble on an empty dataset")
    lrs = {"adam": adam_lr, "rmsprop": rmsprop_lr}
    trained = []
    for i, member in enumerate(members):
        params, curve = _train_member(member, x, y, epochs, batch_size, lrs)
        redo = not all(math.isfinite(r.loss) for r in curve)
        if redo:
            log.warning("member %d diverged; reinitializing once", i)
            params, curve = _train_member(member, x, y, epochs, batch_size, lrs, attempt=1)
        trained.append(TrainedMember(member, params, curve, redo))
    k = n_classes if n_classes is not None else members[0].network.num_classes
    return Ensemble(trained, k)


def predict_member(member: TrainedMember, x):
    """``(label, probs)`` for one input; label is the argmax, lowest index on ties."""
    probs = member.predict_proba(np.asarray(x)[None])[0]
    return int(np.argmax(probs)), probs


def binary_majority(votes) -> int:
    """Closed-form binary vote ``floor(1/2 + (sum(y) - 1/2) / n)``."""
    votes = list(votes)
    n = len(votes)
    if n == 0:
        raise ValueError("empty vote vector")
    return math.floor(0.5 + (sum(votes) - 0.5) / n)


def majority_vote(votes, probs=None, n_classes: int | None = None) -> int:
    """Plurality label. Ties go to the tied class with the highest summed probability
    across members, then to the lowest class index."""
    votes = [int(v) for v in votes]
    if not votes:
        raise ValueError("empty vote vector")
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        k = probs.shape[1]
    else:
        k = n_classes if n_classes is not None else max(votes) + 1
    if min(votes) < 0 or max(votes) >= k:
        raise ValueError("vote label out of range")
    counts = np.bincount(votes, minlength=k)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1 or probs is None:
        return int(tied[0])
    # fsum is exactly rounded, so member order cannot change the sums
    sums = {int(c): math.fsum(probs[:, c]) for c in tied}
    best = max(sums.values())
    return min(c for c, s in sums.items() if s == best)


def ensemble_predict(ensemble: Ensemble, x) -> int:
    results = [predict_member(m, x) for m in ensemble.members]
    return majority_vote([r[0] for r in results], np.stack([r[1] for r in results]))


def ensemble_predict_batch(ensemble: Ensemble, x) -> np.ndarray:
    labels, probs = ensemble.vote_matrix(x)
    return np.array([majority_vote(labels[i], probs[i]) for i in range(len(labels))], dtype=int)


def write_curve_csv(member: TrainedMember, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for r in member.curve:
            w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.accuracy))])
