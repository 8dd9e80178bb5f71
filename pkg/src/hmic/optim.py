"""Stochastic gradient optimizers: SGD, SGD with momentum, Adam and RMSProp.

Each optimizer keeps its per-parameter auxiliary tensors (velocity, moments, cache)
in dicts keyed like the parameters, and updates the parameter arrays in place.
"""
from __future__ import annotations

import numpy as np


class Optimizer:
    kind = "base"
    aux_names: tuple = ()

    def __init__(self, lr: float):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr = float(lr)
        self.t = 0
        self.aux = {name: {} for name in self.aux_names}

    def _check(self, params, grads):
        if set(params) != set(grads):
            raise ValueError(f"gradient keys do not match parameters: {sorted(set(params) ^ set(grads))}")
        for key, p in params.items():
            if np.shape(grads[key]) != p.shape:
                raise ValueError(f"gradient for {key} has shape {np.shape(grads[key])}, expected {p.shape}")
        for name in self.aux_names:
            store = self.aux[name]
            for key, p in params.items():
                if key not in store:
                    store[key] = np.zeros_like(p)
                elif store[key].shape != p.shape:
                    raise ValueError(f"optimizer state {name}/{key} does not match the parameter shape")

    def step(self, params: dict, grads: dict) -> dict:
        """Apply one update to ``params`` (in place) and return it."""
        self._check(params, grads)
        self.t += 1
        for key, p in params.items():
            delta = self._delta(key, np.asarray(grads[key], dtype=p.dtype))
            p -= delta.astype(p.dtype, copy=False)
        return params

    def _delta(self, key, g):
        raise NotImplementedError

    def hyperparams(self) -> dict:
        return {"lr": self.lr}

    def state_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": self.hyperparams(), "t": self.t,
                "aux": {name: dict(store) for name, store in self.aux.items()}}

    def load_state_dict(self, state: dict) -> None:
        if state["kind"] != self.kind:
            raise ValueError(f"state is for {state['kind']}, not {self.kind}")
        self.t = int(state["t"])
        self.aux = {name: {k: np.array(v) for k, v in state["aux"].get(name, {}).items()}
                    for name in self.aux_names}


class Sgd(Optimizer):
    """Plain SGD: ``theta <- theta - lr * g``."""
    kind = "sgd"

    def __init__(self, lr: float = 0.01):
        super().__init__(lr)

    def _delta(self, key, g):
        return self.lr * g


class SgdMomentum(Optimizer):
    """SGD with a velocity term: ``v <- gamma*v + lr*g``, ``theta <- theta - v``."""
    kind = "sgd_momentum"
    aux_names = ("velocity",)

    def __init__(self, lr: float = 0.001, gamma: float = 0.9):
        super().__init__(lr)
        if not 0 <= gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        self.gamma = float(gamma)

    def _delta(self, key, g):
        v = self.aux["velocity"][key]
        v *= self.gamma
        v += self.lr * g
        return v

    def hyperparams(self):
        return {"lr": self.lr, "gamma": self.gamma}


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments."""
    kind = "adam"
    aux_names = ("m", "v")

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not eps > 0:
            raise ValueError("eps must be > 0")
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)

    def _delta(self, key, g):
        m, v = self.aux["m"][key], self.aux["v"][key]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def hyperparams(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


class RmsProp(Optimizer):
    """RMSProp without momentum or bias correction."""
    kind = "rmsprop"
    aux_names = ("cache",)

    def __init__(self, lr: float = 0.001, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(lr)
        if not 0 <= decay < 1:
            raise ValueError("decay must lie in [0, 1)")
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.decay, self.eps = float(decay), float(eps)

    def _delta(self, key, g):
        cache = self.aux["cache"][key]
        cache *= self.decay
        cache += (1 - self.decay) * g * g
        denom = np.sqrt(cache) + self.eps
        # eps = 0 with a zero cache only happens at zero gradient: step is 0
        return np.divide(self.lr * g, denom, out=np.zeros_like(g), where=denom > 0)

    def hyperparams(self):
        return {"lr": self.lr, "decay": self.decay, "eps": self.eps}


OPTIMIZERS = {cls.kind: cls for cls in (Sgd, SgdMomentum, Adam, RmsProp)}


def make_optimizer(kind: str, **hyperparams) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}; expected one of {sorted(OPTIMIZERS)}") from None
    return cls(**hyperparams)


def optimizer_from_state(state: dict) -> Optimizer:
    opt = make_optimizer(state["kind"], **state["hyperparams"])
    opt.load_state_dict(state)
    return opt


def sgd_step(params, grads, state: Sgd | SgdMomentum):
    return state.step(params, grads), state


def adam_step(params, grads, state: Adam):
    return state.step(params, grads), state


def rmsprop_step(params, grads, state: RmsProp):
    return state.step(params, grads), state
