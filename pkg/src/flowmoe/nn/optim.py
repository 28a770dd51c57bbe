"""Adam and plain gradient-descent parameter updates."""

from __future__ import annotations

import numpy as np


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def _adam_update(tensor_for, grads, state, lr):
    state.step += 1
    corr1 = 1.0 - state.beta1 ** state.step
    corr2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = tensor_for(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def adam_step(params, grads, state, lr):
    """Canonical bias-corrected Adam update, applied in place.

    Parameters without a gradient entry are left untouched. Returns
    (params, state) for call-site chaining.
    """
    _adam_update(lambda name: params[name], grads, state, lr)
    return params, state


def sgd_step(params, grads, lr):
    """Vanilla gradient descent: p <- p - lr * g, in place."""
    for name, g in grads.items():
        p = params[name]
        p.data = p.data - lr * g
    return params


class MultiAdam:
    """One Adam optimizer spanning several named ParamSets."""

    def __init__(self, named_sets, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_sets = dict(named_sets)
        self.state = AdamState(beta1, beta2, eps)

    def apply(self, named_grads, lr):
        flat = {}
        for set_name, grads in named_grads.items():
            for pname, g in grads.items():
                flat[f"{set_name}/{pname}"] = g

        def tensor_for(key):
            set_name, pname = key.split("/", 1)
            return self.named_sets[set_name][pname]

        _adam_update(tensor_for, flat, self.state, lr)
