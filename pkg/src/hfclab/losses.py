"""
Differentiable objectives over a :class:`~hfclab.nn.FeatureTrace`.

Every loss exposes ``evaluate(trace) -> (values, seeds)`` where ``values`` has
one entry per batch row and ``seeds`` maps activation-layer indices (or
``"logits"``) to the gradient of ``values.sum()`` with respect to that tensor.
Attacks minimise these objectives, so each is written in descent form.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import cross_entropy_grad


def _targets(target, n):
    t = np.asarray(target, dtype=int)
    return np.full(n, int(t)) if t.ndim == 0 else t


def _add_seed(seeds, key, g):
    seeds[key] = g if key not in seeds else seeds[key] + g


class LossSpec:
    def layers(self):
        return set()

    def evaluate(self, trace):
        raise NotImplementedError

    def __mul__(self, w):
        return Composite([(float(w), self)])

    __rmul__ = __mul__

    def __add__(self, other):
        return Composite([(1.0, self), (1.0, other)])


@dataclass
class CrossEntropy(LossSpec):
    """-log p(target | x); the targeted objective of the iterative attacks."""

    target: object

    def evaluate(self, trace):
        t = _targets(self.target, trace.logits.shape[0])
        vals, g = cross_entropy_grad(trace.logits, trace.probs, t)
        return vals, {"logits": g}


@dataclass
class CWMargin(LossSpec):
    """max(max_{j != c} l_j - l_c, -kappa).

    This is the L-inf CW objective in descent form: it reaches its floor -kappa
    once the target logit leads every other logit by at least kappa.
    """

    target: object
    kappa: float = 0.0

    def evaluate(self, trace):
        lg = trace.logits
        n = lg.shape[0]
        t = _targets(self.target, n)
        idx = np.arange(n)
        others = lg.copy()
        others[idx, t] = -np.inf
        j = np.argmax(others, axis=1)
        margin = lg[idx, j] - lg[idx, t]
        active = margin > -self.kappa
        vals = np.where(active, margin, -self.kappa)
        g = np.zeros_like(lg)
        g[idx, j] = active
        g[idx, t] -= active
        return vals, {"logits": g}


@dataclass
class FeatureMean(LossSpec):
    """sign * mean(f^l(x)); sign=+1 pushes activations down, -1 pushes them up."""

    layer: int
    sign: float = 1.0

    def layers(self):
        return {self.layer}

    def evaluate(self, trace):
        f = trace.feature(self.layer)
        per = f.reshape(f.shape[0], -1)
        vals = self.sign * per.mean(axis=1)
        g = np.full_like(f, self.sign / per.shape[1])
        return vals, {self.layer: g}


@dataclass
class FeatureMatch(LossSpec):
    """sum_l ||f^l(x) - f^l(guide)||^2 over full activation maps."""

    guide: dict  # layer -> batched guide activations

    def layers(self):
        return set(self.guide)

    def evaluate(self, trace):
        vals = 0.0
        seeds = {}
        for layer, gf in self.guide.items():
            d = trace.feature(layer) - gf
            vals = vals + (d.reshape(d.shape[0], -1) ** 2).sum(axis=1)
            seeds[layer] = 2.0 * d
        return vals, seeds


@dataclass
class Composite(LossSpec):
    terms: list  # [(weight, LossSpec)]

    def __post_init__(self):
        for w, _ in self.terms:
            if not np.isfinite(w):
                raise ConfigError("composite weights must be finite")

    def layers(self):
        out = set()
        for _, t in self.terms:
            out |= t.layers()
        return out

    def evaluate(self, trace):
        total = np.zeros(trace.logits.shape[0])
        seeds = {}
        for w, term in self.terms:
            v, s = term.evaluate(trace)
            total = total + w * v
            for k, g in s.items():
                _add_seed(seeds, k, w * g)
        return total, seeds


def check_loss(model, loss):
    bad = [l for l in loss.layers() if not 1 <= l <= model.n_activation_layers]
    if bad:
        raise ConfigError(f"loss references activation layers {bad} absent from the model")


def loss_and_gradient(model, x, loss):
    """Per-row loss values, input gradient and the forward trace of a batch."""
    check_loss(model, loss)
    trace, caches = model.forward(x)
    vals, seeds = loss.evaluate(trace)
    return vals, model.backward(caches, seeds), trace


def input_gradient(model, x, loss):
    """Exact dJ/dx. Accepts a single image (C,H,W) or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape)
    xb = x[None] if single else x
    _, g, _ = loss_and_gradient(model, xb, loss)
    return g[0] if single else g


def loss_value(model, x, loss):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape)
    xb = x[None] if single else x
    check_loss(model, loss)
    vals, _ = loss.evaluate(model.trace(xb))
    return vals[0] if single else vals
