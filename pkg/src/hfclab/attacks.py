"""
L-inf attacks: FGSM, BIM, PGD, CW-inf, the feature stress test and the
adaptive baselines (guide-feature matching, KDE- and LID-aware objectives).

All attacks are batched and targeted. They minimise a :mod:`hfclab.losses`
objective with ``x <- clip(x - alpha * sign(grad))``; ``sign(0) == 0``. An
optional ``addon`` loss (typically :class:`hfclab.hfc.HfcLoss`) is added to the
base objective with weight 1 (scale it with ``w * loss``).
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from .data import load_images_blob, save_images_blob
from .errors import ConfigError
from .hfc import reduce_features, reduce_grad
from .losses import Composite, CrossEntropy, CWMargin, FeatureMatch, FeatureMean, LossSpec, check_loss
from .tensor import make_rng

LID_CAP = 1e6
LID_FLOOR = 1e-12


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float = 0.02 / 256
    steps: int = None  # default round(2 * epsilon / alpha)
    target: int = None
    kappa: float = 0.0
    random_start: bool = False
    seed: int = 0
    addon: LossSpec = None
    record_trace: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0 or not self.alpha >= 0 or self.kappa < 0:
            raise ConfigError("epsilon, alpha and kappa must be non-negative")
        if self.steps is None:
            if self.alpha == 0:
                raise ConfigError("steps must be given when alpha is 0")
            self.steps = max(1, int(round(2 * self.epsilon / self.alpha)))
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


@dataclass
class AttackResult:
    """Batched outcome. ``deltas[i, t]`` is z(x_{t+1}) - z(x) for row i (when recorded)."""

    x_adv: np.ndarray
    success: np.ndarray
    iterations: np.ndarray
    objective: np.ndarray
    predictions: np.ndarray
    deltas: np.ndarray = None
    label: str = ""

    def __len__(self):
        return len(self.success)

    @property
    def adv_acc(self):
        return float(np.mean(self.success))

    def save(self, stem, config_hash=None):
        save_images_blob(stem + ".bin", self.x_adv)
        meta = {
            "format": "hfclab.attack/1",
            "label": self.label,
            "config_hash": config_hash,
            "shape": list(self.x_adv.shape),
            "blob": os.path.basename(stem + ".bin"),
            "success": self.success.astype(int).tolist(),
            "iterations": self.iterations.tolist(),
            "objective": self.objective.tolist(),
            "predictions": self.predictions.tolist(),
        }
        if self.deltas is not None:
            save_images_blob(stem + ".deltas.bin", self.deltas)
            meta["deltas_shape"] = list(self.deltas.shape)
        with open(stem + ".json", "w") as fh:
            json.dump(meta, fh)

    @classmethod
    def load(cls, stem):
        with open(stem + ".json") as fh:
            meta = json.load(fh)
        if meta.get("format") != "hfclab.attack/1":
            raise ConfigError(f"{stem}.json is not an attack result")
        base = os.path.dirname(stem + ".json")
        deltas = None
        if "deltas_shape" in meta:
            deltas = load_images_blob(stem + ".deltas.bin", meta["deltas_shape"])
        return cls(
            load_images_blob(os.path.join(base, meta["blob"]), meta["shape"]),
            np.array(meta["success"], dtype=bool),
            np.array(meta["iterations"], dtype=int),
            np.array(meta["objective"], dtype=float),
            np.array(meta["predictions"], dtype=int),
            deltas,
            meta["label"],
        )


def clip_ball(x_adv, x, epsilon):
    """Project onto the L-inf ball around x, intersected with the [0, 1] image range."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == len(model.input_shape) else x


def _targets(cfg, target, n):
    t = cfg.target if target is None else target
    if t is None:
        raise ConfigError("no target class given")
    t = np.asarray(t, dtype=int)
    return np.full(n, int(t)) if t.ndim == 0 else t


def _with_addon(loss, cfg):
    return loss if cfg.addon is None else Composite([(1.0, loss), (1.0, cfg.addon)])


def run_iterative(model, x, loss, cfg, target, start=None, stop_loss=None, label=""):
    """Core sign-gradient loop shared by every iterative attack.

    ``stop_loss`` (value threshold) freezes a row once its base objective is at
    or below it; only honoured when no add-on is active.
    """
    x = _batch(model, x)
    check_loss(model, loss)
    n = x.shape[0]
    x_t = x.copy() if start is None else clip_ball(start, x, cfg.epsilon)
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    z0 = model.trace(x).z if cfg.record_trace else None
    deltas = np.zeros((n, cfg.steps, z0.shape[1])) if cfg.record_trace else None
    early = stop_loss is not None and cfg.addon is None
    for t in range(cfg.steps):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        sub_loss = _rows_loss(loss, rows, n)
        trace, caches = model.forward(x_t[rows])
        vals, seeds = sub_loss.evaluate(trace)
        if early:
            done = vals <= stop_loss
            if np.any(done):
                active[rows[done]] = False
                keep = ~done
                rows = rows[keep]
                if rows.size == 0:
                    break
                seeds = {k: g[keep] for k, g in seeds.items()}
                caches = _slice_caches(model, caches, keep)
        grad = model.backward(caches, seeds)
        x_t[rows] = clip_ball(x_t[rows] - cfg.alpha * np.sign(grad), x[rows], cfg.epsilon)
        iters[rows] += 1
        if cfg.record_trace:
            deltas[:, t] = model.trace(x_t).z - z0
    if cfg.record_trace:
        # frozen rows keep their last delta
        for i in np.flatnonzero(iters < cfg.steps):
            if iters[i] > 0:
                deltas[i, iters[i]:] = deltas[i, iters[i] - 1]
    final = model.trace(x_t)
    obj, _ = loss.evaluate(final)
    pred = final.predictions()
    return AttackResult(x_t, pred == target, iters, obj, pred, deltas, label)


def _slice_caches(model, caches, keep):
    out = []
    for spec, c in zip(model.specs, caches):
        if c is None:
            out.append(None)
        elif spec.kind == "conv2d":
            cols, xshape, ho, wo = c
            n = xshape[0]
            cols = cols.reshape(n, ho * wo, -1)[keep].reshape(-1, cols.shape[1])
            out.append((cols, (int(keep.sum()),) + tuple(xshape[1:]), ho, wo))
        elif spec.kind == "global-pool" and spec.pool == "max":
            shape, am = c
            out.append(((int(keep.sum()),) + tuple(shape[1:]), am[keep]))
        elif spec.kind in ("flatten", "global-pool"):
            out.append((int(keep.sum()),) + tuple(c[1:]))
        else:
            out.append(c[keep])
    return out


class _RowView(LossSpec):
    """Restrict a batched loss (per-row targets / guides) to a subset of rows."""

    def __init__(self, loss, rows, n):
        self.loss, self.rows, self.n = loss, rows, n

    def layers(self):
        return self.loss.layers()

    def evaluate(self, trace):
        return _restrict(self.loss, self.rows, self.n).evaluate(trace)


def _restrict(loss, rows, n):
    if isinstance(loss, Composite):
        return Composite([(w, _restrict(t, rows, n)) for w, t in loss.terms])
    if hasattr(loss, "restrict"):
        return loss.restrict(rows, n)
    fields = getattr(loss, "__dataclass_fields__", None)
    if not fields:
        return loss
    kw = {}
    for name in fields:
        val = getattr(loss, name)
        if isinstance(val, np.ndarray) and val.ndim >= 1 and val.shape[0] == n:
            val = val[rows]
        elif isinstance(val, dict) and name == "guide":
            val = {k: v[rows] for k, v in val.items()}
        kw[name] = val
    return type(loss)(**kw)


def _rows_loss(loss, rows, n):
    return loss if rows.size == n else _RowView(loss, rows, n)


def fgsm(model, x, cfg, target=None):
    """One step of size epsilon against the cross-entropy (plus add-on)."""
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    one = AttackConfig(cfg.epsilon, alpha=cfg.epsilon, steps=1, addon=cfg.addon, record_trace=cfg.record_trace)
    return run_iterative(model, x, _with_addon(CrossEntropy(t), cfg), one, t, label="FGSM")


def bim(model, x, cfg, target=None, label="BIM"):
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    return run_iterative(model, x, _with_addon(CrossEntropy(t), cfg), cfg, t, label=label)


def pgd_noise(shape, epsilon, seed):
    return make_rng(seed).uniform(-epsilon, epsilon, size=shape)


def pgd(model, x, cfg, target=None, label="PGD", noise=None):
    """BIM from a uniform random start inside the epsilon-ball.

    ``noise`` (same shape as x) fixes the start; by default it is drawn from ``cfg.seed``.
    """
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    if noise is None:
        noise = pgd_noise(x.shape, cfg.epsilon, cfg.seed)
    elif np.shape(noise) != x.shape:
        raise ConfigError("noise must match the input batch shape")
    start = clip_ball(x + noise, x, cfg.epsilon)
    return run_iterative(model, x, _with_addon(CrossEntropy(t), cfg), cfg, t, start=start, label=label)


def cw_inf(model, x, cfg, target=None, label="CW"):
    """Sign-gradient descent on the CW margin; rows stop once the margin floor -kappa is hit."""
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    loss = _with_addon(CWMargin(t, cfg.kappa), cfg)
    if cfg.addon is None:
        return run_iterative(model, x, loss, cfg, t, stop_loss=-cfg.kappa, label=label)
    return run_iterative(model, x, loss, cfg, t, label=label)


def stress(model, x, layer, direction, cfg):
    """Drive the mean of activation layer ``layer`` down or up; report mean before/after."""
    if direction not in ("up", "down"):
        raise ConfigError("direction must be 'up' or 'down'")
    if not 1 <= layer <= model.n_activation_layers:
        raise ConfigError(f"activation layer {layer} not in model")
    x = _batch(model, x)
    loss = FeatureMean(layer, -1.0 if direction == "up" else 1.0)
    before = model.trace(x).feature(layer)
    if cfg.epsilon == 0:
        after = before
    else:
        res = run_iterative(model, x, loss, cfg, np.zeros(len(x), dtype=int))
        after = model.trace(res.x_adv).feature(layer)
    return {"mean_before": float(before.mean()), "mean_after": float(after.mean())}


def choose_guides(model, x, pool_images, mode, seed=0):
    """Index into ``pool_images`` for each row: random, or nearest in penultimate space."""
    if len(pool_images) == 0:
        raise ConfigError("guide pool is empty")
    if mode == "random":
        return make_rng(seed).integers(0, len(pool_images), size=len(x))
    if mode == "closest":
        zx = model.trace(x).z
        zp = model.trace(pool_images).z
        d = ((zx[:, None, :] - zp[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)
    raise ConfigError(f"unknown guide mode {mode!r}")


def guide_attack(model, x, pool, mode, cfg, target=None, weight=1.0, layers=None, label=None, guide_index=None):
    """Match every hidden activation map to a guide image of the target class.

    ``guide_index`` (one index per row into the target-class pool) overrides
    the guide choice made by ``mode``.
    """
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    layers = list(range(1, model.n_activation_layers + 1)) if layers is None else list(layers)
    guides = {l: np.empty((len(x),) + model.activation_shape(l)) for l in layers}
    for c in np.unique(t):
        rows = np.flatnonzero(t == c)
        sub = pool.of_class(int(c)) if hasattr(pool, "of_class") else pool
        imgs = sub.images if hasattr(sub, "images") else np.asarray(sub)
        if guide_index is None:
            idx = choose_guides(model, x[rows], imgs, mode, seed=cfg.seed + int(c))
        else:
            idx = np.asarray(guide_index)[rows]
        gtrace = model.trace(imgs[idx])
        for l in layers:
            guides[l][rows] = gtrace.feature(l)
    loss = Composite([(1.0, CrossEntropy(t)), (weight, FeatureMatch(guides))])
    loss = _with_addon(loss, cfg)
    return run_iterative(model, x, loss, cfg, t, label=label or f"{mode.capitalize()}")


@dataclass
class KdeLoss(LossSpec):
    """-log of a Gaussian KDE on penultimate features, bank chosen by each row's target."""

    banks: dict  # class -> (n_c, N) penultimate features
    bandwidths: dict  # class -> sigma
    target: object

    def evaluate(self, trace):
        z = trace.z
        n, dim = z.shape
        t = np.asarray(self.target, dtype=int)
        t = np.full(n, int(t)) if t.ndim == 0 else t
        vals = np.zeros(n)
        g = np.zeros_like(z)
        for c in np.unique(t):
            rows = t == c
            bank, sig = self.banks[int(c)], self.bandwidths[int(c)]
            diff = z[rows, None, :] - bank[None]
            e = -(diff**2).sum(-1) / (2 * sig**2)
            m = e.max(axis=1, keepdims=True)
            w = np.exp(e - m)
            s = w.sum(axis=1, keepdims=True)
            logp = (np.log(s) + m)[:, 0] - np.log(len(bank)) - 0.5 * dim * np.log(2 * np.pi * sig**2)
            vals[rows] = -logp
            g[rows] = ((w / s)[:, :, None] * diff).sum(axis=1) / sig**2
        return vals, {trace.n_layers: g}


def lid_estimates(dists, k):
    """MLE LID from sorted k-NN distances (..., k); zero distances floored, flat rows capped."""
    r = np.maximum(dists[..., :k], LID_FLOOR)
    s = np.log(r / r[..., -1:]).sum(axis=-1)
    with np.errstate(divide="ignore"):
        lid = np.where(s < 0, -k / np.where(s < 0, s, -1.0), LID_CAP)
    return lid


@dataclass
class LidLoss(LossSpec):
    """Sum over layers of the LID of reduced features w.r.t. a fixed clean reference batch.

    Neighbour sets are re-ranked at each evaluation and treated as constant for
    the gradient.
    """

    references: dict  # layer -> (m, d_l) reference features
    k: int = 20

    def layers(self):
        return set(self.references)

    def evaluate(self, trace):
        n = trace.logits.shape[0]
        vals = np.zeros(n)
        seeds = {}
        k = self.k
        for l, ref in self.references.items():
            v = reduce_features(trace, l)
            diff = v[:, None, :] - ref[None]
            d = np.sqrt((diff**2).sum(-1))
            nn = np.argsort(d, axis=1, kind="stable")[:, :k]
            r = np.maximum(np.take_along_axis(d, nn, axis=1), LID_FLOOR)
            s = np.log(r / r[:, -1:]).sum(axis=1)
            ok = s < 0
            lid = np.where(ok, -k / np.where(ok, s, -1.0), LID_CAP)
            vals += lid
            # dLID/dr_i = (k / s^2) * (1/r_i - [i == k] * k / r_k)
            coef = np.where(ok, k / np.where(ok, s, 1.0) ** 2, 0.0)
            dr = 1.0 / r
            dr[:, -1] -= k / r[:, -1]
            dr *= coef[:, None]
            dd = np.take_along_axis(diff, nn[:, :, None], axis=1) / r[:, :, None]
            gv = (dr[:, :, None] * dd).sum(axis=1)
            seeds[l] = reduce_grad(gv, trace.feature(l))
        return vals, seeds


def kde_adaptive(model, x, kde, cfg, target=None, weight=1.0, label="KDE"):
    """Cross-entropy plus ``weight`` times the negative KDE log-density of a fitted KD detector."""
    if kde is None or not getattr(kde, "banks", None):
        raise ConfigError("kde_adaptive needs a fitted KD detector")
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    loss = Composite([(1.0, CrossEntropy(t)), (weight, KdeLoss(kde.banks, kde.bandwidths, t))])
    return run_iterative(model, x, _with_addon(loss, cfg), cfg, t, label=label)


def lid_adaptive(model, x, references, cfg, target=None, weight=1.0, k=20, label="LID"):
    """Cross-entropy plus ``weight`` times the summed per-layer LID against ``references``."""
    if not references:
        raise ConfigError("lid_adaptive needs a reference batch")
    x = _batch(model, x)
    t = _targets(cfg, target, x.shape[0])
    loss = Composite([(1.0, CrossEntropy(t)), (weight, LidLoss(references, k))])
    return run_iterative(model, x, _with_addon(loss, cfg), cfg, t, label=label)

