"""
Feature-space adversarial detectors.

Every detector scores a batch of traces with "higher = more adversarial".
KD, BU and the RBF-SVM read penultimate features; MAHA, LID and the DNN
ensemble use every hidden activation layer (channel-mean reduced).
Unsupervised detectors fit on clean Train features; the supervised ones
(LID head, SVM, DNN) fit on AdvTrain clean rows versus plain-BIM rows.
"""
import json

import numpy as np
from scipy.optimize import minimize

from .attacks import lid_estimates
from .errors import ConfigError, NotPDError
from .hfc import reduce_features
from .tensor import LOG_2PI, cholesky, make_rng, mahalanobis_sq


def _all_layers(trace):
    return list(range(1, trace.n_layers + 1))


def _reg_chol(cov, reg):
    d = cov.shape[0]
    scale = np.trace(cov) / d if np.trace(cov) > 0 else 1.0
    added, ridge = 0.0, reg * scale
    for _ in range(12):
        try:
            return cholesky(cov + added * np.eye(d)), added
        except NotPDError:
            added, ridge = ridge, ridge * 10
    raise ConfigError("covariance could not be regularized")


def median_pairwise_distance(x):
    d = np.sqrt(((x[:, None, :] - x[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(x), k=1)
    if len(iu[0]) == 0:
        return 1.0
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


class Detector:
    kind = ""
    orientation = "higher score = more adversarial"

    def score(self, trace, model=None, x=None):
        raise NotImplementedError

    def params(self):
        raise NotImplementedError

    def to_dict(self):
        return {"kind": self.kind, "orientation": self.orientation, "params": self.params()}


# --- kernel density ---------------------------------------------------------------


class KernelDensity(Detector):
    """Gaussian KDE over penultimate features of the predicted class (-log density)."""

    kind = "kd"

    def __init__(self, banks, bandwidths):
        self.banks = {int(c): np.asarray(b, dtype=np.float64) for c, b in banks.items()}
        self.bandwidths = {int(c): float(s) for c, s in bandwidths.items()}

    @classmethod
    def fit(cls, z, labels, bandwidth=None):
        banks, bws = {}, {}
        for c in np.unique(labels):
            bank = z[labels == c]
            if len(bank) == 0:
                raise ConfigError(f"empty KD bank for class {c}")
            banks[int(c)] = bank
            bws[int(c)] = float(bandwidth) if bandwidth else median_pairwise_distance(bank)
        return cls(banks, bws)

    def log_density(self, z, c):
        bank, sig = self.banks[c], self.bandwidths[c]
        e = -((z[:, None, :] - bank[None]) ** 2).sum(-1) / (2 * sig**2)
        m = e.max(axis=1, keepdims=True)
        lse = (np.log(np.exp(e - m).sum(axis=1, keepdims=True)) + m)[:, 0]
        return lse - np.log(len(bank)) - 0.5 * z.shape[1] * np.log(2 * np.pi * sig**2)

    def score(self, trace, model=None, x=None):
        z = trace.z
        pred = trace.predictions()
        out = np.empty(len(z))
        for c in np.unique(pred):
            if int(c) not in self.banks:
                raise ConfigError(f"no KD bank for class {c}")
            rows = pred == c
            out[rows] = -self.log_density(z[rows], int(c))
        return out

    def params(self):
        return {
            "banks": {str(c): b.tolist() for c, b in self.banks.items()},
            "bandwidths": {str(c): s for c, s in self.bandwidths.items()},
        }

    @classmethod
    def from_params(cls, p):
        return cls({int(c): np.array(b) for c, b in p["banks"].items()}, {int(c): s for c, s in p["bandwidths"].items()})


# --- Gaussian models ----------------------------------------------------------------


class Mahalanobis(Detector):
    """Class means with a tied covariance per layer; score = sum_l min_c distance^2."""

    kind = "maha"

    def __init__(self, layers, means, covs, reg=1e-6):
        self.layers = list(layers)
        self.means = {l: np.asarray(means[l], dtype=np.float64) for l in self.layers}  # (Y, d)
        self.covs = {l: np.asarray(covs[l], dtype=np.float64) for l in self.layers}
        self.reg = reg
        self.chols = {}
        self.reg_added = {}
        for l in self.layers:
            self.chols[l], self.reg_added[l] = _reg_chol(self.covs[l], reg)

    @classmethod
    def fit(cls, trace, labels, layers=None, reg=1e-6):
        layers = _all_layers(trace) if layers is None else list(layers)
        classes = np.unique(labels)
        means, covs = {}, {}
        for l in layers:
            v = reduce_features(trace, l)
            for c in classes:
                if np.sum(labels == c) <= v.shape[1]:
                    raise ConfigError(f"layer {l}: class {c} has too few samples for dimension {v.shape[1]}")
            mu = np.stack([v[labels == c].mean(axis=0) for c in classes])
            centered = v - mu[np.searchsorted(classes, labels)]
            means[l] = mu
            covs[l] = centered.T @ centered / len(v)
        return cls(layers, means, covs, reg)

    def layer_scores(self, trace):
        out = {}
        for l in self.layers:
            v = reduce_features(trace, l)
            d = np.stack([mahalanobis_sq(v, mu, self.chols[l]) for mu in self.means[l]], axis=1)
            out[l] = d.min(axis=1)
        return out

    def score(self, trace, model=None, x=None):
        return sum(self.layer_scores(trace).values())

    def params(self):
        return {
            "layers": self.layers,
            "means": {str(l): self.means[l].tolist() for l in self.layers},
            "covs": {str(l): self.covs[l].tolist() for l in self.layers},
            "reg": self.reg,
        }

    @classmethod
    def from_params(cls, p):
        return cls(p["layers"], {int(k): v for k, v in p["means"].items()}, {int(k): v for k, v in p["covs"].items()}, p["reg"])


class GaussianModel(Detector):
    """Per-class full Gaussian on penultimate features; score = -max_c log N(z | mu_c, Sigma_c)."""

    kind = "mgm"

    def __init__(self, means, covs, reg=1e-6):
        self.means = {int(c): np.asarray(m, dtype=np.float64) for c, m in means.items()}
        self.covs = {int(c): np.asarray(s, dtype=np.float64) for c, s in covs.items()}
        self.reg = reg
        self.chols = {c: _reg_chol(self.covs[c], reg)[0] for c in self.means}

    @classmethod
    def fit(cls, z, labels, reg=1e-6):
        means, covs = {}, {}
        for c in np.unique(labels):
            zc = z[labels == c]
            if len(zc) <= z.shape[1]:
                raise ConfigError(f"class {c} has too few samples for a full covariance")
            means[int(c)] = zc.mean(axis=0)
            d = zc - means[int(c)]
            covs[int(c)] = d.T @ d / len(zc)
        return cls(means, covs, reg)

    def log_densities(self, z):
        cols = []
        for c in sorted(self.means):
            ch = self.chols[c]
            m = mahalanobis_sq(z, self.means[c], ch)
            cols.append(-0.5 * (z.shape[1] * LOG_2PI + ch.logdet() + m))
        return np.stack(cols, axis=1)

    def score(self, trace, model=None, x=None):
        return -self.log_densities(trace.z).max(axis=1)

    def params(self):
        return {
            "means": {str(c): m.tolist() for c, m in self.means.items()},
            "covs": {str(c): s.tolist() for c, s in self.covs.items()},
            "reg": self.reg,
        }

    @classmethod
    def from_params(cls, p):
        return cls({int(c): v for c, v in p["means"].items()}, {int(c): v for c, v in p["covs"].items()}, p["reg"])


# --- logistic heads -----------------------------------------------------------------


class LogisticHead:
    """L2-regularised logistic regression on standardised features."""

    def __init__(self, mean, scale, w, b):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)

    @classmethod
    def fit(cls, x, y, l2=1.0):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        xs = (x - mean) / scale
        n, d = xs.shape

        def obj(theta):
            w, b = theta[:d], theta[d]
            t = xs @ w + b
            # log(1 + exp(-s t)) with s = 2y - 1
            s = 2 * y - 1
            m = -s * t
            loss = np.logaddexp(0.0, m).sum() / n + 0.5 * l2 * (w @ w) / n
            p = 0.5 * (1 + np.tanh(0.5 * m))  # sigmoid(m)
            gt = -s * p / n
            return loss, np.concatenate([xs.T @ gt + l2 * w / n, [gt.sum()]])

        res = minimize(obj, np.zeros(d + 1), jac=True, method="L-BFGS-B")
        return cls(mean, scale, res.x[:d], res.x[d])

    def logit(self, x):
        return ((np.asarray(x) - self.mean) / self.scale) @ self.w + self.b

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "w": self.w.tolist(), "b": self.b}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["scale"], d["w"], d["b"])


def knn_distances(v, ref, k):
    d = np.sqrt(((v[:, None, :] - ref[None]) ** 2).sum(-1))
    return np.sort(d, axis=1)[:, :k]


def score_lid(references, trace, k=20, layers=None):
    """Per-layer LID estimates of each row against a clean reference batch: (n, L)."""
    layers = sorted(references) if layers is None else list(layers)
    cols = []
    for l in layers:
        ref = references[l]
        if k >= len(ref):
            raise ConfigError(f"k={k} must be smaller than the reference batch ({len(ref)})")
        if k < 2:
            raise ConfigError("k must be at least 2")
        cols.append(lid_estimates(knn_distances(reduce_features(trace, l), ref, k), k))
    return np.stack(cols, axis=1)


class LocalIntrinsicDimensionality(Detector):
    """Logistic head over per-layer LID features measured against a clean reference batch."""

    kind = "lid"

    def __init__(self, references, k, head):
        self.references = {int(l): np.asarray(r, dtype=np.float64) for l, r in references.items()}
        self.k = int(k)
        self.head = head

    @classmethod
    def fit(cls, ref_trace, clean_trace, adv_trace, k=20, layers=None):
        layers = _all_layers(ref_trace) if layers is None else list(layers)
        refs = {l: reduce_features(ref_trace, l) for l in layers}
        xc = score_lid(refs, clean_trace, k)
        xa = score_lid(refs, adv_trace, k)
        head = LogisticHead.fit(np.vstack([xc, xa]), np.r_[np.zeros(len(xc)), np.ones(len(xa))])
        return cls(refs, k, head)

    def features(self, trace):
        return score_lid(self.references, trace, self.k)

    def score(self, trace, model=None, x=None):
        return self.head.logit(self.features(trace))

    def params(self):
        return {"k": self.k, "references": {str(l): r.tolist() for l, r in self.references.items()}, "head": self.head.to_dict()}

    @classmethod
    def from_params(cls, p):
        return cls({int(l): np.array(r) for l, r in p["references"].items()}, p["k"], LogisticHead.from_dict(p["head"]))


class LayerEnsemble(Detector):
    """One logistic head per hidden layer; score = sum of the heads' logits."""

    kind = "dnn"

    def __init__(self, heads):
        self.heads = {int(l): h for l, h in heads.items()}

    @classmethod
    def fit(cls, clean_trace, adv_trace, layers=None):
        layers = _all_layers(clean_trace) if layers is None else list(layers)
        heads = {}
        for l in layers:
            xc, xa = reduce_features(clean_trace, l), reduce_features(adv_trace, l)
            heads[l] = LogisticHead.fit(np.vstack([xc, xa]), np.r_[np.zeros(len(xc)), np.ones(len(xa))])
        return cls(heads)

    def head_logits(self, trace):
        return {l: h.logit(reduce_features(trace, l)) for l, h in self.heads.items()}

    def score(self, trace, model=None, x=None):
        return sum(self.head_logits(trace).values())

    def params(self):
        return {"heads": {str(l): h.to_dict() for l, h in self.heads.items()}}

    @classmethod
    def from_params(cls, p):
        return cls({int(l): LogisticHead.from_dict(h) for l, h in p["heads"].items()})


# --- RBF-SVM ------------------------------------------------------------------------


def rbf_kernel(a, b, gamma):
    d2 = (a**2).sum(1)[:, None] + (b**2).sum(1)[None] - 2 * a @ b.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


class RbfSvm(Detector):
    """Kernel machine f(z) = sum_i a_i K(z, z_i) + b fitted by subgradient descent on the hinge loss.

    Updates are taken in function space (the K-preconditioned subgradient), i.e.
    kernelised Pegasos with a 1/(lam t) step and no projection.
    """

    kind = "svm"

    def __init__(self, support, alpha, bias, gamma, mean, scale):
        self.support = np.asarray(support, dtype=np.float64)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.bias = float(bias)
        self.gamma = float(gamma)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, clean_z, adv_z, lam=1e-3, iters=2000, gamma=None):
        x = np.vstack([clean_z, adv_z])
        y = np.r_[-np.ones(len(clean_z)), np.ones(len(adv_z))]
        return cls.fit_labeled(x, y, lam, iters, gamma)

    @classmethod
    def fit_labeled(cls, x, y, lam=1e-3, iters=2000, gamma=None):
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        xs = (x - mean) / scale
        n, d = xs.shape
        gamma = 1.0 / d if gamma is None else gamma
        K = rbf_kernel(xs, xs, gamma)
        a = np.zeros(n)
        b = 0.0
        best = (np.inf, a.copy(), b)
        for t in range(1, iters + 1):
            f = K @ a + b
            viol = (y * f < 1).astype(float)
            obj = 0.5 * lam * a @ K @ a + np.mean(viol * (1 - y * f))
            if obj < best[0]:
                best = (obj, a.copy(), b)
            step = 1.0 / (t + 10)
            a = a - step * (a - viol * y / (lam * n))
            b = b + step * np.sum(viol * y) / n
        _, a, b = best
        return cls(xs, a, b, gamma, mean, scale)

    def decision(self, z):
        zs = (np.asarray(z) - self.mean) / self.scale
        return rbf_kernel(zs, self.support, self.gamma) @ self.alpha + self.bias

    def score(self, trace, model=None, x=None):
        return self.decision(trace.z)

    def params(self):
        return {
            "support": self.support.tolist(),
            "alpha": self.alpha.tolist(),
            "bias": self.bias,
            "gamma": self.gamma,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_params(cls, p):
        return cls(p["support"], p["alpha"], p["bias"], p["gamma"], p["mean"], p["scale"])


# --- Bayesian uncertainty --------------------------------------------------------------


class BayesianUncertainty(Detector):
    """Variance, over MC-dropout passes, of the probability of the predicted class."""

    kind = "bu"

    def __init__(self, samples=20, seed=0):
        if samples < 2:
            raise ConfigError("BU needs at least two MC samples")
        self.samples = int(samples)
        self.seed = int(seed)

    def score(self, trace, model=None, x=None):
        if model is None or x is None:
            raise ConfigError("BU scoring needs the model and the inputs")
        if not any(s.kind == "dropout" for s in model.specs):
            raise ConfigError("BU needs a model with a dropout layer")
        pred = trace.predictions()
        idx = np.arange(len(pred))
        rng = make_rng(self.seed)
        p = np.stack([model.trace(x, mc_rng=rng).probs[idx, pred] for _ in range(self.samples)])
        return (p - p[0]).var(axis=0)  # shifted so identical passes give exactly 0

    def params(self):
        return {"samples": self.samples, "seed": self.seed}

    @classmethod
    def from_params(cls, p):
        return cls(p["samples"], p["seed"])


DETECTORS = {
    "kd": KernelDensity,
    "maha": Mahalanobis,
    "mgm": GaussianModel,
    "lid": LocalIntrinsicDimensionality,
    "svm": RbfSvm,
    "dnn": LayerEnsemble,
    "bu": BayesianUncertainty,
}


def detector_from_dict(d):
    if d.get("kind") not in DETECTORS:
        raise ConfigError(f"unknown detector kind {d.get('kind')!r}")
    return DETECTORS[d["kind"]].from_params(d["params"])


def save_detectors(path, detectors, config_hash=None):
    with open(path, "w") as fh:
        json.dump({"format": "hfclab.detectors/1", "config_hash": config_hash,
                   "detectors": {name: det.to_dict() for name, det in detectors.items()}}, fh)


def load_detectors(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != "hfclab.detectors/1":
        raise ConfigError(f"{path} is not a detector file")
    return {name: detector_from_dict(v) for name, v in d["detectors"].items()}
