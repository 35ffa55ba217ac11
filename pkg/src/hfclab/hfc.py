"""
Hierarchical feature constraint.

Normal features of the target class are modelled, layer by layer, with a
full-covariance Gaussian mixture fitted by EM. During an attack, each layer's
reduced feature is assigned to its most likely component and penalised by the
Mahalanobis distance to that component's mean, weighted by lambda_l / 2. The
sum over layers is returned as a loss that plugs into any attack objective.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateDataError, NotPDError, ShapeError
from .losses import LossSpec
from .tensor import LOG_2PI, cholesky, log_sum_exp, make_rng, mahalanobis_sq


def reduce_features(trace, layer):
    """Per-channel spatial mean for conv activations; dense activations unchanged."""
    f = trace.feature(layer)
    return f.mean(axis=(2, 3)) if f.ndim == 4 else f


def reduce_grad(g, like):
    """Pull a gradient w.r.t. reduced features back onto the full activation map."""
    if like.ndim == 4:
        hw = like.shape[2] * like.shape[3]
        return np.broadcast_to(g[:, :, None, None] / hw, like.shape).copy()
    return g


@dataclass
class LayerFeatureSet:
    layer: int
    vectors: np.ndarray  # (n_samples, d_l)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or not np.all(np.isfinite(self.vectors)):
            raise ShapeError("feature set must be a finite (n, d) matrix")


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    n_iter: int = 0
    log_likelihood: float = float("nan")
    reg_added: np.ndarray = None  # (K,) ridge added to each diagonal
    ll_history: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.dim, self.dim)
        if self.reg_added is None:
            self.reg_added = np.zeros(self.K)
        self.chols = [cholesky(c) for c in self.covs]
        self._logdets = np.array([c.logdet() for c in self.chols])

    @property
    def K(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def component_scores(self, v):
        """ln(pi_k N(v | mu_k, Sigma_k)) for each row of v: shape (n, K)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ShapeError(f"feature dim {v.shape[-1]} != mixture dim {self.dim}")
        v2 = np.atleast_2d(v)
        out = np.empty((v2.shape[0], self.K))
        for k in range(self.K):
            m = mahalanobis_sq(v2, self.means[k], self.chols[k])
            out[:, k] = np.log(self.weights[k]) - 0.5 * (self.dim * LOG_2PI + self._logdets[k] + m)
        return out

    def to_dict(self):
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": [c.ravel().tolist() for c in self.covs],
            "reg_added": self.reg_added.tolist(),
            "n_iter": self.n_iter,
            "log_likelihood": self.log_likelihood,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["weights"]),
            np.array(d["means"]),
            np.array(d["covs"]),
            n_iter=d.get("n_iter", 0),
            log_likelihood=d.get("log_likelihood", float("nan")),
            reg_added=np.array(d.get("reg_added", [0.0] * d["K"])),
        )


def gmm_log_likelihood(gmm, v):
    """log sum_k pi_k N(v | mu_k, Sigma_k); scalar for one vector, (n,) for a batch."""
    out = log_sum_exp(gmm.component_scores(v), axis=1)
    return float(out[0]) if np.ndim(v) == 1 else out


def select_component(gmm, v):
    """Most likely component; np.argmax keeps the lowest index on ties."""
    k = np.argmax(gmm.component_scores(v), axis=1)
    return int(k[0]) if np.ndim(v) == 1 else k


def _kmeans(x, K, rng, n_iter=50):
    # k-means++ seeding then Lloyd iterations
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        centers.append(x[rng.choice(n, p=d2 / total)] if total > 0 else x[rng.integers(n)])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for it in range(n_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        for k in range(K):
            if not np.any(new == k):
                # re-seed an empty cluster at the point farthest from its center
                far = np.argmax(d2[np.arange(n), new])
                new[far] = k
        if it and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == k].mean(axis=0) for k in range(K)])
    return labels


def _regularized_chol(cov, reg):
    """Cholesky of cov, adding reg * (trace/d) * I (growing x10) only when it fails."""
    d = cov.shape[0]
    scale = np.trace(cov) / d
    if not scale > 0:
        scale = 1.0
    added = 0.0
    ridge = reg * scale
    for _ in range(12):
        try:
            cholesky(cov + added * np.eye(d))
            return cov + added * np.eye(d), added
        except NotPDError:
            added = ridge
            ridge *= 10.0
    raise NotPDError(-1, None)


def _m_step(x, resp, reg):
    n, d = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / n
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    added = np.zeros(resp.shape[1])
    for k in range(resp.shape[1]):
        diff = x - means[k]
        c = (resp[:, k, None] * diff).T @ diff / nk[k]
        c = 0.5 * (c + c.T)
        covs[k], added[k] = _regularized_chol(c, reg)
    return weights / weights.sum(), means, covs, added


def gmm_fit(features, K, max_iter=100, tol=1e-6, reg=1e-6, seed=0):
    """EM for a full-covariance mixture, initialised from k-means labels."""
    x = features.vectors if isinstance(features, LayerFeatureSet) else np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if K < 1 or n < K:
        raise ConfigError(f"need at least K={K} samples, got {n}")
    if np.all(np.ptp(x, axis=0) == 0):
        raise DegenerateDataError("all samples are identical")
    rng = make_rng(seed)
    labels = _kmeans(x, K, rng) if K > 1 else np.zeros(n, dtype=int)
    resp = np.eye(K)[labels]
    weights, means, covs, added = _m_step(x, resp, reg)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        gmm = GaussianMixture(weights, means, covs, reg_added=added)
        scores = gmm.component_scores(x)
        lse = log_sum_exp(scores, axis=1)
        ll = float(lse.sum())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * abs(history[-2]):
            break
        resp = np.exp(scores - lse[:, None])
        weights, means, covs, added = _m_step(x, resp, reg)
    gmm = GaussianMixture(weights, means, covs, reg_added=added)
    final = float(gmm_log_likelihood(gmm, x).sum())
    gmm.n_iter = it
    gmm.ll_history = history + ([final] if final != history[-1] else [])
    gmm.log_likelihood = final
    return gmm


@dataclass
class HfcModel:
    """Per-layer mixtures of class-``target`` features plus layer weights."""

    target: int
    gmms: dict  # layer -> GaussianMixture
    lambdas: dict  # layer -> float

    def __post_init__(self):
        if not self.gmms:
            raise ConfigError("HFC needs at least one layer")
        if set(self.gmms) != set(self.lambdas):
            raise ConfigError("lambda table must cover exactly the fitted layers")
        for lam in self.lambdas.values():
            if not (np.isfinite(lam) and lam > 0):
                raise ConfigError("lambda weights must be positive and finite")

    @property
    def layers(self):
        return sorted(self.gmms)

    def layer_terms(self, trace):
        """Per-layer (reduced feature, selected component, penalty) for each row."""
        out = {}
        for l in self.layers:
            v = reduce_features(trace, l)
            gmm = self.gmms[l]
            k = select_component(gmm, v)
            pen = np.empty(len(v))
            for c in np.unique(k):
                rows = k == c
                pen[rows] = mahalanobis_sq(v[rows], gmm.means[c], gmm.chols[c])
            out[l] = (v, k, 0.5 * self.lambdas[l] * pen)
        return out

    def to_dict(self):
        return {
            "format": "hfclab.hfc/1",
            "target": int(self.target),
            "layers": [
                {"layer": l, "lambda": self.lambdas[l], **self.gmms[l].to_dict()} for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "hfclab.hfc/1":
            raise ConfigError("not a hfclab HFC file")
        gmms = {e["layer"]: GaussianMixture.from_dict(e) for e in d["layers"]}
        return cls(d["target"], gmms, {e["layer"]: e["lambda"] for e in d["layers"]})


def hfc_loss(trace, hfc):
    """J_HFC per batch row: sum_l lambda_l/2 * (f_l - mu_k')^T Sigma_k'^{-1} (f_l - mu_k')."""
    missing = [l for l in hfc.layers if l > trace.n_layers]
    if missing:
        raise ConfigError(f"trace lacks HFC layers {missing}")
    return sum(pen for _, _, pen in hfc.layer_terms(trace).values())


@dataclass
class HfcLoss(LossSpec):
    """Attack add-on. ``models`` maps target class -> HfcModel; rows use their own target.

    The selected component is re-chosen at every evaluation and treated as a
    constant for the gradient.
    """

    models: dict
    target: object

    def layers(self):
        out = set()
        for m in self.models.values():
            out |= set(m.layers)
        return out

    def evaluate(self, trace):
        n = trace.logits.shape[0]
        t = np.asarray(self.target, dtype=int)
        t = np.full(n, int(t)) if t.ndim == 0 else t
        vals = np.zeros(n)
        seeds = {}
        for c in np.unique(t):
            if int(c) not in self.models:
                raise ConfigError(f"no HFC model for target class {c}")
            hfc = self.models[int(c)]
            rows = np.flatnonzero(t == c)
            sub = trace.take(rows)
            for l, (v, k, pen) in hfc.layer_terms(sub).items():
                vals[rows] += pen
                gmm = hfc.gmms[l]
                g = np.empty_like(v)
                for comp in np.unique(k):
                    r = k == comp
                    g[r] = gmm.chols[comp].solve((v[r] - gmm.means[comp]).T).T
                g *= hfc.lambdas[l]
                full = reduce_grad(g, sub.feature(l))
                if l not in seeds:
                    seeds[l] = np.zeros_like(trace.feature(l))
                seeds[l][rows] += full
        return vals, seeds


def fit_hfc(model, train_set, target, K=2, layers=None, reg=1e-6, max_iter=100, tol=1e-6, seed=0, lambdas=None):
    """Fit one mixture per layer on class-``target`` training features.

    ``K`` is an int or a {layer: K} map; ``lambdas`` defaults to 1 / C_l.
    """
    layers = list(range(1, model.n_activation_layers + 1)) if layers is None else list(layers)
    for l in layers:
        if not 1 <= l <= model.n_activation_layers:
            raise ConfigError(f"activation layer {l} not in model")
    imgs = train_set.images[train_set.labels == target]
    trace = model.trace(imgs) if len(imgs) else None
    gmms, lams = {}, {}
    for l in layers:
        k_l = K[l] if isinstance(K, dict) else int(K)
        d_l = model.activation_width(l)
        if len(imgs) < max(k_l, d_l + 1):
            raise ConfigError(
                f"layer {l}: {len(imgs)} class-{target} samples, need >= {max(k_l, d_l + 1)}"
            )
        feats = LayerFeatureSet(l, reduce_features(trace, l))
        gmms[l] = gmm_fit(feats, k_l, max_iter=max_iter, tol=tol, reg=reg, seed=seed + l)
        lams[l] = (lambdas or {}).get(l, 1.0 / d_l)
    return HfcModel(int(target), gmms, lams)
