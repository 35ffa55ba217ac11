"""
Micro feed-forward classifier with per-layer feature tracing.

Everything is batched: inputs are ``(n, C, H, W)`` arrays in [0, 1]. A forward
pass returns a :class:`FeatureTrace` holding every post-ReLU activation
("activation layers", numbered 1..L), the penultimate vector ``z``, the logits
and the softmax probabilities. :meth:`Model.backward` accepts gradient seeds at
any activation layer and at the logits, so arbitrary objectives over the trace
can be differentiated with respect to the input in one reverse pass.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import as_f64, make_rng, softmax

KINDS = ("conv2d", "dense", "relu", "flatten", "dropout", "global-pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0  # conv2d output channels
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    units: int = 0  # dense output units
    rate: float = 0.0  # dropout probability
    pool: str = "avg"  # global-pool reduction: "avg" or "max"

    def to_dict(self):
        return asdict(self)


def default_specs(n_classes=2):
    """The desk architecture: hidden activation widths (8, 16, 8, 8), penultimate N=8."""
    return [
        LayerSpec("conv2d", channels=8, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("conv2d", channels=16, kernel=3, stride=2, padding=1),
        LayerSpec("relu"),
        LayerSpec("global-pool", pool="max"),
        LayerSpec("dense", units=8),
        LayerSpec("relu"),
        LayerSpec("dense", units=8),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("dense", units=n_classes),
    ]


def _out_shape(spec, shape):
    k = spec.kind
    if k == "conv2d":
        if len(shape) != 3 or spec.channels <= 0 or spec.kernel <= 0 or spec.stride <= 0:
            raise ShapeError(f"conv2d needs (C,H,W) input, got {shape}")
        _, h, w = shape
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d output would be empty for input {shape}")
        return (spec.channels, ho, wo)
    if k == "dense":
        if len(shape) != 1 or spec.units <= 0:
            raise ShapeError(f"dense needs a flat input, got {shape}")
        return (spec.units,)
    if k in ("relu", "dropout"):
        if k == "dropout" and not 0.0 <= spec.rate < 1.0:
            raise ShapeError(f"dropout rate must lie in [0,1), got {spec.rate}")
        return shape
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "global-pool":
        if len(shape) != 3:
            raise ShapeError(f"global-pool needs (C,H,W) input, got {shape}")
        return (shape[0],)
    raise ShapeError(f"unknown layer kind {k!r}")


def _windows(xp, k, stride, ho, wo):
    # (n, C, Hp, Wp) -> (n, ho, wo, C, k, k) view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x, W, b, spec):
    n, c, h, w = x.shape
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = _windows(xp, k, s, ho, wo).reshape(n * ho * wo, c * k * k)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), (cols, x.shape, ho, wo)


def _conv_backward(dout, W, spec, cache, need_dx=True, need_params=True):
    cols, xshape, ho, wo = cache
    n, c, h, w = xshape
    p, k, s = spec.padding, spec.kernel, spec.stride
    o = W.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dW = db = None
    if need_params:
        dW = (d2.T @ cols).reshape(W.shape)
        db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return dx, dW, db


@dataclass
class FeatureTrace:
    """Record of one batched forward pass.

    ``features[l - 1]`` is activation layer ``l`` (post-ReLU, batched).
    """

    features: list
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    def feature(self, layer):
        if not 1 <= layer <= len(self.features):
            raise ConfigError(f"activation layer {layer} not in 1..{len(self.features)}")
        return self.features[layer - 1]

    @property
    def n_layers(self):
        return len(self.features)

    def predictions(self):
        return np.argmax(self.logits, axis=1)

    def take(self, idx):
        return FeatureTrace([f[idx] for f in self.features], self.z[idx], self.logits[idx], self.probs[idx])


@dataclass
class Model:
    input_shape: tuple
    specs: list
    params: list  # per layer: dict(W=..., b=...) or None
    seed: int = 0
    trained: bool = False
    input_mean: float = 0.0  # fixed pixel standardisation applied before the first layer
    input_std: float = 1.0
    _shapes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.input_mean, self.input_std = float(self.input_mean), float(self.input_std)
        if not (np.isfinite(self.input_mean) and self.input_std > 0 and np.isfinite(self.input_std)):
            raise ConfigError("input standardisation needs a finite mean and a positive std")
        self._shapes = _check_specs(self.specs, self.input_shape)
        self._relu_pos = [i for i, s in enumerate(self.specs) if s.kind == "relu"]
        for spec, prm, shp_in, shp_out in zip(self.specs, self.params, self._shapes[:-1], self._shapes[1:]):
            want = _param_shapes(spec, shp_in, shp_out)
            got = None if prm is None else (prm["W"].shape, prm["b"].shape)
            if want != got:
                raise ShapeError(f"{spec.kind} parameters {got} do not match {want}")

    # -- architecture facts ------------------------------------------------
    @property
    def n_classes(self):
        return self.specs[-1].units

    @property
    def n_activation_layers(self):
        return len(self._relu_pos)

    def activation_shape(self, layer):
        if not 1 <= layer <= self.n_activation_layers:
            raise ConfigError(f"activation layer {layer} not in 1..{self.n_activation_layers}")
        return self._shapes[self._relu_pos[layer - 1] + 1]

    def activation_width(self, layer):
        """C_l: channel count for conv activations, unit count for dense ones."""
        return self.activation_shape(layer)[0]

    def has_dropout(self):
        return any(s.kind == "dropout" and s.rate > 0 for s in self.specs)

    @property
    def fingerprint(self):
        return architecture_fingerprint(self.specs, self.input_shape)

    @property
    def final_weights(self):
        """(w_nk, b_k) of the last dense layer; w has shape (N, Y)."""
        return self.params[-1]["W"], self.params[-1]["b"]

    # -- passes --------------------------------------------------------------
    def forward(self, x, mc_rng=None, train_rng=None):
        """Batched forward. Returns (trace, cache).

        Dropout is the identity unless ``mc_rng`` (MC sampling) or ``train_rng``
        is given.
        """
        x = as_f64(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != model input {self.input_shape}")
        if x.shape[0] == 0:
            raise ShapeError("empty input batch")
        rng = mc_rng if mc_rng is not None else train_rng
        h = (x - self.input_mean) / self.input_std
        caches, feats = [], []
        z = None
        for spec, prm in zip(self.specs, self.params):
            k = spec.kind
            if k == "conv2d":
                h, c = _conv_forward(h, prm["W"], prm["b"], spec)
            elif k == "dense":
                c = h
                h = h @ prm["W"] + prm["b"]
            elif k == "relu":
                c = h > 0
                h = np.where(c, h, 0.0)
                feats.append(h)
                z = h
            elif k == "flatten":
                c = h.shape
                h = h.reshape(h.shape[0], -1)
            elif k == "global-pool":
                if spec.pool == "max":
                    flat = h.reshape(h.shape[0], h.shape[1], -1)
                    am = np.argmax(flat, axis=2)
                    c = (h.shape, am)
                    h = np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0]
                else:
                    c = h.shape
                    h = h.mean(axis=(2, 3))
            elif k == "dropout":
                if rng is not None and spec.rate > 0:
                    c = (rng.random(h.shape) >= spec.rate) / (1.0 - spec.rate)
                    h = h * c
                else:
                    c = None
            caches.append(c)
        probs = softmax(h, axis=1)
        return FeatureTrace(feats, z, h, probs), caches

    def trace(self, x, mc_rng=None):
        return self.forward(x, mc_rng=mc_rng)[0]

    def predict(self, x):
        return self.trace(x).predictions()

    def backward(self, caches, seeds, until=None, want_params=False):
        """Reverse pass.

        ``seeds`` maps an activation layer index (1-based) or ``"logits"`` to
        dJ/d(that tensor). With ``until=l`` the pass stops and returns dJ/df^l
        (seed at l included); otherwise returns dJ/dx, plus per-layer parameter
        gradients when ``want_params``.
        """
        g = seeds.get("logits")
        pgrads = [None] * len(self.specs)
        act = self.n_activation_layers
        for i in range(len(self.specs) - 1, -1, -1):
            spec, prm, c = self.specs[i], self.params[i], caches[i]
            k = spec.kind
            if k == "relu":
                s = seeds.get(act)
                if s is not None:
                    g = s if g is None else g + s
                if until == act:
                    return np.zeros_like(c, dtype=float) if g is None else g
                act -= 1
                if g is not None:
                    g = np.where(c, g, 0.0)
                continue
            if g is None:
                continue
            if k == "conv2d":
                dx, dW, db = _conv_backward(
                    g, prm["W"], spec, c, need_dx=i > 0 or not want_params, need_params=want_params
                )
                if want_params:
                    pgrads[i] = {"W": dW, "b": db}
                g = dx
            elif k == "dense":
                if want_params:
                    pgrads[i] = {"W": c.T @ g, "b": g.sum(axis=0)}
                g = g @ prm["W"].T
            elif k == "flatten":
                g = g.reshape(c)
            elif k == "global-pool":
                if spec.pool == "max":
                    shape, am = c
                    out = np.zeros((shape[0], shape[1], shape[2] * shape[3]))
                    np.put_along_axis(out, am[:, :, None], g[:, :, None], axis=2)
                    g = out.reshape(shape)
                else:
                    n, ch, hh, ww = c
                    g = np.broadcast_to(g[:, :, None, None] / (hh * ww), c).copy()
            elif k == "dropout":
                if c is not None:
                    g = g * c
        if until is not None:
            raise ConfigError(f"activation layer {until} not in model")
        if g is None:
            g = np.zeros(self._input_batch_shape(caches))
        else:
            g = g / self.input_std
        return (g, pgrads) if want_params else g

    def _input_batch_shape(self, caches):
        first = self.specs[0].kind
        c = caches[0]
        if first == "conv2d":
            return c[1]
        if first == "dense":
            return c.shape
        raise ConfigError("cannot infer input shape from the first layer's cache")

    # -- persistence -----------------------------------------------------------
    def to_dict(self):
        return {
            "format": "hfclab.model/1",
            "input_shape": list(self.input_shape),
            "specs": [s.to_dict() for s in self.specs],
            "weights": [
                None
                if p is None
                else {
                    "W_shape": list(p["W"].shape),
                    "W": p["W"].ravel().tolist(),
                    "b": p["b"].tolist(),
                }
                for p in self.params
            ],
            "fingerprint": self.fingerprint,
            "seed": int(self.seed),
            "trained": bool(self.trained),
            "input_mean": self.input_mean,
            "input_std": self.input_std,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "hfclab.model/1":
            raise ConfigError("not a hfclab model file")
        specs = [LayerSpec(**s) for s in d["specs"]]
        params = [
            None
            if w is None
            else {"W": np.array(w["W"], dtype=np.float64).reshape(w["W_shape"]), "b": np.array(w["b"], dtype=np.float64)}
            for w in d["weights"]
        ]
        m = cls(
            tuple(d["input_shape"]),
            specs,
            params,
            seed=d["seed"],
            trained=d["trained"],
            input_mean=d["input_mean"],
            input_std=d["input_std"],
        )
        if m.fingerprint != d["fingerprint"]:
            raise ConfigError("model fingerprint mismatch")
        return m

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def copy(self):
        params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.params]
        return Model(self.input_shape, list(self.specs), params, self.seed, self.trained, self.input_mean, self.input_std)


def architecture_fingerprint(specs, input_shape):
    blob = json.dumps({"input": list(input_shape), "specs": [s.to_dict() for s in specs]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_specs(specs, input_shape):
    if not specs:
        raise ShapeError("empty layer list")
    for s in specs:
        if s.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {s.kind!r}")
    if specs[-1].kind != "dense":
        raise ShapeError("final layer must be dense")
    shapes = [tuple(input_shape)]
    for s in specs:
        shapes.append(_out_shape(s, shapes[-1]))
    return shapes


def _param_shapes(spec, shp_in, shp_out):
    if spec.kind == "conv2d":
        return ((spec.channels, shp_in[0], spec.kernel, spec.kernel), (spec.channels,))
    if spec.kind == "dense":
        return ((shp_in[0], spec.units), (spec.units,))
    return None


def input_stats(images):
    """(mean, std) over every pixel of a training batch, for ``build_model(input_norm=...)``."""
    images = as_f64(images)
    if images.size == 0:
        raise ConfigError("no images to take statistics from")
    std = float(images.std())
    return float(images.mean()), std if std > 0 else 1.0


def build_model(specs, rng, input_shape=(1, 16, 16), bias_init=0.0, input_norm=(0.0, 1.0)):
    """Uniform He-style init: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), b = bias_init.

    ``input_norm`` is the fixed (mean, std) pixel standardisation, see ``input_stats``.
    """
    if isinstance(rng, (int, np.integer)):
        seed, rng = int(rng), make_rng(int(rng))
    else:
        seed = 0
    specs = list(specs)
    shapes = _check_specs(specs, input_shape)
    params = []
    for spec, si, so in zip(specs, shapes[:-1], shapes[1:]):
        ps = _param_shapes(spec, si, so)
        if ps is None:
            params.append(None)
            continue
        wshape, bshape = ps
        fan_in = int(np.prod(wshape[1:])) if spec.kind == "conv2d" else wshape[0]
        lim = np.sqrt(6.0 / fan_in)
        params.append({"W": rng.uniform(-lim, lim, size=wshape), "b": np.full(bshape, float(bias_init))})
    mean, std = input_norm
    return Model(tuple(input_shape), specs, params, seed=seed, input_mean=mean, input_std=std)


def cross_entropy_grad(logits, probs, labels):
    """Per-sample CE values and dCE/dlogits."""
    n = logits.shape[0]
    idx = np.arange(n)
    m = logits.max(axis=1)
    lse = np.log(np.exp(logits - m[:, None]).sum(axis=1)) + m
    vals = lse - logits[idx, labels]
    g = probs.copy()
    g[idx, labels] -= 1.0
    return vals, g


def penultimate_gradient(model, x, target=1):
    """dCE(h(x), target)/dz by reverse accumulation through the final dense layer.

    Only defined for binary models; for target class 1 the result equals
    (1 - p_1) * (w[:, 0] - w[:, 1]).
    """
    if model.n_classes != 2:
        raise ConfigError("penultimate gradient identity is defined for binary models only")
    x = as_f64(x)
    single = x.ndim == len(model.input_shape)
    xb = x[None] if single else x
    trace, caches = model.forward(xb)
    labels = np.full(xb.shape[0], target, dtype=int)
    _, g = cross_entropy_grad(trace.logits, trace.probs, labels)
    gz = model.backward(caches, {"logits": g}, until=model.n_activation_layers)
    return gz[0] if single else gz


def train_sgd(model, images, labels, lr=0.01, epochs=40, batch=32, seed=0, momentum=0.9):
    """Mini-batch SGD with momentum on cross-entropy; dropout active while training.

    Returns (trained copy of the model, per-epoch mean cross-entropy list).
    """
    images = as_f64(images)
    labels = np.asarray(labels, dtype=int)
    n = images.shape[0]
    if n == 0:
        raise ConfigError("empty training set")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ConfigError("labels out of range")
    model = model.copy()
    rng = make_rng(seed)
    vel = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            trace, caches = model.forward(images[idx], train_rng=rng)
            vals, g = cross_entropy_grad(trace.logits, trace.probs, labels[idx])
            total += vals.sum()
            _, pg = model.backward(caches, {"logits": g / len(idx)}, want_params=True)
            for p, v, gr in zip(model.params, vel, pg):
                if p is None:
                    continue
                for key in ("W", "b"):
                    v[key] = momentum * v[key] - lr * gr[key]
                    p[key] += v[key]
        history.append(total / n)
    model.trained = True
    return model, history
