"""
Experiment configuration and the artifact pipeline behind the CLI.

A run directory belongs to exactly one configuration. ``manifest.json`` records
it together with its hash; every artifact and output written afterwards carries
that hash. Intermediate artifacts are computed on first use and reloaded later.

Run-directory layout::

    manifest.json                 {"config_hash", "config"}
    data.json, data.bin           synthetic dataset
    model.json, splits.json       classifier and Train / AdvTrain / AdvTest ids
    hfc.json                      target-class mixtures (shadow-hfc.json for the shadow)
    attacks/<split>-<name>-<plain|hfc>-<eps>.json/.bin    adversarial batches
    detectors/eps-<eps>.json      detectors fitted at one budget

Budgets in the configuration are written in units of 1/256 of the pixel range;
CSV files hold them in pixel units (``epsilon`` column).
"""
import copy
import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import attacks as A
from .attacks import AttackConfig, AttackResult
from .data import SplitBundle, gen_synthetic, load_labeled_set, make_splits, save_labeled_set, split_train_test
from .detectors import (
    BayesianUncertainty,
    GaussianModel,
    KernelDensity,
    LayerEnsemble,
    LocalIntrinsicDimensionality,
    Mahalanobis,
    RbfSvm,
    load_detectors,
    save_detectors,
)
from .errors import ConfigError, PreconditionError
from .hfc import HfcLoss, HfcModel, fit_hfc, reduce_features
from .metrics import (
    ScoreReport,
    assemble_table,
    auc,
    format_table,
    read_reports_csv,
    write_reports_csv,
    write_reports_json,
)
from .nn import Model, build_model, default_specs, input_stats, train_sgd

log = logging.getLogger("hfclab")

UNIT = 1.0 / 256

DEFAULT_CONFIG = {
    "dataset": {
        "n": 3000,
        "image_size": 16,
        "lesion_intensity": [0.6, 0.9],
        "lesion_size": [3, 5],
        "lesion_contrast": 0.2,
        "noise": 0.01,
        "window": [0.375, 0.625],
        "train_frac": 0.8,
        "adv_train_frac": 0.7,
    },
    "model": {"architecture": "desk"},
    "training": {"lr": 0.01, "epochs": 40, "batch": 32, "momentum": 0.9},
    "attack": {
        "attacks": ["BIM", "PGD", "CW"],
        "epsilons": [8],
        "alpha": 0.02,
        "target": 1,
        "kappa": 0.0,
        "sweep_epsilons": [0.5, 1, 2, 4],
        "stress_epsilon": 1,
        "semiwhitebox_epsilon": 4,
    },
    "hfc": {"K": 2, "layers": None, "lambdas": None, "reg": 1e-6, "max_iter": 100, "tol": 1e-6},
    "detectors": {
        "kinds": ["KD", "BU", "LID", "MAHA", "MGM", "SVM", "DNN"],
        "lid_k": 20,
        "lid_references": 100,
        "bu_samples": 20,
        "svm_lambda": 1e-3,
        "svm_iters": 2000,
        "maha_reg": 1e-6,
    },
    "baselines": {
        "methods": ["Random", "Closest", "KDE", "LID"],
        "guide_weight": 1.0,
        "kde_weight": 1.0,
        "lid_weight": 0.1,
    },
    "seeds": {
        "data": 0,
        "split": 0,
        "model": 3,
        "train": 2,
        "attack": 0,
        "hfc": 0,
        "detector": 0,
        "shadow_model": 3,
        "shadow_train": 5,
    },
    "runtime": {"workers": 1, "chunk": 64},
}

ARCHITECTURES = {"desk": default_specs}
ATTACKS = ("FGSM", "BIM", "PGD", "CW")
DETECTOR_KINDS = ("KD", "BU", "LID", "MAHA", "MGM", "SVM", "DNN")
BASELINES = ("Random", "Closest", "KDE", "LID")


# --- configuration ------------------------------------------------------------------------


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _eps_list(v, name):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{name} must be a non-empty list")
    for e in v:
        if not isinstance(e, (int, float)) or isinstance(e, bool) or not e >= 0:
            raise ConfigError(f"{name} entries must be non-negative numbers, got {e!r}")


class ExperimentConfig:
    """Validated experiment configuration (defaults merged with overrides)."""

    def __init__(self, overrides=None):
        self.data = _merge(DEFAULT_CONFIG, overrides or {})
        self._validate()

    @classmethod
    def from_file(cls, path, extra=None):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("configuration file must hold a JSON object")
        cfg = cls(raw)
        return cfg.with_overrides(extra) if extra else cfg

    def with_overrides(self, overrides):
        return ExperimentConfig(_merge(self.data, overrides))

    def with_seed(self, seed):
        """Every seed set to ``seed``; the shadow keeps the victim's init and trains with ``seed + 1``."""
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        seeds = {k: seed for k in self.data["seeds"]}
        seeds["shadow_train"] = seed + 1
        return self.with_overrides({"seeds": seeds})

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self):
        return copy.deepcopy(self.data)

    @property
    def hash(self):
        """First 16 hex digits of sha256 over the canonical JSON, ``runtime`` excluded."""
        body = {k: v for k, v in self.data.items() if k != "runtime"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _validate(self):
        d = self.data
        ds = d["dataset"]
        if not isinstance(ds["n"], int) or ds["n"] <= 0 or ds["n"] % 2:
            raise ConfigError("dataset.n must be a positive even integer")
        for key in ("train_frac", "adv_train_frac"):
            if not 0 < ds[key] < 1:
                raise ConfigError(f"dataset.{key} must lie in (0, 1)")
        if d["model"]["architecture"] not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {d['model']['architecture']!r}")
        tr = d["training"]
        if not (tr["lr"] > 0 and isinstance(tr["epochs"], int) and tr["epochs"] > 0 and isinstance(tr["batch"], int) and tr["batch"] > 0):
            raise ConfigError("training needs lr > 0 and positive integer epochs / batch")
        at = d["attack"]
        bad = [a for a in at["attacks"] if a not in ATTACKS]
        if bad or not at["attacks"]:
            raise ConfigError(f"attack.attacks must be drawn from {ATTACKS}, got {at['attacks']}")
        for key in ("epsilons", "sweep_epsilons"):
            _eps_list(at[key], f"attack.{key}")
        for key in ("stress_epsilon", "semiwhitebox_epsilon"):
            _eps_list([at[key]], f"attack.{key}")
        if not at["alpha"] > 0:
            raise ConfigError("attack.alpha must be positive")
        if at["target"] not in (0, 1):
            raise ConfigError("attack.target must be a class index of the binary task (0 or 1)")
        if not at["kappa"] >= 0:
            raise ConfigError("attack.kappa must be non-negative")
        h = d["hfc"]
        if not isinstance(h["K"], int) or h["K"] < 1:
            raise ConfigError("hfc.K must be a positive integer")
        if h["layers"] is not None and (not isinstance(h["layers"], list) or not h["layers"]):
            raise ConfigError("hfc.layers must be null or a non-empty list")
        if h["lambdas"] is not None:
            if not isinstance(h["lambdas"], list) or len(h["lambdas"]) != len(self.hfc_layers()):
                raise ConfigError("hfc.lambdas must be null or one value per HFC layer")
        det = d["detectors"]
        bad = [k for k in det["kinds"] if k not in DETECTOR_KINDS]
        if bad or not det["kinds"]:
            raise ConfigError(f"detectors.kinds must be drawn from {DETECTOR_KINDS}, got {det['kinds']}")
        if det["lid_k"] < 2 or det["lid_references"] <= det["lid_k"]:
            raise ConfigError("detectors need lid_references > lid_k >= 2")
        bad = [m for m in d["baselines"]["methods"] if m not in BASELINES]
        if bad:
            raise ConfigError(f"baselines.methods must be drawn from {BASELINES}, got {bad}")
        for k, v in d["seeds"].items():
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"seeds.{k} must be a non-negative integer")
        rt = d["runtime"]
        if not (isinstance(rt["workers"], int) and rt["workers"] >= 1 and isinstance(rt["chunk"], int) and rt["chunk"] >= 1):
            raise ConfigError("runtime.workers and runtime.chunk must be positive integers")

    def hfc_layers(self):
        layers = self.data["hfc"]["layers"]
        return [1, 2, 3, 4] if layers is None else list(layers)


# --- chunked attack execution ---------------------------------------------------------------


def _guide(model, x, cfg, target=None, pool=None, mode="random", **kw):
    return A.guide_attack(model, x, pool, mode, cfg, target=target, **kw)


def _kde(model, x, cfg, target=None, kde=None, **kw):
    return A.kde_adaptive(model, x, kde, cfg, target=target, **kw)


def _lid(model, x, cfg, target=None, references=None, **kw):
    return A.lid_adaptive(model, x, references, cfg, target=target, **kw)


def _attack_chunk(job):
    fn, model, x, cfg, target, kwargs = job
    return fn(model, x, cfg, target=target, **kwargs)


def concat_results(parts, label=""):
    if not parts:
        raise ConfigError("no attack results to join")
    deltas = None if parts[0].deltas is None else np.concatenate([p.deltas for p in parts])
    return AttackResult(
        np.concatenate([p.x_adv for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.iterations for p in parts]),
        np.concatenate([p.objective for p in parts]),
        np.concatenate([p.predictions for p in parts]),
        deltas,
        label or parts[0].label,
    )


def run_chunked(fn, model, x, cfg, target, workers=1, chunk=64, per_row=None, label="", **kwargs):
    """Run ``fn`` over fixed-size row chunks, optionally in a process pool.

    Chunk boundaries do not depend on ``workers``, so results are identical for
    any pool size. ``per_row`` holds keyword arrays sliced along with ``x``.
    """
    n = len(x)
    if n == 0:
        raise ConfigError("nothing to attack")
    per_row = per_row or {}
    jobs = []
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        kw = dict(kwargs)
        kw.update({k: v[a:b] for k, v in per_row.items()})
        jobs.append((fn, model, x[a:b], cfg, target, kw))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_attack_chunk, jobs))
    else:
        parts = [_attack_chunk(j) for j in jobs]
    return concat_results(parts, label)


# --- pipeline -------------------------------------------------------------------------------


def _eps_tag(e):
    return f"{float(e):g}".replace(".", "p")


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1)
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


class Pipeline:
    """Load-or-compute access to every artifact of one run directory."""

    def __init__(self, config, out, force=False):
        self.cfg = config
        self.hash = config.hash
        self.out = out
        self.force = force
        os.makedirs(out, exist_ok=True)
        self._mem = {}
        self._claim_directory()

    # -- bookkeeping ---------------------------------------------------------------------
    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _claim_directory(self):
        mpath = self.path("manifest.json")
        if os.path.exists(mpath):
            old = _read_json(mpath).get("config_hash")
            if old == self.hash:
                return
            if not self.force:
                raise PreconditionError(
                    f"{self.out} holds a run with config {old}; this config is {self.hash} (use --force or another --out)"
                )
            log.info("discarding artifacts of config %s", old)
            for name in os.listdir(self.out):
                p = self.path(name)
                shutil.rmtree(p) if os.path.isdir(p) else os.remove(p)
        _write_json(mpath, {"config_hash": self.hash, "config": self.cfg.to_dict()})

    def _stamped(self, path):
        """True when ``path`` exists and carries this run's hash."""
        if not os.path.exists(path):
            return False
        try:
            return _read_json(path).get("config_hash") == self.hash
        except (OSError, json.JSONDecodeError):
            return False

    def _stamp(self, path):
        d = _read_json(path)
        d["config_hash"] = self.hash
        _write_json(path, d)

    def claim_outputs(self, names):
        """Refuse to overwrite existing command outputs unless forced."""
        existing = [n for n in names if os.path.exists(self.path(n))]
        if existing and not self.force:
            raise PreconditionError(f"outputs already exist in {self.out}: {', '.join(existing)} (use --force)")
        return [self.path(n) for n in names]

    def workers(self):
        return self.cfg["runtime"]["workers"], self.cfg["runtime"]["chunk"]

    # -- data and model -------------------------------------------------------------------
    def dataset(self):
        if "data" in self._mem:
            return self._mem["data"]
        stem = self.path("data")
        if self._stamped(stem + ".json"):
            data = load_labeled_set(stem)
        else:
            ds = self.cfg["dataset"]
            data = gen_synthetic(
                ds["n"],
                ds["image_size"],
                seed=self.cfg["seeds"]["data"],
                lesion_intensity=tuple(ds["lesion_intensity"]),
                lesion_size=tuple(ds["lesion_size"]),
                noise=ds["noise"],
                lesion_contrast=ds["lesion_contrast"],
                window=tuple(ds["window"]),
            )
            save_labeled_set(stem, data, seed=self.cfg["seeds"]["data"])
            self._stamp(stem + ".json")
        self._mem["data"] = data
        return data

    def _train(self, model_seed, train_seed):
        data = self.dataset()
        ds, tr = self.cfg["dataset"], self.cfg["training"]
        train_idx, _ = split_train_test(data, ds["train_frac"], self.cfg["seeds"]["split"])
        x = data.images[train_idx]
        specs = ARCHITECTURES[self.cfg["model"]["architecture"]]()
        init = build_model(specs, model_seed, input_shape=x.shape[1:], input_norm=input_stats(x))
        return train_sgd(
            init, x, data.labels[train_idx], lr=tr["lr"], epochs=tr["epochs"], batch=tr["batch"], seed=train_seed, momentum=tr["momentum"]
        )

    def model(self, retrain=False):
        if "model" in self._mem and not retrain:
            return self._mem["model"]
        mpath, spath = self.path("model.json"), self.path("splits.json")
        if not retrain and self._stamped(mpath) and self._stamped(spath):
            model = Model.load(mpath)
            splits = SplitBundle.from_dict(_read_json(spath), self.dataset())
        else:
            s = self.cfg["seeds"]
            log.info("training classifier (init seed %d, train seed %d)", s["model"], s["train"])
            model, history = self._train(s["model"], s["train"])
            ds = self.cfg["dataset"]
            splits = make_splits(self.dataset(), model, ds["train_frac"], ds["adv_train_frac"], s["split"])
            model.save(mpath)
            self._stamp(mpath)
            _write_json(spath, {**splits.to_dict(), "config_hash": self.hash, "loss_history": [float(h) for h in history]})
        self._mem["model"], self._mem["splits"] = model, splits
        return model

    def splits(self):
        self.model()
        return self._mem["splits"]

    def shadow_model(self):
        if "shadow" in self._mem:
            return self._mem["shadow"]
        mpath = self.path("shadow-model.json")
        if self._stamped(mpath):
            model = Model.load(mpath)
        else:
            s = self.cfg["seeds"]
            log.info("training shadow (init seed %d, train seed %d)", s["shadow_model"], s["shadow_train"])
            model, _ = self._train(s["shadow_model"], s["shadow_train"])
            model.save(mpath)
            self._stamp(mpath)
        self._mem["shadow"] = model
        return model

    def clean_metrics(self):
        """Accuracy and AUC (P(class 1) as score) on the held-out test split."""
        data, model = self.dataset(), self.model()
        _, test_idx = split_train_test(data, self.cfg["dataset"]["train_frac"], self.cfg["seeds"]["split"])
        y = data.labels[test_idx]
        trace = model.trace(data.images[test_idx])
        p1 = trace.probs[:, 1]
        return {
            "test_accuracy": float(np.mean(trace.predictions() == y)),
            "test_auc": auc(p1[y == 0], p1[y == 1]),
            "n_test": int(len(y)),
        }

    # -- HFC ------------------------------------------------------------------------------
    def hfc(self, shadow=False):
        key = "shadow-hfc" if shadow else "hfc"
        if key in self._mem:
            return self._mem[key]
        path = self.path(key + ".json")
        if self._stamped(path):
            hm = HfcModel.from_dict(_read_json(path))
        else:
            model = self.shadow_model() if shadow else self.model()
            h = self.cfg["hfc"]
            layers = self.cfg.hfc_layers()
            lambdas = None if h["lambdas"] is None else dict(zip(layers, h["lambdas"]))
            hm = fit_hfc(
                model,
                self.splits().train,
                self.target,
                K=h["K"],
                layers=layers,
                reg=h["reg"],
                max_iter=h["max_iter"],
                tol=h["tol"],
                seed=self.cfg["seeds"]["hfc"],
                lambdas=lambdas,
            )
            _write_json(path, {**hm.to_dict(), "config_hash": self.hash})
        self._mem[key] = hm
        return hm

    # -- attacks ------------------------------------------------------------------------------
    @property
    def target(self):
        return int(self.cfg["attack"]["target"])

    def sources(self, split):
        """Rows of ``split`` that are attacked: every sample not already of the target class."""
        ds = getattr(self.splits(), split)
        rows = np.flatnonzero(ds.labels != self.target)
        if rows.size == 0:
            raise PreconditionError(f"{split} has no samples outside the target class")
        return ds.subset(rows)

    def attack_config(self, eps, addon=None, **kw):
        at = self.cfg["attack"]
        return AttackConfig(eps * UNIT, alpha=at["alpha"] * UNIT, kappa=at["kappa"], seed=self.cfg["seeds"]["attack"], addon=addon, **kw)

    def attack(self, name, eps, hfc=False, split="adv_test", shadow=False):
        """Cached adversarial batch for the ``split`` sources.

        ``name`` is an attack (BIM/PGD/CW/FGSM) or a baseline (Random/Closest/KDE/LID).
        With ``shadow`` the AEs are generated on the shadow model.
        """
        tag = f"{'shadow-' if shadow else ''}{split}-{name}-{'hfc' if hfc else 'plain'}-{_eps_tag(eps)}"
        if tag in self._mem:
            return self._mem[tag]
        stem = self.path("attacks", tag)
        if self._stamped(stem + ".json"):
            res = AttackResult.load(stem)
        else:
            res = self._run_attack(name, eps, hfc, split, shadow)
            os.makedirs(self.path("attacks"), exist_ok=True)
            res.save(stem, config_hash=self.hash)
        self._mem[tag] = res
        return res

    def _run_attack(self, name, eps, hfc, split, shadow):
        model = self.shadow_model() if shadow else self.model()
        src = self.sources(split)
        x, c = src.images, self.target
        addon = HfcLoss({c: self.hfc(shadow=shadow)}, c) if hfc else None
        cfg = self.attack_config(eps, addon)
        workers, chunk = self.workers()
        label = name + ("+HFC" if hfc else "")
        log.info("attack %s eps=%g/256 on %d %s rows", label, eps, len(x), split)
        run = lambda fn, per_row=None, **kw: run_chunked(  # noqa: E731
            fn, model, x, cfg, c, workers=workers, chunk=chunk, per_row=per_row, label=label, **kw
        )
        if name == "FGSM":
            return run(A.fgsm)
        if name == "BIM":
            return run(A.bim)
        if name == "PGD":
            return run(A.pgd, per_row={"noise": A.pgd_noise(x.shape, cfg.epsilon, cfg.seed)})
        if name == "CW":
            return run(A.cw_inf)
        b = self.cfg["baselines"]
        if name in ("Random", "Closest"):
            pool = self.splits().train.of_class(c)
            idx = A.choose_guides(model, x, pool.images, name.lower(), seed=cfg.seed + c)
            return run(_guide, per_row={"guide_index": idx}, pool=pool, mode=name.lower(), weight=b["guide_weight"])
        if name == "KDE":
            return run(_kde, kde=self.detectors(eps)["KD"], weight=b["kde_weight"])
        if name == "LID":
            refs = self.lid_reference_trace(model)
            references = {l: reduce_features(refs, l) for l in range(1, model.n_activation_layers + 1)}
            return run(_lid, references=references, weight=b["lid_weight"], k=self.cfg["detectors"]["lid_k"])
        raise ConfigError(f"unknown attack {name!r}")

    # -- detectors ----------------------------------------------------------------------------
    def lid_reference_trace(self, model=None):
        model = self.model() if model is None else model
        train = self.splits().train
        m = min(self.cfg["detectors"]["lid_references"], len(train))
        return model.trace(train.images[:m])

    def detectors(self, eps):
        """Detectors fitted at budget ``eps`` (supervised ones on AdvTrain clean vs plain-BIM rows)."""
        key = f"det-{_eps_tag(eps)}"
        if key in self._mem:
            return self._mem[key]
        path = self.path("detectors", f"eps-{_eps_tag(eps)}.json")
        if self._stamped(path):
            dets = load_detectors(path)
        else:
            dets = self._fit_detectors(eps)
            os.makedirs(self.path("detectors"), exist_ok=True)
            save_detectors(path, dets, config_hash=self.hash)
        self._mem[key] = dets
        return dets

    def _fit_detectors(self, eps):
        model, sp, dc = self.model(), self.splits(), self.cfg["detectors"]
        ttr = model.trace(sp.train.images)
        kinds = dc["kinds"]
        needs_adv = any(k in kinds for k in ("LID", "SVM", "DNN"))
        if needs_adv:
            ct = model.trace(sp.adv_train.images)
            at = model.trace(self.attack("BIM", eps, split="adv_train").x_adv)
        log.info("fitting detectors %s at eps=%g/256", kinds, eps)
        dets = {}
        for k in kinds:
            if k == "KD":
                dets[k] = KernelDensity.fit(ttr.z, sp.train.labels)
            elif k == "MAHA":
                dets[k] = Mahalanobis.fit(ttr, sp.train.labels, reg=dc["maha_reg"])
            elif k == "MGM":
                dets[k] = GaussianModel.fit(ttr.z, sp.train.labels)
            elif k == "LID":
                dets[k] = LocalIntrinsicDimensionality.fit(self.lid_reference_trace(), ct, at, k=dc["lid_k"])
            elif k == "SVM":
                dets[k] = RbfSvm.fit(ct.z, at.z, lam=dc["svm_lambda"], iters=dc["svm_iters"])
            elif k == "DNN":
                dets[k] = LayerEnsemble.fit(ct, at)
            elif k == "BU":
                dets[k] = BayesianUncertainty(dc["bu_samples"], seed=self.cfg["seeds"]["detector"])
        return dets

    def clean_scores(self, dets):
        model = self.model()
        x = self.splits().adv_test.images
        trace = model.trace(x)
        return {k: d.score(trace, model, x) for k, d in dets.items()}

    def score(self, dets, res, attack_label, hfc, eps, clean=None):
        """One ScoreReport per detector: AdvTest clean rows versus ``res``."""
        model = self.model()
        clean = self.clean_scores(dets) if clean is None else clean
        trace = model.trace(res.x_adv)
        adv_acc = float(np.mean(trace.predictions() == self.target))
        out = []
        for k, d in dets.items():
            s = d.score(trace, model, res.x_adv)
            out.append(ScoreReport.from_scores(k, attack_label, hfc, clean[k], s, epsilon=eps * UNIT, adv_acc=adv_acc))
        return out


# --- commands -------------------------------------------------------------------------------
#
# Each command writes its outputs into the run directory and returns their paths.
# Output schemas (all CSV files start with a config_hash column):
#
#   train.json            test_accuracy, test_auc, n_test, n_train, n_adv_train, n_adv_test
#   attacks_<plain|hfc>.csv   attack, hfc, epsilon, n, adv_acc, mean_iterations, max_linf
#   detect.csv / sweep.csv / baselines.csv / semiwhitebox.csv   metrics.REPORT_FIELDS
#   stress.csv            layer, direction, epsilon, normal_mean, adversarial_mean, difference
#   projection.csv        kind, label, pc1, pc2


def _write_csv(path, fields, rows, config_hash):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config_hash"] + fields)
        w.writeheader()
        for r in rows:
            w.writerow({"config_hash": config_hash, **r})


def _fmt(v):
    return repr(float(v))


def cmd_train(pipe):
    (out,) = pipe.claim_outputs(["train.json"])
    sp = pipe.splits()
    info = pipe.clean_metrics()
    info.update(n_train=len(sp.train), n_adv_train=len(sp.adv_train), n_adv_test=len(sp.adv_test))
    _write_json(out, {"config_hash": pipe.hash, **info})
    return [out]


def cmd_attack(pipe, with_hfc=False):
    (out,) = pipe.claim_outputs([f"attacks_{'hfc' if with_hfc else 'plain'}.csv"])
    rows = []
    x = pipe.sources("adv_test").images
    for eps in pipe.cfg["attack"]["epsilons"]:
        for name in pipe.cfg["attack"]["attacks"]:
            res = pipe.attack(name, eps, hfc=with_hfc)
            rows.append(
                {
                    "attack": name,
                    "hfc": int(with_hfc),
                    "epsilon": _fmt(eps * UNIT),
                    "n": len(res),
                    "adv_acc": _fmt(res.adv_acc),
                    "mean_iterations": _fmt(res.iterations.mean()),
                    "max_linf": _fmt(np.abs(res.x_adv - x).max()),
                }
            )
    _write_csv(out, ["attack", "hfc", "epsilon", "n", "adv_acc", "mean_iterations", "max_linf"], rows, pipe.hash)
    return [out]


def detection_reports(pipe, eps):
    dets = pipe.detectors(eps)
    clean = pipe.clean_scores(dets)
    reports = []
    for name in pipe.cfg["attack"]["attacks"]:
        for hfc in (False, True):
            reports += pipe.score(dets, pipe.attack(name, eps, hfc=hfc), name, hfc, eps, clean)
    return reports


def cmd_detect(pipe):
    csv_out, json_out, txt_out = pipe.claim_outputs(["detect.csv", "detect.json", "table.txt"])
    reports, blocks = [], []
    for eps in pipe.cfg["attack"]["epsilons"]:
        rep = detection_reports(pipe, eps)
        reports += rep
        blocks.append(f"epsilon = {eps}/256 (AUC and TPR@90 in %, without / with HFC)\n" + format_table(assemble_table(rep)))
        adv = {r.attack + (" + HFC" if r.hfc else ""): r.adv_acc for r in rep}
        blocks.append("Adv. Acc: " + ", ".join(f"{k} {100 * v:.1f}" for k, v in adv.items()))
    write_reports_csv(csv_out, reports, pipe.hash)
    write_reports_json(json_out, reports, pipe.hash)
    with open(txt_out, "w") as fh:
        fh.write(f"config {pipe.hash}\n" + "\n\n".join(blocks) + "\n")
    return [csv_out, json_out, txt_out]


def stress_rows(pipe):
    model = pipe.model()
    x = pipe.splits().adv_test.images
    eps = pipe.cfg["attack"]["stress_epsilon"]
    cfg = pipe.attack_config(eps)
    rows = []
    for layer in range(1, model.n_activation_layers + 1):
        for direction in ("up", "down"):
            r = A.stress(model, x, layer, direction, cfg)
            rows.append(
                {
                    "layer": layer,
                    "direction": direction,
                    "epsilon": eps * UNIT,
                    "normal_mean": r["mean_before"],
                    "adversarial_mean": r["mean_after"],
                    "difference": r["mean_after"] - r["mean_before"],
                }
            )
    return rows


def cmd_stress(pipe):
    (out,) = pipe.claim_outputs(["stress.csv"])
    rows = [{k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()} for r in stress_rows(pipe)]
    _write_csv(out, ["layer", "direction", "epsilon", "normal_mean", "adversarial_mean", "difference"], rows, pipe.hash)
    return [out]


def sweep_reports(pipe):
    """BIM with and without HFC at every sweep budget; detectors refit per budget."""
    reports = []
    for eps in pipe.cfg["attack"]["sweep_epsilons"]:
        dets = pipe.detectors(eps)
        clean = pipe.clean_scores(dets)
        for hfc in (False, True):
            reports += pipe.score(dets, pipe.attack("BIM", eps, hfc=hfc), "BIM", hfc, eps, clean)
    return reports


def cmd_sweep(pipe):
    (out,) = pipe.claim_outputs(["sweep.csv"])
    write_reports_csv(out, sweep_reports(pipe), pipe.hash)
    return [out]


def baseline_reports(pipe, eps=None):
    """Adaptive baselines and BIM+HFC at the potent budget, scored by the same detectors."""
    eps = pipe.cfg["attack"]["epsilons"][0] if eps is None else eps
    dets = pipe.detectors(eps)
    clean = pipe.clean_scores(dets)
    reports = []
    for method in pipe.cfg["baselines"]["methods"]:
        reports += pipe.score(dets, pipe.attack(method, eps), method, False, eps, clean)
    reports += pipe.score(dets, pipe.attack("BIM", eps, hfc=True), "HFC", True, eps, clean)
    return reports


def cmd_baselines(pipe):
    (out,) = pipe.claim_outputs(["baselines.csv"])
    write_reports_csv(out, baseline_reports(pipe), pipe.hash)
    return [out]


def semiwhitebox_reports(pipe):
    """Shadow-generated BIM / BIM+HFC, scored by detectors of the victim (refit at this budget)."""
    eps = pipe.cfg["attack"]["semiwhitebox_epsilon"]
    dets = pipe.detectors(eps)
    clean = pipe.clean_scores(dets)
    reports, shadow_acc = [], {}
    for hfc in (False, True):
        res = pipe.attack("BIM", eps, hfc=hfc, shadow=True)
        shadow_acc["BIM" + ("+HFC" if hfc else "")] = res.adv_acc
        reports += pipe.score(dets, res, "BIM", hfc, eps, clean)
    return reports, shadow_acc


def cmd_semiwhitebox(pipe):
    csv_out, json_out = pipe.claim_outputs(["semiwhitebox.csv", "semiwhitebox.json"])
    reports, shadow_acc = semiwhitebox_reports(pipe)
    write_reports_csv(csv_out, reports, pipe.hash)
    write_reports_json(json_out, reports, pipe.hash)
    d = _read_json(json_out)
    d["shadow_adv_acc"] = shadow_acc
    _write_json(json_out, d)
    return [csv_out, json_out]


def pca_2d(reference, *others):
    """Project onto the top-2 principal axes of ``reference`` (sign fixed by the largest loading)."""
    mu = reference.mean(axis=0)
    _, _, vt = np.linalg.svd(reference - mu, full_matrices=False)
    axes = vt[:2]
    flip = np.sign(axes[np.arange(len(axes)), np.argmax(np.abs(axes), axis=1)])
    axes = axes * flip[:, None]
    return [(v - mu) @ axes.T for v in (reference,) + others]


def cmd_project(pipe):
    (out,) = pipe.claim_outputs(["projection.csv"])
    model = pipe.model()
    test = pipe.splits().adv_test
    eps = pipe.cfg["attack"]["epsilons"][0]
    plain, hfc = pipe.attack("BIM", eps), pipe.attack("BIM", eps, hfc=True)
    z = [model.trace(v).z for v in (test.images, plain.x_adv, hfc.x_adv)]
    proj = pca_2d(*z)
    src_labels = pipe.sources("adv_test").labels
    rows = []
    for kind, p, labels in zip(("clean", "BIM", "BIM+HFC"), proj, (test.labels, src_labels, src_labels)):
        rows += [{"kind": kind, "label": int(y), "pc1": _fmt(a), "pc2": _fmt(b)} for y, (a, b) in zip(labels, p)]
    _write_csv(out, ["kind", "label", "pc1", "pc2"], rows, pipe.hash)
    return [out]


REPORT_SOURCES = ("detect.csv", "sweep.csv", "baselines.csv", "semiwhitebox.csv")


def cmd_report(out_dir, force=False):
    """Collect the score CSVs of a run directory into ``report.txt``; mixed hashes are refused."""
    path = os.path.join(out_dir, "report.txt")
    if os.path.exists(path) and not force:
        raise PreconditionError(f"{path} already exists (use --force)")
    found = sorted(n for n in os.listdir(out_dir) if n.endswith(".csv")) if os.path.isdir(out_dir) else []
    if not found:
        raise PreconditionError(f"no CSV outputs in {out_dir}")
    hashes, sections = set(), []
    for name in found:
        with open(os.path.join(out_dir, name), newline="") as fh:
            rows = list(csv.DictReader(fh))
        hashes |= {r.get("config_hash") for r in rows}
        if name not in REPORT_SOURCES:
            sections.append(f"[{name}] {len(rows)} rows")
            continue
        lines = [f"[{name}]"]
        for _, r in read_reports_csv(os.path.join(out_dir, name)):
            lines.append(
                f"  eps={r.epsilon * 256:g}/256 {r.attack}{' +HFC' if r.hfc else ''} {r.detector}: "
                f"AUC {r.auc:.3f} TPR@90 {r.tpr_at_90:.3f} AdvAcc {r.adv_acc:.3f}"
            )
        sections.append("\n".join(lines))
    if len(hashes) != 1 or None in hashes:
        raise PreconditionError(f"outputs in {out_dir} mix configuration hashes: {sorted(map(str, hashes))}")
    with open(path, "w") as fh:
        fh.write(f"config {hashes.pop()}\n\n" + "\n\n".join(sections) + "\n")
    return [path]
