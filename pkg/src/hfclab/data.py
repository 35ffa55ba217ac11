"""
Synthetic "lesion present / absent" images and the Train / AdvTrain / AdvTest protocol.

On-disk layout (``save_labeled_set``):

* ``<stem>.json``: ``{"format", "n", "image_shape", "labels", "ids", "seed", "dtype": "<f8", "blob"}``
* ``<stem>.bin``: images as little-endian float64, row-major ``(n, C, H, W)``.
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import make_rng


@dataclass
class LabeledSet:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) in {0, 1}
    ids: np.ndarray  # (n,) unique ints

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ConfigError("images, labels and ids must have equal lengths")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ConfigError("ids must be unique")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.images[idx], self.labels[idx], self.ids[idx])

    def of_class(self, c):
        return self.subset(np.flatnonzero(self.labels == c))


@dataclass
class SplitBundle:
    train: LabeledSet
    adv_train: LabeledSet
    adv_test: LabeledSet
    seed: int

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "train": self.train.ids.tolist(),
            "adv_train": self.adv_train.ids.tolist(),
            "adv_test": self.adv_test.ids.tolist(),
        }

    @classmethod
    def from_dict(cls, d, data):
        pos = {int(i): k for k, i in enumerate(data.ids)}
        pick = lambda key: data.subset([pos[int(i)] for i in d[key]])  # noqa: E731
        return cls(pick("train"), pick("adv_train"), pick("adv_test"), d["seed"])


BG_LEVEL = (0.05, 0.2)
BG_AMP = (0.1, 0.35)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), rng.uniform(*BG_LEVEL))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size - 1, size=2)
        width = rng.uniform(2.0, size / 2.5)
        amp = rng.uniform(*BG_AMP)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return img


def gen_synthetic(
    n,
    image_size=16,
    seed=0,
    lesion_intensity=(0.6, 0.9),
    lesion_size=(3, 5),
    noise=0.01,
    lesion_contrast=0.2,
    window=(0.375, 0.625),
):
    """Balanced two-class set: smooth blob background + noise, class 1 adds a bright square.

    The square adds ``intensity * lesion_contrast`` on top of the background.
    The composed scene (clamped to [0, 1]) is then mapped linearly into the
    intensity ``window``, mimicking a low-contrast scan; ``window=(0, 1)``
    keeps the raw scene.
    """
    lo, hi = window
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError(f"window must satisfy 0 <= lo < hi <= 1, got {window}")
    if n <= 0 or n % 2:
        raise ConfigError(f"n must be a positive even count, got {n}")
    rng = make_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, image_size, image_size))
    for i in range(n):
        img = _background(rng, image_size) + rng.normal(0.0, noise, size=(image_size, image_size))
        if labels[i] == 1:
            s = int(rng.integers(lesion_size[0], lesion_size[1] + 1))
            r0, c0 = rng.integers(0, image_size - s + 1, size=2)
            level = rng.uniform(*lesion_intensity)
            img[r0 : r0 + s, c0 : c0 + s] += level * lesion_contrast
        images[i, 0] = lo + (hi - lo) * np.clip(img, 0.0, 1.0)
    return LabeledSet(images, labels, np.arange(n))


def split_train_test(data, train_frac=0.8, seed=0):
    """Seeded permutation; the first round(train_frac * n) samples form Train."""
    order = make_rng(seed).permutation(len(data))
    n_train = int(round(train_frac * len(data)))
    return order[:n_train], order[n_train:]


def make_splits(data, model, train_frac=0.8, adv_train_frac=0.7, seed=0):
    """Train / AdvTrain / AdvTest; misclassified test samples are discarded."""
    tr, te = split_train_test(data, train_frac, seed)
    if len(te) == 0:
        raise ConfigError("test split is empty")
    pred = model.predict(data.images[te])
    kept = te[pred == data.labels[te]]
    n_adv_train = int(round(adv_train_frac * len(kept)))
    if len(kept) - n_adv_train <= 0:
        raise ConfigError("AdvTest is empty after discarding misclassified samples")
    return SplitBundle(
        data.subset(tr), data.subset(kept[:n_adv_train]), data.subset(kept[n_adv_train:]), seed
    )


def save_images_blob(path, images):
    np.ascontiguousarray(images, dtype="<f8").tofile(path)


def load_images_blob(path, shape):
    arr = np.fromfile(path, dtype="<f8")
    return arr.reshape(shape).astype(np.float64)


def save_labeled_set(stem, data, seed=None):
    blob = stem + ".bin"
    save_images_blob(blob, data.images)
    meta = {
        "format": "hfclab.dataset/1",
        "n": len(data),
        "image_shape": list(data.images.shape[1:]),
        "labels": data.labels.tolist(),
        "ids": data.ids.tolist(),
        "seed": seed,
        "dtype": "<f8",
        "blob": os.path.basename(blob),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(meta, fh)


def load_labeled_set(stem):
    with open(stem + ".json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "hfclab.dataset/1":
        raise ConfigError(f"{stem}.json is not a hfclab dataset")
    blob = os.path.join(os.path.dirname(stem + ".json"), meta["blob"])
    images = load_images_blob(blob, [meta["n"], *meta["image_shape"]])
    return LabeledSet(images, meta["labels"], meta["ids"])
