import numpy as np
import pytest

from hfclab.data import LabeledSet, SplitBundle, gen_synthetic, load_labeled_set, make_splits, save_labeled_set
from hfclab.errors import ConfigError


class FixedPredictor:
    """Stand-in classifier: predicts the stored label, optionally flipped for chosen ids."""

    def __init__(self, data, wrong=()):
        self.lookup = {img.tobytes(): (1 - y if i in wrong else y) for img, y, i in zip(data.images, data.labels, data.ids)}

    def predict(self, x):
        return np.array([self.lookup[img.tobytes()] for img in x])


def test_gen_deterministic_balanced_in_range():
    a, b = gen_synthetic(100, seed=3), gen_synthetic(100, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert np.sum(a.labels == 0) == 50 and np.sum(a.labels == 1) == 50
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert a.images.shape == (100, 1, 16, 16)
    assert not np.array_equal(a.images, gen_synthetic(100, seed=4).images)


def test_gen_window_and_lesion():
    d = gen_synthetic(40, seed=0, window=(0.375, 0.625))
    assert d.images.min() >= 0.375 and d.images.max() <= 0.625
    raw = gen_synthetic(40, seed=0, window=(0.0, 1.0), noise=0.0)
    # windowing is an affine map of the raw scene
    assert np.allclose(gen_synthetic(40, seed=0, window=(0.25, 0.75), noise=0.0).images, 0.25 + 0.5 * raw.images)
    # lesion images are brighter at their maximum than the lesion-free background would allow
    bg = gen_synthetic(40, seed=0, window=(0.0, 1.0), noise=0.0, lesion_contrast=0.0)
    lift = (raw.images - bg.images).reshape(40, -1).max(axis=1)
    assert np.all(lift[raw.labels == 0] == 0) and np.all(lift[raw.labels == 1] > 0)


@pytest.mark.parametrize("kw", [{"n": 0}, {"n": -2}, {"n": 3}, {"n": 4, "window": (0.6, 0.4)}, {"n": 4, "window": (-0.1, 0.5)}])
def test_gen_errors(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(**kw)


def test_labeled_set_validation():
    with pytest.raises(ConfigError):
        LabeledSet(np.zeros((2, 1, 2, 2)), [0, 1], [0, 0])
    with pytest.raises(ConfigError):
        LabeledSet(np.zeros((2, 1, 2, 2)), [0], [0, 1])


def test_split_arithmetic_perfect_model():
    data = gen_synthetic(1000, image_size=8, seed=0)
    sp = make_splits(data, FixedPredictor(data), 0.8, 0.7, seed=1)
    assert (len(sp.train), len(sp.adv_train), len(sp.adv_test)) == (800, 140, 60)
    ids = [set(s.ids.tolist()) for s in (sp.train, sp.adv_train, sp.adv_test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])


def test_split_discards_misclassified():
    data = gen_synthetic(200, image_size=8, seed=0)
    sp0 = make_splits(data, FixedPredictor(data), seed=2)
    test_ids = np.concatenate([sp0.adv_train.ids, sp0.adv_test.ids])
    wrong = set(test_ids[:5].tolist())
    sp = make_splits(data, FixedPredictor(data, wrong), seed=2)
    kept = set(sp.adv_train.ids.tolist()) | set(sp.adv_test.ids.tolist())
    assert kept == set(test_ids.tolist()) - wrong
    assert np.array_equal(sp.train.ids, sp0.train.ids)


def test_split_all_wrong_is_error():
    data = gen_synthetic(100, image_size=8, seed=0)
    with pytest.raises(ConfigError):
        make_splits(data, FixedPredictor(data, wrong=set(range(100))))


def test_dataset_and_split_roundtrip(tmp_path):
    data = gen_synthetic(30, image_size=8, seed=5)
    save_labeled_set(str(tmp_path / "d"), data, seed=5)
    back = load_labeled_set(str(tmp_path / "d"))
    assert back.images.tobytes() == data.images.tobytes()
    assert np.array_equal(back.labels, data.labels) and np.array_equal(back.ids, data.ids)
    raw = np.fromfile(tmp_path / "d.bin", dtype="<f8")
    assert raw.size == 30 * 64
    sp = make_splits(data, FixedPredictor(data), seed=0)
    again = SplitBundle.from_dict(sp.to_dict(), data)
    assert np.array_equal(again.adv_test.images, sp.adv_test.images)
