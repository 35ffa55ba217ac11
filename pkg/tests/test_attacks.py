import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfclab.attacks import (
    AttackConfig,
    AttackResult,
    KdeLoss,
    bim,
    choose_guides,
    clip_ball,
    cw_inf,
    fgsm,
    guide_attack,
    kde_adaptive,
    lid_adaptive,
    lid_estimates,
    pgd,
    pgd_noise,
    run_iterative,
    stress,
)
from hfclab.data import LabeledSet
from hfclab.detectors import KernelDensity
from hfclab.errors import ConfigError
from hfclab.hfc import HfcLoss, reduce_features
from hfclab.losses import CrossEntropy, CWMargin, input_gradient
from hfclab.nn import FeatureTrace
from oracles import lid_formula, random_hfc, small_model


def _x(n=4, seed=0, size=6):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=(n, 1, size, size))


def test_clip_ball_examples():
    x = np.array([0.5])
    assert np.array_equal(clip_ball(x, x, 0.1), x)
    assert clip_ball(np.array([0.9]), x, 0.1)[0] == pytest.approx(0.6)
    assert clip_ball(np.array([-0.2]), np.array([0.0]), 0.5)[0] == 0.0


def test_config_defaults_and_validation():
    assert AttackConfig(1 / 256).steps == 100
    assert AttackConfig(8 / 256).steps == 800
    for bad in ({"epsilon": -1}, {"epsilon": 0.1, "alpha": -1}, {"epsilon": 0.1, "kappa": -1}, {"epsilon": 0.1, "steps": 0}):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)
    with pytest.raises(ConfigError):
        AttackConfig(0.1, alpha=0)


def test_fgsm_zero_gradient_and_sign():
    m = small_model(2, bias=-50.0)  # every ReLU dead: the input gradient vanishes
    x = _x()
    assert np.array_equal(fgsm(m, x, AttackConfig(0.1), target=1).x_adv, x)
    m = small_model(0)
    eps = 0.05
    res = fgsm(m, x, AttackConfig(eps), target=1)
    g = input_gradient(m, x, CrossEntropy(1))
    assert np.allclose(res.x_adv, np.clip(x - eps * np.sign(g), 0, 1), rtol=0, atol=1e-15)


def test_bim_null_step_and_budget():
    m, x = small_model(0), _x()
    res = bim(m, x, AttackConfig(0.05, alpha=0.0, steps=5), target=1)
    assert np.array_equal(res.x_adv, x)
    res = bim(m, x, AttackConfig(0.05, alpha=0.01), target=1)
    assert np.abs(res.x_adv - x).max() <= 0.05 + 1e-12
    assert np.array_equal(res.success, res.predictions == 1)
    assert np.array_equal(res.predictions, m.predict(res.x_adv))


def test_bim_rescaled_loss_same_trajectory():
    m, x = small_model(1), _x()
    hm = random_hfc(m, np.random.default_rng(0))
    cfg = AttackConfig(0.05, alpha=0.005)
    t = np.ones(len(x), dtype=int)
    base = CrossEntropy(1) + HfcLoss({1: hm}, 1)
    a = run_iterative(m, x, base, cfg, t)
    b = run_iterative(m, x, 10 * base, cfg, t)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_pgd_determinism_start_and_degenerate():
    m, x = small_model(0), _x()
    cfg = AttackConfig(0.03, alpha=0.01, seed=5)
    a, b = pgd(m, x, cfg, target=1), pgd(m, x, cfg, target=1)
    assert a.x_adv.tobytes() == b.x_adv.tobytes()
    noise = pgd_noise(x.shape, 0.03, 5)
    assert np.abs(noise).max() <= 0.03
    one = pgd(m, x, AttackConfig(0.03, alpha=0.0, steps=1, seed=5), target=1)
    assert np.array_equal(one.x_adv, clip_ball(x + noise, x, 0.03))
    zero = pgd(m, x, AttackConfig(0.0, alpha=0.01, steps=3), target=1)
    assert np.array_equal(zero.x_adv, x)
    with pytest.raises(ConfigError):
        pgd(m, x, cfg, target=1, noise=np.zeros((1, 1, 6, 6)))


def test_cw_margin_value():
    t = FeatureTrace([np.zeros((1, 2))], np.zeros((1, 2)), np.array([[2.0, 5.0]]), None)
    vals, _ = CWMargin(0, 0.0).evaluate(t)
    assert vals[0] == 3.0
    vals, _ = CWMargin(1, 1.0).evaluate(t)
    assert vals[0] == -1.0


def test_cw_early_stop_when_already_target():
    m, x = small_model(0), _x(6)
    pred = m.predict(x)
    res = cw_inf(m, x, AttackConfig(0.05, alpha=0.01), target=pred)
    assert np.array_equal(res.x_adv, x) and np.all(res.iterations == 0)
    assert np.array_equal(res.success, m.predict(res.x_adv) == pred)


def test_stress_contract():
    m, x = small_model(0, bias=0.2), _x()
    with pytest.raises(ConfigError):
        stress(m, x, 5, "up", AttackConfig(0.01))
    with pytest.raises(ConfigError):
        stress(m, x, 1, "sideways", AttackConfig(0.01))
    r = stress(m, x, 3, "up", AttackConfig(0.05, alpha=0.005))
    assert r["mean_after"] >= r["mean_before"]
    r = stress(m, x, 3, "down", AttackConfig(0.05, alpha=0.005))
    assert r["mean_after"] <= r["mean_before"]
    r = stress(m, x, 2, "up", AttackConfig(0.0, alpha=0.01, steps=3))
    assert r["mean_after"] == r["mean_before"]


def test_guides():
    m, x = small_model(0), _x(3)
    pool = LabeledSet(x, np.ones(3, dtype=int), np.arange(3))
    assert np.array_equal(choose_guides(m, x, pool.images, "closest"), [0, 1, 2])
    r1 = choose_guides(m, x, _x(10, seed=1), "random", seed=4)
    assert np.array_equal(r1, choose_guides(m, x, _x(10, seed=1), "random", seed=4))
    with pytest.raises(ConfigError):
        choose_guides(m, x, x[:0], "closest")
    with pytest.raises(ConfigError):
        guide_attack(m, x, LabeledSet(x[:0], [], []), "random", AttackConfig(0.01), target=1)
    # self-guided with zero feature weight reduces to BIM
    cfg = AttackConfig(0.03, alpha=0.01)
    assert np.array_equal(guide_attack(m, x, pool, "closest", cfg, target=1, weight=0.0).x_adv, bim(m, x, cfg, target=1).x_adv)
    forced = guide_attack(m, x, pool, "random", cfg, target=1, guide_index=np.array([2, 2, 2]))
    again = guide_attack(m, x, pool, "random", cfg, target=1, guide_index=np.array([2, 2, 2]))
    assert np.array_equal(forced.x_adv, again.x_adv)


def _kde(m, seed=0):
    z = m.trace(_x(20, seed=seed)).z
    return KernelDensity({0: z[:10], 1: z[10:]}, {0: 0.5, 1: 0.5})


def test_kde_adaptive():
    m, x = small_model(0), _x()
    cfg = AttackConfig(0.03, alpha=0.01)
    assert np.array_equal(kde_adaptive(m, x, _kde(m), cfg, target=1, weight=0.0).x_adv, bim(m, x, cfg, target=1).x_adv)
    with pytest.raises(ConfigError):
        kde_adaptive(m, x, None, cfg, target=1)
    # the density peaks at a lone kernel centre: zero gradient there
    z = m.trace(x[:1]).z
    t = m.trace(x[:1])
    _, seeds = KdeLoss({1: z}, {1: 0.3}, 1).evaluate(t)
    assert np.array_equal(seeds[t.n_layers], np.zeros_like(z))
    res = kde_adaptive(m, x, _kde(m), AttackConfig(0.05, alpha=0.005), target=1)
    first = kde_adaptive(m, x, _kde(m), AttackConfig(0.05, alpha=0.0, steps=1), target=1)
    assert res.objective.sum() < first.objective.sum()


def test_lid_adaptive():
    m, x = small_model(0), _x()
    refs = m.trace(_x(15, seed=3))
    references = {l: reduce_features(refs, l) for l in range(1, 4)}
    cfg = AttackConfig(0.03, alpha=0.01)
    assert np.array_equal(lid_adaptive(m, x, references, cfg, target=1, weight=0.0, k=5).x_adv, bim(m, x, cfg, target=1).x_adv)
    with pytest.raises(ConfigError):
        lid_adaptive(m, x, {}, cfg, target=1)


def test_lid_estimates():
    assert lid_estimates(np.array([1.0, 2.0, 4.0, 8.0]), 4) == pytest.approx(0.9617966939259756, abs=1e-12)
    assert lid_estimates(np.array([1.0, 2.0, 4.0, 8.0]), 4) == pytest.approx(lid_formula([1.0, 2.0, 4.0, 8.0]), abs=1e-12)
    assert lid_estimates(np.full(5, 3.0), 5) == 1e6
    assert np.isfinite(lid_estimates(np.array([0.0, 0.0, 1.0]), 3))


def test_record_trace_deltas():
    m, x = small_model(0), _x(2)
    res = bim(m, x, AttackConfig(0.02, alpha=0.005, record_trace=True), target=1)
    assert res.deltas.shape == (2, 8, m.trace(x).z.shape[1])
    assert np.allclose(res.deltas[:, -1], m.trace(res.x_adv).z - m.trace(x).z)


def test_result_roundtrip(tmp_path):
    m, x = small_model(0), _x(3)
    res = bim(m, x, AttackConfig(0.02, alpha=0.005, record_trace=True), target=1)
    res.save(str(tmp_path / "r"), config_hash="h")
    back = AttackResult.load(str(tmp_path / "r"))
    assert back.x_adv.tobytes() == res.x_adv.tobytes()
    assert back.deltas.tobytes() == res.deltas.tobytes()
    assert np.array_equal(back.success, res.success) and back.label == "BIM"


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10_000),
    st.sampled_from(["fgsm", "bim", "pgd", "cw", "bim+hfc"]),
    st.floats(0.0, 0.2),
    st.floats(0.0, 0.05),
    st.integers(1, 6),
)
def test_fuzz_ball_and_range(seed, kind, eps, alpha, steps):
    rng = np.random.default_rng(seed)
    m = small_model(seed % 7, pool=["avg", "max"][seed % 2], size=5)
    x = rng.uniform(0, 1, size=(3, 1, 5, 5))
    x[0, 0, 0, 0], x[1, 0, 0, 0] = 0.0, 1.0
    addon = HfcLoss({1: random_hfc(m, rng, n=20)}, 1) if kind == "bim+hfc" else None
    cfg = AttackConfig(eps, alpha=alpha, steps=steps, seed=seed, addon=addon)
    fn = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "cw": cw_inf, "bim+hfc": bim}[kind]
    res = fn(m, x, cfg, target=int(rng.integers(2)))
    assert np.abs(res.x_adv - x).max() <= eps + 1e-12
    assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0
