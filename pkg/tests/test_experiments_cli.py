import csv
import json
import os

import numpy as np
import pytest

from hfclab import cli
from hfclab import experiments as E
from hfclab.attacks import AttackConfig, bim
from hfclab.errors import ConfigError, PreconditionError
from oracles import small_model

# small enough to run every command in a few seconds
TINY = {
    "dataset": {"n": 240},
    "training": {"epochs": 10},
    "attack": {"attacks": ["BIM", "CW"], "epsilons": [8], "sweep_epsilons": [2, 4], "semiwhitebox_epsilon": 4},
    "detectors": {"kinds": ["KD", "MAHA", "LID", "DNN"], "lid_k": 5, "lid_references": 20, "svm_iters": 50},
    "baselines": {"methods": ["Random", "Closest"]},
    "runtime": {"chunk": 4},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _run(cfg_path, out, *argv):
    return cli.main(list(argv) + ["--config", cfg_path, "--out", str(out)])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- configuration ------------------------------------------------------------------------


def test_defaults_validate_and_hash_is_stable():
    a, b = E.ExperimentConfig(), E.ExperimentConfig({})
    assert a.hash == b.hash and len(a.hash) == 16
    assert a["attack"]["target"] == 1 and a["hfc"]["K"] == 2
    assert a.hfc_layers() == [1, 2, 3, 4]


def test_hash_ignores_runtime_only():
    base = E.ExperimentConfig()
    assert base.with_overrides({"runtime": {"workers": 4, "chunk": 7}}).hash == base.hash
    assert base.with_overrides({"attack": {"epsilons": [4]}}).hash != base.hash


@pytest.mark.parametrize(
    "over",
    [
        {"nonsense": 1},
        {"dataset": {"n": 11}},
        {"dataset": {"train_frac": 1.0}},
        {"attack": {"attacks": ["DeepFool"]}},
        {"attack": {"epsilons": []}},
        {"attack": {"epsilons": [-1]}},
        {"attack": {"target": 2}},
        {"hfc": {"K": 0}},
        {"hfc": {"lambdas": [1.0]}},
        {"detectors": {"kinds": ["XYZ"]}},
        {"detectors": {"lid_k": 10, "lid_references": 10}},
        {"seeds": {"data": -1}},
        {"runtime": {"workers": 0}},
        {"training": "fast"},
    ],
)
def test_invalid_configs_rejected(over):
    with pytest.raises(ConfigError):
        E.ExperimentConfig(over)


def test_with_seed():
    cfg = E.ExperimentConfig().with_seed(7)
    seeds = cfg["seeds"]
    assert seeds["shadow_train"] == 8
    assert all(v == 7 for k, v in seeds.items() if k != "shadow_train")
    assert seeds["shadow_model"] == seeds["model"]
    with pytest.raises(ConfigError):
        E.ExperimentConfig().with_seed(-3)


def test_from_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        E.ExperimentConfig.from_file(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        E.ExperimentConfig.from_file(str(bad))


# --- chunked runner -----------------------------------------------------------------------


def test_run_chunked_independent_of_chunking_and_workers():
    m = small_model(1)
    x = np.random.default_rng(3).uniform(0, 1, size=(7, 1, 6, 6))
    cfg = AttackConfig(0.03, alpha=0.004)
    whole = bim(m, x, cfg, target=1)
    for workers, chunk in ((1, 3), (2, 3), (1, 100)):
        part = E.run_chunked(E.A.bim, m, x, cfg, 1, workers=workers, chunk=chunk)
        assert part.x_adv.tobytes() == whole.x_adv.tobytes()
        assert np.array_equal(part.iterations, whole.iterations)
    with pytest.raises(ConfigError):
        E.run_chunked(E.A.bim, m, x[:0], cfg, 1)


def test_pca_2d_examples():
    ref = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [4.0, 0.0, 1.0], [6.0, 0.0, 1.0]])
    (p,) = E.pca_2d(ref)
    assert np.allclose(p.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(np.abs(p[:, 0]), np.abs(ref[:, 0] - 3.0), atol=0.2)
    # the sign convention makes the result invariant to flipping the data
    (q,) = E.pca_2d(-ref)
    assert np.allclose(np.abs(q), np.abs(p), atol=1e-12)


# --- CLI ----------------------------------------------------------------------------------


def test_show_config_and_config_error(tmp_path, capsys):
    assert cli.main(["show-config", "--seed", "4"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["config"]["seeds"]["data"] == 4
    assert shown["config_hash"] == E.ExperimentConfig().with_seed(4).hash
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"attack": {"target": 5}}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["show-config", "--config", str(tmp_path / "nope.json")]) == 2


def test_report_on_empty_directory_is_precondition_error(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 3


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in (["train"], ["attack"], ["attack", "--hfc"], ["detect"], ["stress"], ["sweep"], ["baselines"],
                ["semiwhitebox"], ["project"], ["report"]):
        assert _run(tiny_config, out, *cmd) == 0, cmd
    return out


def test_every_output_written_and_stamped(tiny_run):
    h = json.loads((tiny_run / "manifest.json").read_text())["config_hash"]
    names = ["attacks_plain.csv", "attacks_hfc.csv", "detect.csv", "stress.csv", "sweep.csv", "baselines.csv",
             "semiwhitebox.csv", "projection.csv"]
    for name in names:
        rows = _rows(tiny_run / name)
        assert rows and {r["config_hash"] for r in rows} == {h}, name
    train = json.loads((tiny_run / "train.json").read_text())
    assert train["config_hash"] == h and 0.0 <= train["test_accuracy"] <= 1.0
    assert (tiny_run / "report.txt").read_text().startswith(f"config {h}")
    assert json.loads((tiny_run / "detect.json").read_text())["config_hash"] == h


def test_output_contents(tiny_run):
    plain = _rows(tiny_run / "attacks_plain.csv")
    assert [r["attack"] for r in plain] == ["BIM", "CW"]
    for r in plain + _rows(tiny_run / "attacks_hfc.csv"):
        assert float(r["max_linf"]) <= float(r["epsilon"]) + 1e-12
        assert float(r["epsilon"]) == 8 / 256
    det = _rows(tiny_run / "detect.csv")
    assert {(r["attack"], r["hfc"], r["detector"]) for r in det} == {
        (a, h, d) for a in ("BIM", "CW") for h in ("0", "1") for d in ("KD", "MAHA", "LID", "DNN")
    }
    for r in det:
        assert 0.0 <= float(r["auc"]) <= 1.0
    stress = _rows(tiny_run / "stress.csv")
    assert [(r["layer"], r["direction"]) for r in stress][:2] == [("1", "up"), ("1", "down")]
    for r in stress:
        assert float(r["difference"]) == pytest.approx(float(r["adversarial_mean"]) - float(r["normal_mean"]), abs=1e-12)
    assert {r["epsilon"] for r in _rows(tiny_run / "sweep.csv")} == {repr(2 / 256), repr(4 / 256)}
    assert {r["attack"] for r in _rows(tiny_run / "baselines.csv")} == {"Random", "Closest", "HFC"}
    assert {r["kind"] for r in _rows(tiny_run / "projection.csv")} == {"clean", "BIM", "BIM+HFC"}
    sw = json.loads((tiny_run / "semiwhitebox.json").read_text())
    assert set(sw["shadow_adv_acc"]) == {"BIM", "BIM+HFC"}


def test_refuses_overwrite_without_force(tiny_config, tiny_run):
    before = (tiny_run / "stress.csv").read_bytes()
    assert _run(tiny_config, tiny_run, "stress") == 3
    assert _run(tiny_config, tiny_run, "report") == 3
    assert _run(tiny_config, tiny_run, "stress", "--force") == 0
    assert (tiny_run / "stress.csv").read_bytes() == before


def test_other_config_refused_then_forced(tiny_config, tiny_run, tmp_path):
    out = tmp_path / "copy"
    assert _run(tiny_config, out, "train") == 0
    assert _run(tiny_config, out, "train", "--seed", "9") == 3
    assert _run(tiny_config, out, "train", "--seed", "9", "--force") == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["seeds"]["data"] == 9


def test_report_refuses_mixed_hashes(tiny_run, tmp_path):
    out = tmp_path / "mixed"
    out.mkdir()
    for name in ("detect.csv", "sweep.csv"):
        (out / name).write_bytes((tiny_run / name).read_bytes())
    with open(out / "sweep.csv") as fh:
        text = fh.read()
    h = _rows(out / "sweep.csv")[0]["config_hash"]
    (out / "sweep.csv").write_text(text.replace(h, "0" * 16))
    with pytest.raises(PreconditionError):
        E.cmd_report(str(out))
    assert cli.main(["report", "--out", str(out)]) == 3


def test_reproducible_bytes_and_workers(tiny_config, tiny_run, tmp_path):
    out = tmp_path / "again"
    for cmd in (["train"], ["attack", "--hfc", "--workers", "2"], ["detect"]):
        assert _run(tiny_config, out, *cmd) == 0
    for name in ("train.json", "attacks_hfc.csv", "detect.csv", "model.json"):
        assert (out / name).read_bytes() == (tiny_run / name).read_bytes(), name
    for name in os.listdir(tiny_run / "attacks"):
        if name.endswith(".bin") and os.path.exists(out / "attacks" / name):
            assert (out / "attacks" / name).read_bytes() == (tiny_run / "attacks" / name).read_bytes()
