import csv
import hashlib
import json

import numpy as np
import pytest

from mvrisk.cli import fmt, load_config, main, parse_seeds, UsageError
from mvrisk.data import IDX_IMAGES, IDX_LABELS, load_dataset, synthetic_digits, write_idx
from mvrisk.errors import InputError
from mvrisk.models import load_model

SOURCE = {"type": "multiview", "k": 3, "view_dims": [10, 10, 10], "structure_seed": 3,
          "mean_scale": 0.5, "noise": 1.0}
HMM = {"k": 2, "T": 6, "transition": [[0.8, 0.2], [0.3, 0.7]], "initial": [0.6, 0.4],
       "emission": {"type": "gaussian", "means": [[-1.0], [1.0]], "sd": 1.0}}


def put(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Training set at a = 0 and an evaluation sweep over the shift grid."""
    root = tmp_path_factory.mktemp("cli")
    train = put(root / "train.json", {"source": SOURCE, "m": 5000, "seeds": [1]})
    sweep = put(root / "sweep.json", {"source": SOURCE, "m": 10000,
                                      "a": [0, 2.5, 5, 7.5, 10], "seeds": [0]})
    assert run("gen-data", "--config", train, "--out", root / "train") == 0
    assert run("gen-data", "--config", sweep, "--out", root / "sweep") == 0
    return root


# -- helpers --------------------------------------------------------------------------

def test_fmt_seventeen_digits():
    assert fmt(0.1) == "0.10000000000000001"
    assert float(fmt(np.pi)) == np.pi
    assert fmt(None) == "" and fmt(float("nan")) == "" and fmt(np.int64(3)) == "3"


def test_parse_seeds():
    assert parse_seeds("3, 1,2") == [3, 1, 2]
    with pytest.raises(UsageError):
        parse_seeds("1,x")
    with pytest.raises(UsageError):
        parse_seeds(",")


def test_load_config_reads_manifest(tmp_path):
    path = put(tmp_path / "m.json", {"command": "learn", "config": {"seeds": [4]}})
    assert load_config(path) == {"seeds": [4]}
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.json")


# -- gen-data ---------------------------------------------------------------------------

def test_gen_data_is_reproducible(tmp_path):
    cfg = put(tmp_path / "g.json", {"source": SOURCE, "m": 300, "seeds": [7]})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "b") == 0
    name = "data_a0_seed7.mvds"
    assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_patchwork_shift_list(tmp_path):
    images, labels = synthetic_digits(2, 6, 10, seed=0)
    write_idx(tmp_path / "img.idx", np.round(images * 255).astype(np.uint8), IDX_IMAGES)
    write_idx(tmp_path / "lab.idx", labels.astype(np.uint8), IDX_LABELS)
    cfg = put(tmp_path / "g.json", {"source": {"type": "patchwork", "images": "img.idx",
                                               "labels": "lab.idx"},
                                    "m": 50, "a": [0, 5], "seeds": [0]})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "out") == 0
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert files == ["data_a0_seed0.mvds", "data_a5_seed0.mvds", "manifest.json"]
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and "version" in man
    assert [d["a"] for d in man["config"]["datasets"]] == [0.0, 5.0]
    assert load_dataset(tmp_path / "out" / "data_a5_seed0.mvds").m == 50


def test_missing_source_path(tmp_path, capsys):
    cfg = put(tmp_path / "g.json", {"source": {"type": "patchwork", "images": "nope.idx",
                                               "labels": "nope2.idx"}})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "not found" in capsys.readouterr().err


def test_usage_exit_codes(tmp_path, capsys):
    assert run() == 1
    assert run("gen-data", "--out", tmp_path) == 1
    assert run("fly", "--config", "x", "--out", tmp_path) == 1
    cfg = put(tmp_path / "g.json", {"source": SOURCE, "m": 10})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o", "--jobs", "0") == 1
    assert capsys.readouterr().err.count("mvrisk: error") == 4


def test_manifest_rerun_is_bit_identical(workspace, tmp_path):
    cfg = put(tmp_path / "e.json", {"datasets": [str(workspace / "train" / "data_a0_seed1.mvds")],
                                    "model": {"train": {"data": str(workspace / "train" /
                                                                    "data_a0_seed1.mvds")}}})
    assert run("estimate-risk", "--config", cfg, "--out", tmp_path / "first") == 0
    assert run("estimate-risk", "--config", tmp_path / "first" / "manifest.json",
               "--out", tmp_path / "second") == 0
    for name in ("risk.csv", "risk_reports.json"):
        assert digest(tmp_path / "first" / name) == digest(tmp_path / "second" / name)


# -- estimate-risk ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_rows(workspace):
    train = str(workspace / "train" / "data_a0_seed1.mvds")
    cfg = put(workspace / "est.json", {"manifest": "sweep/manifest.json",
                                       "model": {"train": {"data": train, "rho": 10}},
                                       "validation": train,
                                       "variants": ["tensor", "tensor+refine"]})
    assert run("estimate-risk", "--config", cfg, "--out", workspace / "est", "--jobs", 2) == 0
    return read_csv(workspace / "est" / "risk.csv")


def test_risk_csv_schema(sweep_rows, workspace):
    with open(workspace / "est" / "risk.csv") as fh:
        header = fh.readline().strip().split(",")
    for col in ("a", "seed", "R_hat", "R_labeled_oracle", "validation_baseline",
                "entropy_baseline", "lambda", "pi_min"):
        assert col in header
    assert len(sweep_rows) == 10
    assert (workspace / "est" / "model.json").exists()
    assert load_model(workspace / "est" / "model.json").kind == "logistic"


def test_sweep_tracks_oracle(sweep_rows):
    rows = [r for r in sweep_rows if r["variant"] == "tensor+refine"]
    oracle = np.array([float(r["R_labeled_oracle"]) for r in rows])
    est = np.array([float(r["R_hat"]) for r in rows])
    val = {r["validation_baseline"] for r in rows}
    assert np.all(np.diff(oracle) > 0)                       # the shift hurts the model
    assert np.all(np.abs(est - oracle) <= 0.1 * np.maximum(1.0, oracle))
    assert len(val) == 1                                     # validation baseline is flat
    assert abs(est[-1] - oracle[-1]) < abs(float(val.pop()) - oracle[-1])


def test_refine_residual_not_larger(sweep_rows):
    by = {(r["a"], r["variant"]): float(r["residual"]) for r in sweep_rows}
    for a in {r["a"] for r in sweep_rows}:
        assert by[(a, "tensor+refine")] <= by[(a, "tensor")]


def test_unlabeled_dataset_leaves_oracle_empty(workspace, tmp_path, sweep_rows):
    cfg = put(tmp_path / "g.json", {"source": SOURCE, "m": 2000, "include_labels": False})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 0
    est = put(tmp_path / "e.json", {"manifest": "d/manifest.json",
                                    "model": str(workspace / "est" / "model.json")})
    assert run("estimate-risk", "--config", est, "--out", tmp_path / "r") == 0
    (row,) = read_csv(tmp_path / "r" / "risk.csv")
    assert row["R_labeled_oracle"] == "" and row["R_hat"] != ""


def test_unknown_variant(workspace, tmp_path):
    cfg = put(tmp_path / "e.json", {"manifest": str(workspace / "sweep" / "manifest.json"),
                                    "model": "missing.json", "variants": ["svd"]})
    assert run("estimate-risk", "--config", cfg, "--out", tmp_path / "r") == 1


def test_seed_filter(workspace, tmp_path):
    cfg = put(tmp_path / "e.json", {"manifest": str(workspace / "sweep" / "manifest.json"),
                                    "model": str(workspace / "est" / "model.json")})
    assert run("estimate-risk", "--config", cfg, "--out", tmp_path / "r", "--seeds", "5") == 1


# -- learn ---------------------------------------------------------------------------------

def test_learn_zero_steps_keeps_seed(workspace, tmp_path, sweep_rows):
    model_path = workspace / "est" / "model.json"
    cfg = put(tmp_path / "l.json", {"datasets": [{"path": str(workspace / "sweep" /
                                                              "data_a5_seed0.mvds"), "a": 5}],
                                    "model": str(model_path), "learn": {"steps": 0}})
    assert run("learn", "--config", cfg, "--out", tmp_path / "out") == 0
    (row,) = read_csv(tmp_path / "out" / "learn.csv")
    assert row["risk_theta0"] == row["risk_theta_hat"]
    assert float(row["risk_oracle"]) <= float(row["risk_theta0"])
    thetas = json.loads((tmp_path / "out" / "thetas.json").read_text())
    np.testing.assert_array_equal(thetas["a5_seed0"], load_model(model_path).theta)


def test_learn_general_writes_log(workspace, tmp_path, sweep_rows):
    cfg = put(tmp_path / "l.json", {"datasets": [str(workspace / "sweep" / "data_a0_seed0.mvds")],
                                    "model": str(workspace / "est" / "model.json"),
                                    "learn": {"steps": 1, "method": "general", "eta": 0.01}})
    assert run("learn", "--config", cfg, "--out", tmp_path / "out") == 0
    lines = (tmp_path / "out" / "learn_log_a0_seed0.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "gradient_norm" in json.loads(lines[0])


# -- hmm-risk ---------------------------------------------------------------------------------

def test_hmm_risk_totals_and_rows(tmp_path):
    gen = put(tmp_path / "g.json", {"source": dict(HMM, type="hmm"), "m": 5000, "seeds": [1]})
    assert run("gen-data", "--config", gen, "--out", tmp_path / "d") == 0
    cfg = put(tmp_path / "h.json", {"manifest": "d/manifest.json", "hmm": HMM})
    assert run("hmm-risk", "--config", cfg, "--out", tmp_path / "r", "--jobs", 2) == 0
    rows = read_csv(tmp_path / "r" / "hmm_risk.csv")
    kinds = [r["kind"] for r in rows]
    T = HMM["T"]
    assert kinds.count("pair") == T - 3 and kinds.count("unary") == T - 4
    (total,) = [r for r in rows if r["kind"] == "total"]
    assert abs(float(total["value"]) - float(total["oracle"])) <= 0.1
    pair = sum(float(r["value"]) for r in rows if r["kind"] == "pair")
    unary = sum(float(r["value"]) for r in rows if r["kind"] == "unary")
    assert float(total["value"]) == pytest.approx(pair - unary, abs=1e-12)


def test_hmm_short_sequences_fail_cleanly(tmp_path, capsys):
    gen = put(tmp_path / "g.json", {"source": dict(HMM, type="hmm", T=3), "m": 100})
    assert run("gen-data", "--config", gen, "--out", tmp_path / "d") == 0
    cfg = put(tmp_path / "h.json", {"manifest": "d/manifest.json", "hmm": HMM})
    assert run("hmm-risk", "--config", cfg, "--out", tmp_path / "r") == 1
    err = capsys.readouterr().err
    assert "mvrisk: error" in err and "Traceback" not in err


def test_numerical_failure_exit_code(workspace, tmp_path, capsys):
    # a random model has loss vectors whose second moment is not positive definite
    model = {"kind": "logistic", "k": 3, "view_dims": [10, 10, 10], "bias": False,
             "theta": np.random.default_rng(0).normal(size=90).tolist()}
    cfg = put(tmp_path / "e.json", {"datasets": [str(workspace / "sweep" / "data_a0_seed0.mvds")],
                                    "model": model})
    assert run("estimate-risk", "--config", cfg, "--out", tmp_path / "r") == 2
    assert "numerical failure" in capsys.readouterr().err
