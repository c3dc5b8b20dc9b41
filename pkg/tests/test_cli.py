import csv
import itertools
import json

import numpy as np
import pytest

from concurl.cli import build_config, conditional_means, expand_grid, main, make_parser, synth_demo
from concurl.dataio import parse_synth_spec, save_feature_dataset
from concurl.ensemble import TransformEnsemble
from concurl.trainer import TrainConfig, init_state, save_checkpoint

SYNTH = "blobs:k=3,n=10,dim=4,spread=0.4,separation=4.0,seed=5"

SMALL = """\
epochs = 3
batch_size = 10
encoder_hidden = [8]
feat_dim = 6
head_hidden = 8
embed_dim = 4
ensemble_size = 3
m_noise = 8
eval_every = 1
kmeans_inits = 3
"""


@pytest.fixture
def small_toml(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def _train(tmp_path, small_toml, name, *extra):
    out = tmp_path / name
    assert main(["train", "--synth", SYNTH, "--config", str(small_toml), "--out", str(out), *extra]) == 0
    return out


def _stats(run):
    return [json.loads(l) for l in (run / "stats.jsonl").read_text().splitlines()]


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_writes_run_directory(tmp_path, small_toml):
    run = _train(tmp_path, small_toml, "r")
    for name in ("manifest.json", "stats.jsonl", "final.npz", "ckpt_epoch0000.npz", "ckpt_epoch0003.npz",
                 "metrics.json", "confusion.csv", "confusion_percent.csv"):
        assert (run / name).exists(), name
    m = json.loads((run / "manifest.json").read_text())
    assert m["config"]["K"] == 3 and m["dataset"]["rows"] == 30 and m["end_time"] is not None
    assert m["config_hash"] == TrainConfig.from_dict(m["config"]).hash()
    assert len(_stats(run)) == 3


def test_zero_epochs(tmp_path, small_toml):
    run = _train(tmp_path, small_toml, "r0", "--epochs", "0")
    assert (run / "stats.jsonl").read_text() == ""
    assert json.loads((run / "manifest.json").read_text())["config"]["epochs"] == 0


def test_run_twice_identical_except_wall_time(tmp_path, small_toml):
    a, b = _stats(_train(tmp_path, small_toml, "a")), _stats(_train(tmp_path, small_toml, "b"))
    for x, y in zip(a, b):
        x.pop("wall_time_seconds"), y.pop("wall_time_seconds")
    assert a == b


def test_alpha_zero_logs_both_terms(tmp_path, small_toml):
    for row in _stats(_train(tmp_path, small_toml, "a0", "--alpha", "0")):
        assert row["l_total"] == row["l_b"] and row["l_z"] > 0


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("lr = 0.5\nseed = 4\n")
    args = make_parser().parse_args(["train", "--synth", SYNTH, "--out", "x", "--config", str(cfg_file),
                                     "--seed", "9"])
    cfg = build_config(args)
    assert cfg.seed == 9 and cfg.lr == 0.5 and cfg.tau_id == TrainConfig().tau_id


def test_config_rejects_nested_and_unknown(tmp_path, capsys):
    nested = tmp_path / "n.toml"
    nested.write_text("[train]\nlr = 0.1\n")
    assert main(["train", "--synth", SYNTH, "--config", str(nested), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "b.toml"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["train", "--synth", SYNTH, "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown" in capsys.readouterr().err


def test_invalid_config_lists_all_errors(tmp_path, small_toml, capsys):
    code = main(["train", "--synth", SYNTH, "--config", str(small_toml), "--out", str(tmp_path / "o"),
                 "--tau-id", "0", "--batch-size", "1"])
    err = capsys.readouterr().err
    assert code == 2 and "tau_id" in err and "batch_size" in err


def test_eval_reproduces_training_metrics(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r")
    capsys.readouterr()
    assert main(["eval", "--run", str(run)]) == 0
    rep = json.loads(capsys.readouterr().out)
    last = _stats(run)[-1]
    assert (rep["acc"], rep["nmi"], rep["ari"]) == (last["acc"], last["nmi"], last["ari"])


def test_eval_cross_k(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r")
    capsys.readouterr()
    other = "blobs:k=5,n=6,dim=4,seed=8"
    assert main(["eval", "--checkpoint", str(run / "final.npz"), "--synth", other,
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["k"] == 5 and 0 <= rep["acc"] <= 1
    with open(tmp_path / "ev" / "confusion_percent.csv") as fh:
        assert len(list(csv.reader(fh))) == 5


def test_eval_dimension_mismatch(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r")
    assert main(["eval", "--checkpoint", str(run / "final.npz"), "--synth", "blobs:k=2,n=5,dim=7"]) == 2
    assert "input features" in capsys.readouterr().err


def test_eval_csv_dataset(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r")
    ds = parse_synth_spec(SYNTH)
    p = tmp_path / "d.csv"
    save_feature_dataset(ds, p)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "final.npz"), "--dataset", str(p)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["acc"] == _stats(run)[-1]["acc"]


def test_malformed_csv_reports_row(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("f0,f1,label\n1,2,0\n1,x,1\n")
    assert main(["train", "--dataset", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "row 2" in capsys.readouterr().err


def test_expand_grid():
    g = expand_grid("tau=0.3,0.5;M=0,4;d_out=2;eta=0,1.4")
    assert g == {"tau_id": [0.3, 0.5], "ensemble_size": [1, 4], "proj_dim": [2]}
    with pytest.raises(Exception):
        expand_grid("nope=1")


def test_conditional_means_recomputed():
    rng = np.random.default_rng(0)
    rows = [{"a": a, "b": b, "status": "ok", "acc": float(rng.uniform())}
            for a, b in itertools.product([1, 2], [10, 20, 30]) for _ in range(2)]
    rows.append({"a": 1, "b": 10, "status": "failed", "acc": None})
    marg, cond = conditional_means(rows, ["a", "b"])
    ok = [r for r in rows if r["status"] == "ok"]
    for m in marg:
        ref = np.mean([r["acc"] for r in ok if r[m["param"]] == m["value"]])
        assert m["mean_acc"] == pytest.approx(ref, abs=1e-15)
    for c in cond:
        sel = [r["acc"] for r in ok if r[c["param"]] == c["value"] and r[c["given"]] == c["given_value"]]
        assert c["mean_acc"] == pytest.approx(np.mean(sel), abs=1e-15) and c["n"] == len(sel)
    assert len(cond) == 2 * (2 * 3)


def test_sweep_single_cell_equals_train(tmp_path, small_toml):
    sw = tmp_path / "sw"
    assert main(["sweep", "--synth", SYNTH, "--config", str(small_toml), "--grid", "lr=0.03",
                 "--out", str(sw)]) == 0
    run = _train(tmp_path, small_toml, "t", "--lr", "0.03")
    a, b = _stats(sw / "trial_0000"), _stats(run)
    for x, y in zip(a, b):
        x.pop("wall_time_seconds"), y.pop("wall_time_seconds")
    assert a == b
    rows = _csv(sw / "sweep_summary.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert sum(int(r["count"]) for r in _csv(sw / "sweep_hist.csv")) == 1


def test_sweep_m_zero_trial_is_baseline(tmp_path, small_toml):
    sw = tmp_path / "sw"
    assert main(["sweep", "--synth", SYNTH, "--config", str(small_toml), "--grid", "M=0,3",
                 "--out", str(sw)]) == 0
    # trial 0 ran with M=0 and seed base+0; the ID-only run with the same seed matches it
    base = _train(tmp_path, small_toml, "id", "--alpha", "0", "--ensemble-size", "0")
    a, b = _stats(sw / "trial_0000"), _stats(base)
    for x, y in zip(a, b):
        for k in ("wall_time_seconds", "l_total"):
            x.pop(k), y.pop(k)
    assert a == b
    assert all(r["l_z"] == 0.0 for r in a)
    marg = _csv(sw / "sweep_marginals.csv")
    assert {r["value"] for r in marg} == {"0", "3"}


def test_sweep_records_failures(tmp_path, small_toml):
    sw = tmp_path / "sw"
    assert main(["sweep", "--synth", SYNTH, "--config", str(small_toml), "--grid", "batch_size=10,1000",
                 "--out", str(sw)]) == 0
    rows = _csv(sw / "sweep_summary.csv")
    assert [r["status"] for r in rows] == ["ok", "failed"] and "batch_size" in rows[1]["error"]


def test_synth_demo_checks_and_files(tmp_path):
    assert main(["synth-demo", "--out", str(tmp_path / "d")]) == 0
    table = _csv(tmp_path / "d" / "demo_table.csv")
    assert len(table) == 4
    summary = json.loads((tmp_path / "d" / "demo_summary.json").read_text())
    assert all(summary["checks"].values())


def test_synth_demo_structure():
    res = synth_demo(seed=0)
    assert np.array_equal(res["p"].argmax(1), res["p_tilde"].argmax(1))
    assert res["q"].max(1).min() >= 0.99
    # a near-one-hot code keeps the argmax of a soft row like (0.6473, 0.2587, 0.0940)
    assert np.array_equal(res["code_argmax"], res["p"].argmax(1))


def test_diversity_over_run(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r")
    capsys.readouterr()
    assert main(["diversity", "--run", str(run)]) == 0
    series = json.loads(capsys.readouterr().out)
    assert [s["epoch"] for s in series] == [0, 3]
    assert all(0 <= s["pairwise_nmi_mean"] <= 1 for s in series)


def test_diversity_identical_transforms(tmp_path, capsys):
    ds = parse_synth_spec(SYNTH)
    cfg = TrainConfig(batch_size=10, feat_dim=6, head_hidden=8, embed_dim=4, encoder_hidden=(8,), m_noise=8)
    state = init_state(cfg, ds)
    A = state.ensemble.matrices[0]
    state.ensemble = TransformEnsemble([A, A.copy()], ["gaussian_projection"] * 2)
    save_checkpoint(state, tmp_path / "c.npz")
    assert main(["diversity", "--checkpoint", str(tmp_path / "c.npz"), "--synth", SYNTH]) == 0
    s = json.loads(capsys.readouterr().out)[0]
    assert s["pairwise_nmi_mean"] == 1.0 and s["pairwise_nmi_std"] == 0.0


def test_diversity_needs_two_transforms(tmp_path, small_toml, capsys):
    run = _train(tmp_path, small_toml, "r", "--ensemble-size", "1")
    assert main(["diversity", "--run", str(run)]) == 2
    assert "need >= 2" in capsys.readouterr().err
