import json

import numpy as np
import pytest

import phaseprobe as pp


def test_stimuli_counts_and_determinism():
    assert pp.candidate_count() == 109760
    assert pp.candidate_count(subject_mode="shared") == 94080
    a = pp.generate_stimuli(50, seed=3)
    assert len(a) == 150
    assert a == pp.generate_stimuli(50, seed=3)
    assert a != pp.generate_stimuli(50, seed=4)
    assert {s["condition"] for s in a} == {"bare", "infinitival", "finite"}


def test_custom_lexicon_round_trip():
    lex = pp.default_lexicon()
    assert len(lex["embedded_verbs"]) == 20
    assert pp.generate_stimuli(5, seed=1, lexicon=lex) == pp.generate_stimuli(5, seed=1)


def test_ols_and_fdr():
    rng = np.random.default_rng(0)
    items, conds, y = [], [], []
    for i in range(30):
        u = rng.normal()
        for c, shift in (("bare", 0.0), ("finite", 0.5), ("infinitival", 0.2)):
            items.append(i)
            conds.append(c)
            y.append(1 + shift + u + 0.3 * rng.normal())
    fit = pp.fit_condition_ols(items, conds, y)
    means = {c: np.mean([v for v, k in zip(y, conds) if k == c]) for c in ("bare", "finite", "infinitival")}
    assert fit["beta"][1] == pytest.approx(means["finite"] - means["bare"], abs=1e-10)
    assert fit["df"] == 29
    mean, lo, hi = pp.cluster_bootstrap(items, conds, y, "fin", 500, 1)
    assert lo <= mean <= hi
    q, rejected = pp.bh_fdr([0.01, 0.04, 0.5])
    assert q == pytest.approx([0.03, 0.06, 0.5])
    assert rejected == [True, False, False]


def test_verify_and_tree_distances():
    conllu = "".join(
        f"{i}\t{w}\t_\t_\t_\t_\t{h}\tdep\t_\t_\n"
        for i, (w, h) in enumerate([("a", 0), ("b", 1), ("c", 2)], start=1)
    ) + "\n"
    (d,) = pp.tree_distances(conllu)
    assert d[0, 2] == 2
    stimuli = pp.generate_stimuli(2, seed=0)
    verdicts = pp.verify(stimuli, "")
    assert len(verdicts) == 4
    assert not any(v["pass"] for v in verdicts)
    with pytest.raises(pp.PhaseprobeError):
        pp.tree_distances("1\tx\t_\t_\t_\t_\t5\tdep\t_\t_\n\n")


def test_fixture_pipeline(tmp_path):
    config = pp.write_fixture(tmp_path, n_items=30)
    assert config["models"][0]["id"] == "synthetic"
    results = pp.run(tmp_path / "config.json")
    assert [r["stage"] for r in results][0] == "stimuli"
    assert all(r["verdict_pass"] is not False for r in results)
    verdict = json.loads((tmp_path / "run" / "report" / "verdict.json").read_text())
    assert verdict["all_gradient_pass_canon"]
    again = pp.run(tmp_path / "config.json", ["report"])
    assert again[0]["skipped"]
    keys, rows = pp.read_store_layer(tmp_path / "stores" / "synthetic" / "stimuli", 0)
    assert rows.shape[0] == 30 * (7 + 8 + 7)  # bare, infinitival ("to"), finite
    assert len(keys) == 90
