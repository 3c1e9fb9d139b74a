import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from retinacam import __version__
import retinacam.cli as cli_mod
from retinacam.cli import config_hash, main, run_tasks, task_seed
from retinacam.learn.cohort import FACTORS, read_table
from retinacam.morphometry import BASE_FEATURES, FEATURE_COLUMNS
from retinacam.raster import read_mask, write_field
from retinacam.synth import sample_factors


def run(*argv):
    return main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = root / "sim.json"
    cfg.write_text(json.dumps({"noise_sd": 0.0}))
    assert run("cohort-sim", "--n-subjects", 3, "--saliency-factors", "sex", "--seed", 7,
               "--config", cfg, "--out-dir", root / "data") == 0
    return root / "data"


@pytest.fixture(scope="module")
def morph(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("morph")
    assert run("morphometry", sim / "manifest.csv", "--out-dir", out) == 0
    return out


def test_cohort_sim_tree(sim, tmp_path):
    manifest = read_table(sim / "manifest.csv")
    assert len(manifest) == 6 and (sim / "truth" / "S00000_left.truth.json").exists()
    assert len(list((sim / "masks").glob("*.png"))) == 24
    assert len(list((sim / "saliency").glob("*.pfm"))) == 6
    cohort = read_table(sim / "cohort.csv")
    assert set(FACTORS) <= set(cohort.columns) and set(cohort["split"]) <= {"dev", "val"}
    truth = read_table(sim / "morphometry_truth.csv")
    assert list(truth.columns) == ["subject_id", "eye", *FEATURE_COLUMNS]
    assert json.loads((sim / "sim_config.json").read_text())["n_subjects"] == 3
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"noise_sd": 0.0}))
    again = tmp_path / "again"
    run("cohort-sim", "--n-subjects", 3, "--saliency-factors", "sex", "--seed", 7, "--config", cfg,
        "--out-dir", again)
    for f in ("manifest.csv", "cohort.csv", "morphometry_truth.csv", "masks/S00001_right_vein.png",
              "saliency/S00002_left_sex.pfm", "truth/S00001_right.truth.json"):
        assert (sim / f).read_bytes() == (again / f).read_bytes(), f


def test_morphometry_output(morph, sim):
    text = (morph / "morphometry.csv").read_text()
    assert text.startswith(f"# retinacam {__version__} seed=0 config=")
    df = read_table(morph / "morphometry.csv")
    assert len(df) == 6 and list(df.columns) == ["subject_id", "eye", *FEATURE_COLUMNS, "flags"]
    assert list(zip(df.subject_id, df.eye)) == sorted(zip(df.subject_id, df.eye))
    truth = read_table(sim / "morphometry_truth.csv")
    assert np.array_equal(df["vertical_cdr"], truth["vertical_cdr"])
    assert read_table(morph / "morphometry_failures.csv").empty


def test_morphometry_resilience(sim, tmp_path):
    manifest = read_table(sim / "manifest.csv")
    manifest[["artery", "vein", "disc", "cup"]] = manifest[["artery", "vein", "disc", "cup"]].map(
        lambda p: str(sim / p))
    manifest = manifest.iloc[:3].copy()
    manifest.loc[1, "vein"] = str(tmp_path / "nope.png")
    manifest.to_csv(tmp_path / "m.csv", index=False)
    assert run("morphometry", tmp_path / "m.csv", "--out-dir", tmp_path) == 0
    assert len(read_table(tmp_path / "morphometry.csv")) == 2
    fails = read_table(tmp_path / "morphometry_failures.csv")
    assert len(fails) == 1 and fails.loc[0, "eye"] == manifest.loc[1, "eye"]
    manifest["quality"] = ["good", "poor", "usable"]
    manifest.loc[1, "vein"] = manifest.loc[0, "vein"]
    manifest.to_csv(tmp_path / "q.csv", index=False)
    assert run("morphometry", tmp_path / "q.csv", "--out-dir", tmp_path / "q") == 0
    assert len(read_table(tmp_path / "q" / "morphometry.csv")) == 2
    manifest["vein"] = str(tmp_path / "nope.png")
    manifest.to_csv(tmp_path / "bad.csv", index=False)
    assert run("morphometry", tmp_path / "bad.csv", "--out-dir", tmp_path / "bad") == 2


def test_morphometry_threads_and_zones(sim, morph, tmp_path, monkeypatch):
    monkeypatch.setattr(cli_mod, "_usable_cpus", lambda: 2)  # use the process pool even on one core
    assert run("--threads", 2, "morphometry", sim / "manifest.csv", "--out-dir", tmp_path) == 0
    assert (tmp_path / "morphometry.csv").read_bytes() == (morph / "morphometry.csv").read_bytes()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"zones": ["B"]}))
    assert run("morphometry", sim / "manifest.csv", "--config", cfg, "--out-dir", tmp_path / "b",
               "--graph-json") == 0
    df = read_table(tmp_path / "b" / "morphometry.csv")
    assert not any(c.endswith("_zoneC") for c in df.columns) and "crae_knudtson_zoneB" in df.columns
    assert len(list((tmp_path / "b" / "graphs").glob("*.graph.json"))) == 6


def test_cam_score_closed_form(sim, tmp_path):
    manifest = read_table(sim / "manifest.csv").iloc[:2].copy()
    for i, r in manifest.iterrows():
        disc = read_mask(sim / r["disc"])
        write_field(tmp_path / f"{i}.pfm", np.where(disc, 0.9, 0.1).astype(np.float32))
        manifest.loc[i, "saliency_sex"] = f"{i}.pfm"
        for s in ("artery", "vein", "disc", "cup"):
            manifest.loc[i, s] = str(sim / r[s])
    manifest.to_csv(tmp_path / "m.csv", index=False)
    assert run("cam-score", tmp_path / "m.csv", "--out-dir", tmp_path) == 0
    scores = read_table(tmp_path / "cam_scores.csv")
    assert len(scores) == 8 and (scores["threshold"] == 0.5).all()
    for i, r in manifest.iterrows():
        disc = read_mask(sim / r["disc"]) if not r["disc"].startswith("/") else read_mask(r["disc"])
        art = read_mask(r["artery"])
        got = scores[(scores.subject_id == r["subject_id"]) & (scores.eye == r["eye"])].set_index("structure")
        assert got.loc["disc", "score"] == 1.0 and got.loc["cup", "score"] == 1.0
        assert got.loc["artery", "score"] == pytest.approx(np.count_nonzero(art & disc) / np.count_nonzero(art))
    assert (tmp_path / "cam_summary_mean_sd.md").read_text().startswith("<!-- retinacam")


def test_cam_score_threshold_sweep_and_zero_maps(sim, tmp_path):
    prev = None
    for t in (0.3, 0.5, 0.7):
        out = tmp_path / f"t{t}"
        assert run("cam-score", sim / "manifest.csv", "--threshold", t, "--out-dir", out) == 0
        s = read_table(out / "cam_scores.csv")["score"].to_numpy()
        if prev is not None:
            assert np.all(s <= prev)
        prev = s
    manifest = read_table(sim / "manifest.csv")
    write_field(tmp_path / "zero.pfm", np.zeros((912, 912), np.float32))
    manifest["saliency_sex"] = str(tmp_path / "zero.pfm")
    for s in ("artery", "vein", "disc", "cup"):
        manifest[s] = [str(sim / p) for p in manifest[s]]
    manifest.to_csv(tmp_path / "z.csv", index=False)
    cfg = tmp_path / "raw.json"
    cfg.write_text(json.dumps({"normalize": False}))
    assert run("cam-score", tmp_path / "z.csv", "--config", cfg, "--out-dir", tmp_path / "z") == 0
    ms = read_table(tmp_path / "z" / "cam_summary_mean_sd.csv")
    assert (ms[["artery", "vein", "disc", "cup"]] == "0.0000(0.0000)").all().all()
    med = read_table(tmp_path / "z" / "cam_summary_median_iqr.csv", )
    assert (med[["artery", "vein", "disc", "cup"]].isna() | (med[["artery", "vein", "disc", "cup"]] == "N/A")).all().all()
    assert run("cam-score", sim / "manifest.csv", "--factors", "age", "--out-dir", tmp_path / "x") == 1


def test_group_compare(tmp_path):
    recs = []
    for g in ("A", "B"):
        for i in range(8):
            for s, v in (("artery", 0.2 + 0.05 * i), ("vein", 0.3), ("disc", 0.5 + 0.01 * i), ("cup", 0.0)):
                recs.append({"subject_id": f"{g}{i}", "eye": "left", "factor": "sex", "structure": s,
                             "threshold": 0.5, "score": v, "flag": ""})
    pd.DataFrame(recs).to_csv(tmp_path / "cam.csv", index=False)
    grouping = pd.DataFrame({"subject_id": [f"{g}{i}" for g in "AB" for i in range(8)],
                             "group": ["A"] * 8 + ["B"] * 8})
    grouping.to_csv(tmp_path / "g.csv", index=False)
    assert run("group-compare", tmp_path / "cam.csv", tmp_path / "g.csv", "--out-dir", tmp_path) == 0
    md = (tmp_path / "group_compare.md").read_text()
    assert "**" not in md and "N/A" in md
    pd.concat([grouping, grouping.assign(group="C")]).to_csv(tmp_path / "dup.csv", index=False)
    assert run("group-compare", tmp_path / "cam.csv", tmp_path / "dup.csv", "--out-dir", tmp_path) == 1


def synthetic_tables(n, seed, feature_fn=None):
    rng = np.random.default_rng(seed)
    subj = sample_factors(n, rng)
    cohort = pd.concat([subj.assign(eye="left"), subj.assign(eye="right")], ignore_index=True)
    morph = cohort[["subject_id", "eye"]].copy()
    for c in FEATURE_COLUMNS:
        morph[c] = rng.normal(size=len(cohort))
    if feature_fn is not None:
        feature_fn(cohort, morph, rng)
    return cohort, morph


def test_baseline_detects_dependency(tmp_path):
    def plant(cohort, morph, rng):
        morph["vein_width_zoneB"] = np.where(cohort["sex"] == "M", 1.0, -1.0) + 0.1 * rng.normal(size=len(morph))

    cohort, morph = synthetic_tables(150, 0, plant)
    cohort.to_csv(tmp_path / "cohort.csv", index=False)
    morph.to_csv(tmp_path / "morph.csv", index=False)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_boot": 200, "hgb_grid": {"max_depth": [3], "learning_rate": [0.1],
                                                          "n_trees": [50]}}))
    args = ("baseline", tmp_path / "cohort.csv", tmp_path / "morph.csv", "--factors", "sex", "age",
            "--config", cfg)
    assert run(*args, "--out-dir", tmp_path / "a") == 0
    rep = read_table(tmp_path / "a" / "baseline.csv")
    assert set(rep["metric"]) == {"balanced_accuracy", "auroc", "r2"}
    lr = rep.query("factor == 'sex' and model == 'LR' and metric == 'auroc'").iloc[0]
    assert lr["value"] >= 0.99
    age = rep.query("factor == 'age' and model == 'LR'").iloc[0]
    assert age["ci_lo"] <= 0.0 or age["value"] < 0.1
    assert (rep["ci_lo"] <= rep["value"]).all() and (rep["value"] <= rep["ci_hi"]).all()
    assert run(*args, "--out-dir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "baseline.csv").read_bytes() == (tmp_path / "b" / "baseline.csv").read_bytes()


def test_probe_emits_96_rows(tmp_path):
    cohort, morph = synthetic_tables(60, 1)
    rng = np.random.default_rng(2)
    emb = []
    for source in ("classification", "regression"):
        e = pd.DataFrame(rng.normal(size=(len(morph), 16)), columns=[f"e{i}" for i in range(16)])
        emb.append(pd.concat([morph[["subject_id", "eye"]], e.assign(source=source)], axis=1))
    pd.concat(emb).to_csv(tmp_path / "emb.csv", index=False)
    morph.to_csv(tmp_path / "morph.csv", index=False)
    assert run("probe", tmp_path / "emb.csv", tmp_path / "morph.csv", "--out-dir", tmp_path) == 0
    probe = read_table(tmp_path / "probe.csv")
    assert len(probe) == 96 == len(BASE_FEATURES) * 2 * 2
    assert set(probe["zone"]) == {"B", "C"} and set(probe["source"]) == {"classification", "regression"}
    assert (probe["n_folds"] == 10).all() and probe["r2_mean"].mean() <= 0.05


def test_impute(tmp_path):
    cohort, _ = synthetic_tables(80, 3)
    cohort.loc[cohort.subject_id == "S00004", "age"] = np.nan
    cohort.loc[cohort.subject_id == "S00009", "smoking"] = None
    cohort.to_csv(tmp_path / "c.csv", index=False)
    assert run("impute", tmp_path / "c.csv", "--out-dir", tmp_path, "--seed", 3) == 0
    out = read_table(tmp_path / "imputed_cohort.csv")
    assert set(out["split"]) == {"dev", "val"}
    for sid, f in (("S00004", "age"), ("S00009", "smoking")):
        rows = out[out.subject_id == sid]
        if rows["split"].iloc[0] == "val":
            assert rows[f].isna().all() and (rows["val_missing"] == f).all()
        else:
            assert rows[f].notna().all()


def test_assoc(tmp_path):
    def plant(cohort, morph, rng):
        subj_effect = cohort["subject_id"].map(
            cohort.drop_duplicates("subject_id").set_index("subject_id")["smoking"].eq("smoked") * 2.0)
        morph["vein_width_zoneB"] = 7 + subj_effect + rng.normal(size=len(morph))
        morph["artery_fd_zoneC"] = 1.5

    cohort, morph = synthetic_tables(100, 4, plant)
    cohort.to_csv(tmp_path / "c.csv", index=False)
    morph.to_csv(tmp_path / "m.csv", index=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_perm": 500}))
    assert run("assoc", tmp_path / "c.csv", tmp_path / "m.csv", "--factors", "smoking", "bmi",
               "--config", cfg, "--out-dir", tmp_path) == 0
    t = read_table(tmp_path / "assoc.csv")
    row = t.query("factor == 'smoking' and feature == 'vein_width' and zone == 'B'").iloc[0]
    assert row["contrast"] == "smoked vs never" and row["effect"] > 1.5 and row["p_value"] < 0.01
    assert row["significant"] in (True, "True")
    const = t.query("feature == 'artery_fd' and zone == 'C'")
    assert const["p_value"].isna().all()
    assert set(t.query("factor == 'bmi'")["test"]) == {"pearson"}


def test_usage_errors(tmp_path):
    assert run("impute", tmp_path / "missing.csv", "--out-dir", tmp_path) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("impute", "x.csv", "--config", bad) == 1
    assert run("--threads", 0, "impute", "x.csv") == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


def test_task_seed_and_hash():
    assert task_seed(0, "S1", "left") == task_seed(0, "S1", "left") != task_seed(1, "S1", "left")
    assert 0 <= task_seed(0, "x") < 2 ** 64
    a = {"seed": 0, "threads": 1, "out_dir": "a", "n_perm": 10}
    assert config_hash(a) == config_hash(dict(a, threads=8, out_dir="b")) != config_hash(dict(a, n_perm=11))


def test_console_script():
    exe = shutil.which("retinacam")
    cmd = [exe] if exe else [sys.executable, "-m", "retinacam.cli"]
    res = subprocess.run([*cmd, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("morphometry", "cam-score", "group-compare", "baseline", "probe", "impute", "cohort-sim",
                 "assoc"):
        assert name in res.stdout


def test_run_tasks_pool_matches_inline(monkeypatch):
    items = list(range(23))
    inline = run_tasks(math.factorial, items, 1)
    monkeypatch.setattr(cli_mod, "_usable_cpus", lambda: 4)
    assert run_tasks(math.factorial, items, 3) == inline == [math.factorial(i) for i in items]
    monkeypatch.setattr(cli_mod, "_usable_cpus", lambda: 1)
    assert run_tasks(math.factorial, items, 8) == inline
