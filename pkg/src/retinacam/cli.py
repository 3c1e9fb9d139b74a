"""Command-line front end: manifest-driven batches with deterministic parallelism.

Every subcommand reads CSV/PNG/PFM inputs, writes its outputs into
``--out-dir`` and prefixes each CSV with a ``# retinacam`` header line that
records the version, seed and a hash of the resolved configuration.
Results never depend on ``--threads``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from . import __version__
from .camscore import DEFAULT_THRESHOLD, RECORD_COLUMNS, cam_scores_for_bundle
from .errors import RetinaCamError
from .learn.cohort import CATEGORICAL, CONTINUOUS, FACTORS, KEY, read_cohort, read_table, validate_cohort
from .learn.impute import MeanImputer, impute_cohort
from .learn.metrics import evaluate_with_ci
from .learn.models import HGB_GRID, LogisticModel, RidgeRegression, grid_search_hgb
from .learn.probe import linear_probe
from .learn.split import stratified_split
from .morphometry import (BASE_FEATURES, FEATURE_COLUMNS, ZONES, MorphometryExtractor, compute_record,
                          feature_column, graph_from_bundle)
from .raster import STRUCTURES, SegmentationBundle, normalize_minmax, read_field, read_mask, write_field, write_mask
from .stats import (comparison_markdown, group_compare_cam, permutation_association, student_t_independent,
                    summary_markdown, summary_table)

log = logging.getLogger("retinacam")

EXIT_OK, EXIT_USAGE, EXIT_NO_ROWS = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "threshold": DEFAULT_THRESHOLD,
    "zones": list(ZONES),
    "n_boot": 2000,
    "n_perm": 10000,
    "knn_k": 5,
    "out_dir": ".",
}
# settings that may change how a run is executed but never what it computes
_EXECUTION_KEYS = ("threads", "out_dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration and output plumbing ---------------------------------------------

def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        cfg.update(loaded)
    for key in ("seed", "threads", "out_dir", "threshold"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("threads", "n_boot", "n_perm", "knn_k"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise UsageError(f"{key} must be a positive integer, got {cfg[key]!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    if not 0.0 <= float(cfg["threshold"]) <= 1.0:
        raise UsageError(f"threshold must lie in [0, 1], got {cfg['threshold']!r}")
    bad = set(cfg["zones"]) - set(ZONES)
    if bad or not cfg["zones"]:
        raise UsageError(f"zones must be a nonempty subset of {list(ZONES)}")
    return cfg


def config_hash(cfg) -> str:
    payload = {k: v for k, v in cfg.items() if k not in _EXECUTION_KEYS}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def header_line(cfg) -> str:
    return f"# retinacam {__version__} seed={cfg['seed']} config={config_hash(cfg)}\n"


def write_csv(path, df: pd.DataFrame, cfg):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header_line(cfg))
        df.to_csv(fh, index=False, lineterminator="\n")
    log.info("wrote %s (%d rows)", path, len(df))


def write_text(path, text, cfg, comment="<!-- {} -->\n"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(comment.format(header_line(cfg)[2:].strip()))
        fh.write(text)


def task_seed(seed, *parts) -> int:
    """64-bit seed from the global seed and a task key; independent of scheduling order."""
    key = "|".join(str(p) for p in (seed, *parts)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _usable_cpus():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run_tasks(fn, items, threads):
    """Ordered map; runs inline for one worker and on a process pool otherwise.

    Workers never outnumber the usable CPUs; results do not depend on the count.
    """
    items = list(items)
    workers = min(threads, _usable_cpus())
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


# --- manifests -----------------------------------------------------------------------

def read_manifest(path) -> pd.DataFrame:
    """Manifest rows with paths resolved against the manifest's directory."""
    path = Path(path)
    try:
        df = read_table(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    need = ["subject_id", "eye", *(s.value for s in STRUCTURES)]
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise UsageError(f"manifest lacks columns {missing}")
    if not df["eye"].isin(["left", "right"]).all():
        raise UsageError("manifest eye must be 'left' or 'right'")
    if df.duplicated(KEY).any():
        raise UsageError("manifest rows must be unique per (subject_id, eye)")
    if "quality" not in df.columns:
        df["quality"] = "good"
    df["quality"] = df["quality"].fillna("good").astype(str)
    bad = set(df["quality"]) - {"good", "usable", "poor"}
    if bad:
        raise UsageError(f"unknown quality grades {sorted(bad)}")
    base = path.parent
    path_cols = [s.value for s in STRUCTURES] + [c for c in df.columns if c.startswith("saliency_")]
    for col in path_cols:
        df[col] = [str(base / p) if isinstance(p, str) and p else "" for p in df[col]]
    return df


def _retained(manifest: pd.DataFrame) -> pd.DataFrame:
    poor = manifest["quality"] == "poor"
    if poor.any():
        log.warning("dropped %d poor-grade manifest rows", int(poor.sum()))
    return manifest[~poor].sort_values(KEY, kind="stable").reset_index(drop=True)


def _load_bundle(row) -> SegmentationBundle:
    masks = [read_mask(row[s.value]) for s in STRUCTURES]
    return SegmentationBundle(*masks, laterality=row["eye"], subject_id=row["subject_id"])


def _write_failures(path, failures, cfg):
    write_csv(path, pd.DataFrame(failures, columns=["subject_id", "eye", "error"]), cfg)


# --- morphometry ---------------------------------------------------------------------

def _morphometry_task(item):
    row, width_method, graph_dir = item
    try:
        bundle = _load_bundle(row).normalized()
        MorphometryExtractor(width_method=width_method).fit()
        graph = graph_from_bundle(bundle, width_method)
        if graph_dir:
            Path(graph_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(graph_dir) / f"{row['subject_id']}_{row['eye']}.graph.json", "w") as fh:
                fh.write(graph.to_json())
        values, flags = compute_record(bundle, graph)
        return values, flags, None
    except Exception as exc:  # per-row failures are reported, never fatal
        return None, None, f"{type(exc).__name__}: {exc}"


def cmd_morphometry(args, cfg):
    manifest = _retained(read_manifest(args.manifest))
    out_dir = Path(cfg["out_dir"])
    graph_dir = str(out_dir / "graphs") if args.graph_json else ""
    items = [(r, cfg.get("width_method", "chord"), graph_dir) for r in manifest.to_dict("records")]
    results = run_tasks(_morphometry_task, items, cfg["threads"])
    columns = [c for c in FEATURE_COLUMNS if not c.endswith(tuple(f"_zone{z}" for z in ZONES))
               or c.endswith(tuple(f"_zone{z}" for z in cfg["zones"]))]
    rows, failures = [], []
    for (row, _, _), (values, flags, error) in zip(items, results):
        if error is not None:
            log.warning("%s %s failed: %s", row["subject_id"], row["eye"], error)
            failures.append((row["subject_id"], row["eye"], error))
            continue
        rows.append({"subject_id": row["subject_id"], "eye": row["eye"],
                     **{c: values[c] for c in columns},
                     "flags": ";".join(f for f in flags if f.split(":")[0] in columns
                                       or f.split(":")[0] not in FEATURE_COLUMNS)})
    write_csv(out_dir / "morphometry.csv", pd.DataFrame(rows, columns=[*KEY, *columns, "flags"]), cfg)
    _write_failures(out_dir / "morphometry_failures.csv", failures, cfg)
    return EXIT_OK if rows else EXIT_NO_ROWS


# --- CAM scores ------------------------------------------------------------------------

def _cam_task(item):
    row, factors, t, normalize = item
    try:
        bundle = _load_bundle(row)
        records = []
        for factor in factors:
            field = read_field(row[f"saliency_{factor}"])
            if normalize:
                field = normalize_minmax(field)
            records.extend(cam_scores_for_bundle(bundle, field, t, factor))
        return [r.__dict__ for r in records], None
    except Exception as exc:
        return None, f"{type(exc).__name__}: {exc}"


def cmd_cam_score(args, cfg):
    manifest = _retained(read_manifest(args.manifest))
    available = [c[len("saliency_"):] for c in manifest.columns if c.startswith("saliency_")]
    factors = args.factors or cfg.get("factors") or available
    missing = [f for f in factors if f not in available]
    if missing:
        raise UsageError(f"manifest has no saliency paths for {missing}")
    t = float(cfg["threshold"])
    items = [(r, list(factors), t, bool(cfg.get("normalize", True))) for r in manifest.to_dict("records")]
    results = run_tasks(_cam_task, items, cfg["threads"])
    records, failures = [], []
    for (row, *_), (recs, error) in zip(items, results):
        if error is not None:
            log.warning("%s %s failed: %s", row["subject_id"], row["eye"], error)
            failures.append((row["subject_id"], row["eye"], error))
        else:
            records.extend(recs)
    out_dir = Path(cfg["out_dir"])
    frame = pd.DataFrame(records, columns=RECORD_COLUMNS)
    write_csv(out_dir / "cam_scores.csv", frame, cfg)
    _write_failures(out_dir / "cam_failures.csv", failures, cfg)
    if frame.empty:
        return EXIT_NO_ROWS
    cohort = read_cohort(args.cohort) if args.cohort else None
    for kind in ("mean_sd", "median_iqr"):
        table = summary_table(frame, cohort, kind)
        write_csv(out_dir / f"cam_summary_{kind}.csv", table, cfg)
        write_text(out_dir / f"cam_summary_{kind}.md", summary_markdown(table), cfg)
    return EXIT_OK


# --- group comparison -------------------------------------------------------------------

def cmd_group_compare(args, cfg):
    records = read_table(args.cam_csv)
    grouping = read_table(args.grouping)
    if not {"subject_id", "group"} <= set(grouping.columns):
        raise UsageError("grouping CSV needs subject_id and group columns")
    if grouping.groupby("subject_id")["group"].nunique().gt(1).any():
        raise UsageError("grouping assigns a subject to more than one group")
    cohort = read_cohort(args.cohort) if args.cohort else None
    table = group_compare_cam(records, grouping, cohort, args.groups)
    out_dir = Path(cfg["out_dir"])
    write_csv(out_dir / "group_compare.csv", table, cfg)
    write_text(out_dir / "group_compare.md", comparison_markdown(table), cfg)
    return EXIT_OK


# --- baselines ---------------------------------------------------------------------------

def _aligned(cohort_path, morph_path):
    cohort = read_cohort(cohort_path)
    morph = read_table(morph_path)
    features = [c for c in FEATURE_COLUMNS if c in morph.columns]
    if not features:
        raise UsageError("morphometry CSV has no feature columns")
    data = cohort.merge(morph[[*KEY, *features]], on=KEY, how="inner")
    if data.empty:
        raise UsageError("cohort and morphometry share no (subject_id, eye) rows")
    return data, features


def _baseline_task(item):
    factor, model_name, Xd, yd, gd, Xv, yv, cfg, seed = item
    rows = []
    try:
        imputer = MeanImputer().fit(Xd)
        scaler = StandardScaler().fit(imputer.transform(Xd))
        Zd = scaler.transform(imputer.transform(Xd))
        Zv = scaler.transform(imputer.transform(Xv))
        if factor in CATEGORICAL:
            if model_name == "LR":
                model = LogisticModel().fit(Zd, yd)
            else:
                grid = cfg.get("hgb_grid", HGB_GRID)
                _, model = grid_search_hgb(Zd, yd, gd, "classification", grid, seed=seed)
            classes = list(model.classes_)
            proba = model.predict_proba(Zv)
            pred = np.asarray(classes, dtype=object)[np.argmax(proba, axis=1)]
            scores = proba[:, 1] if len(classes) == 2 else proba
            rows.append(evaluate_with_ci(pred, yv, "balanced_accuracy", cfg["n_boot"], seed, classes,
                                         factor, model_name))
            rows.append(evaluate_with_ci(scores, yv, "auroc", cfg["n_boot"], seed, classes, factor, model_name))
        else:
            if model_name == "LR":
                model = RidgeRegression(alpha=float(cfg.get("lr_alpha", 1e-6))).fit(Zd, yd)
            else:
                grid = cfg.get("hgb_grid", HGB_GRID)
                _, model = grid_search_hgb(Zd, yd, gd, "regression", grid, seed=seed)
            rows.append(evaluate_with_ci(model.predict(Zv), yv, "r2", cfg["n_boot"], seed,
                                         factor=factor, model=model_name))
        return [dict(r.__dict__, status="ok") for r in rows]
    except (RetinaCamError, ValueError, np.linalg.LinAlgError) as exc:
        return [{"factor": factor, "model": model_name, "metric": "", "value": math.nan, "ci_lo": math.nan,
                 "ci_hi": math.nan, "chance": math.nan, "status": f"failed:{type(exc).__name__}"}]


def cmd_baseline(args, cfg):
    data, features = _aligned(args.cohort, args.morphometry)
    if "split" not in data.columns or data["split"].isna().any():
        data["split"] = stratified_split(data, 0.8, cfg["seed"]).to_numpy()
    factors = args.factors or cfg.get("factors") or [f for f in FACTORS if f in data.columns]
    items = []
    for factor in factors:
        if factor not in data.columns:
            raise UsageError(f"cohort has no factor {factor!r}")
        sub = data[data[factor].notna()]
        dev, val = sub[sub["split"] == "dev"], sub[sub["split"] == "val"]
        Xd, Xv = dev[features].to_numpy(float), val[features].to_numpy(float)
        keep = ~np.all(np.isnan(Xd), axis=0)
        y_dtype = object if factor in CATEGORICAL else float
        for model in ("LR", "HGB"):
            items.append((factor, model, Xd[:, keep], dev[factor].to_numpy(y_dtype), dev["subject_id"].to_numpy(),
                          Xv[:, keep], val[factor].to_numpy(y_dtype), cfg, task_seed(cfg["seed"], factor, model)))
    rows = [r for chunk in run_tasks(_baseline_task, items, cfg["threads"]) for r in chunk]
    cols = ["factor", "model", "metric", "value", "ci_lo", "ci_hi", "chance", "status"]
    report = pd.DataFrame(rows, columns=cols)
    write_csv(Path(cfg["out_dir"]) / "baseline.csv", report, cfg)
    return EXIT_OK if (report["status"] == "ok").any() else EXIT_NO_ROWS


# --- probing --------------------------------------------------------------------------------

def probe_targets(morph: pd.DataFrame, zones=ZONES) -> pd.DataFrame:
    """The per-zone feature sets: shared geometry plus each zone's vascular and caliber columns."""
    cols = {}
    for zone in zones:
        for base in BASE_FEATURES:
            col = feature_column(base, zone)
            cols[(base, zone)] = morph[col].to_numpy(float) if col in morph.columns else np.full(len(morph), np.nan)
    return pd.DataFrame(cols, index=morph.index)


def _probe_task(item):
    source, E, targets, groups, k, seed = item
    return source, linear_probe(E, targets, groups, k, seed)


def cmd_probe(args, cfg):
    emb = read_table(args.embeddings)
    morph = read_table(args.morphometry)
    ecols = [c for c in emb.columns if c.startswith("e") and c[1:].isdigit()]
    if not ecols or "source" not in emb.columns:
        raise UsageError("embeddings CSV needs subject_id, eye, source and e0..eN columns")
    k = int(cfg.get("probe_folds", 10))
    items = []
    for source in sorted(emb["source"].astype(str).unique()):
        part = emb[emb["source"].astype(str) == source].merge(morph, on=KEY, how="inner")
        part = part.sort_values(KEY, kind="stable").reset_index(drop=True)
        targets = probe_targets(part, cfg["zones"])
        flat = targets.copy()
        flat.columns = [f"{b}|{z}" for b, z in targets.columns]
        items.append((source, part[ecols].to_numpy(float), flat, part["subject_id"].to_numpy(), k,
                      task_seed(cfg["seed"], "probe", source)))
    rows = []
    for source, res in run_tasks(_probe_task, items, cfg["threads"]):
        for r in res.itertuples(index=False):
            feature, zone = r.target.split("|")
            rows.append({"feature": feature, "zone": zone, "source": source, "r2_mean": r.r2_mean,
                         "r2_sd": r.r2_sd, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "n_folds": r.n_folds})
    out = pd.DataFrame(rows, columns=["feature", "zone", "source", "r2_mean", "r2_sd", "ci_lo", "ci_hi", "n_folds"])
    write_csv(Path(cfg["out_dir"]) / "probe.csv", out, cfg)
    return EXIT_OK if len(out) else EXIT_NO_ROWS


# --- imputation ---------------------------------------------------------------------------------

def cmd_impute(args, cfg):
    cohort = read_cohort(args.cohort)
    if "split" not in cohort.columns or cohort["split"].isna().any():
        cohort["split"] = stratified_split(cohort, 0.8, cfg["seed"]).to_numpy()
    out = impute_cohort(cohort, k=cfg["knn_k"], seed=cfg["seed"])
    write_csv(Path(cfg["out_dir"]) / "imputed_cohort.csv", out, cfg)
    return EXIT_OK


# --- association -----------------------------------------------------------------------------

ASSOC_COLUMNS = ["factor", "contrast", "feature", "zone", "test", "statistic", "effect", "n_a", "n_b",
                 "p_value", "significant"]


def split_feature(col):
    for z in ZONES:
        if col.endswith(f"_zone{z}"):
            return col[: -len(f"_zone{z}")], z
    return col, ""


def subject_means(data: pd.DataFrame, features) -> pd.DataFrame:
    """One row per subject: factor values plus the mean of each feature over available eyes."""
    factors = [f for f in FACTORS if f in data.columns]
    feats = data.groupby("subject_id", sort=True)[features].mean()
    facts = data.drop_duplicates("subject_id").set_index("subject_id")[factors]
    return facts.join(feats, how="inner")


def association_table(subjects: pd.DataFrame, features, factors, n_perm=10000, seed=0, alpha=0.05):
    """Per (factor contrast, feature) test with permutation p values.

    Categorical factors compare every level against the first declared
    level with a t statistic and a mean-difference permutation test;
    continuous factors use Pearson's r with a permutation test.
    """
    rows = []
    for factor in factors:
        sub = subjects[subjects[factor].notna()]
        X = sub[features].to_numpy(float)
        if factor in CATEGORICAL:
            ref = CATEGORICAL[factor][0]
            for level in CATEGORICAL[factor][1:]:
                sel = sub[factor].isin([ref, level]).to_numpy()
                g = (sub[factor] == level).to_numpy()[sel]
                contrast = f"{level} vs {ref}"
                diff, p, na, nb = permutation_association(g, X[sel], "groups", n_perm,
                                                          task_seed(seed, "assoc", factor, contrast))
                for j, col in enumerate(features):
                    x = X[sel][:, j]
                    a, b = x[g & ~np.isnan(x)], x[~g & ~np.isnan(x)]
                    try:
                        t = student_t_independent(a, b).statistic if np.isfinite(p[j]) else math.nan
                    except (RetinaCamError, ValueError):
                        t = math.nan
                    if not np.isfinite(t):
                        p[j] = diff[j] = math.nan
                    rows.append((factor, contrast, *split_feature(col), "t", t, diff[j], na[j], nb[j], p[j]))
        else:
            r, p, n, _ = permutation_association(sub[factor].to_numpy(float), X, "pearson", n_perm,
                                                 task_seed(seed, "assoc", factor))
            for j, col in enumerate(features):
                rows.append((factor, "pearson", *split_feature(col), "pearson", r[j], r[j], n[j], 0, p[j]))
    out = pd.DataFrame(rows, columns=ASSOC_COLUMNS[:-1])
    out["significant"] = np.where(out["p_value"].notna(), (out["p_value"] < alpha).astype(object), None)
    return out


def _assoc_task(item):
    subjects, features, factor, n_perm, seed = item
    return association_table(subjects, features, [factor], n_perm, seed)


def cmd_assoc(args, cfg):
    data, features = _aligned(args.cohort, args.morphometry)
    subjects = subject_means(data, features)
    factors = args.factors or cfg.get("factors") or [f for f in FACTORS if f in subjects.columns]
    items = [(subjects, features, f, cfg["n_perm"], cfg["seed"]) for f in factors]
    parts = run_tasks(_assoc_task, items, cfg["threads"])
    table = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=ASSOC_COLUMNS)
    write_csv(Path(cfg["out_dir"]) / "assoc.csv", table, cfg)
    return EXIT_OK if table["p_value"].notna().any() else EXIT_NO_ROWS


# --- cohort simulation ------------------------------------------------------------------------------

SIM_DEFAULTS = {"n_subjects": 200, "effects": {}, "missing_rates": {}, "saliency_factors": [],
                "noise_sd": 0.1, "shape": [912, 912], "dependence": None}


def _sim_task(item):
    from .synth import analytic_truth, rasterize_phantom, synth_saliency, truth_record
    out_dir, sid, eye, spec, saliency, noise_sd, seed = item
    bundle = rasterize_phantom(spec, laterality=eye, subject_id=sid)
    for s in STRUCTURES:
        write_mask(Path(out_dir) / "masks" / f"{sid}_{eye}_{s.value}.png", bundle.mask(s))
    for factor, levels in saliency:
        field = synth_saliency(bundle, [s.value for s in STRUCTURES], 0.9, 0.1, noise_sd,
                               task_seed(seed, sid, eye, "saliency", factor), levels)
        write_field(Path(out_dir) / "saliency" / f"{sid}_{eye}_{factor}.pfm", field.astype(np.float32))
    truth = analytic_truth(spec)
    truth.update(subject_id=sid, eye=eye, spec=spec.to_dict())
    with open(Path(out_dir) / "truth" / f"{sid}_{eye}.truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return truth_record(truth)


def cmd_cohort_sim(args, cfg):
    from .synth import generate_cohort
    sim = dict(SIM_DEFAULTS)
    sim.update({k: cfg[k] for k in SIM_DEFAULTS if k in cfg})
    if args.n_subjects is not None:
        sim["n_subjects"] = args.n_subjects
    if args.saliency_factors:
        sim["saliency_factors"] = list(args.saliency_factors)
    cfg.update(sim)
    if not isinstance(sim["n_subjects"], int) or sim["n_subjects"] < 1:
        raise UsageError("n_subjects must be a positive integer")
    out_dir = Path(cfg["out_dir"])
    for sub in ("masks", "saliency", "truth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    try:
        res = generate_cohort(sim["n_subjects"], sim["effects"], sim["missing_rates"], cfg["seed"],
                              tuple(sim["shape"]), tuple(sim["saliency_factors"]), sim["dependence"])
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from None
    items = []
    for r in res.manifest.itertuples(index=False):
        sal = [(f, res.saliency[(r.subject_id, r.eye, f)]) for f in sim["saliency_factors"]]
        items.append((str(out_dir), r.subject_id, r.eye, res.specs[(r.subject_id, r.eye)], sal,
                      float(sim["noise_sd"]), cfg["seed"]))
    truths = run_tasks(_sim_task, items, cfg["threads"])
    truth_frame = pd.DataFrame([{"subject_id": it[1], "eye": it[2], **t} for it, t in zip(items, truths)],
                               columns=[*KEY, *FEATURE_COLUMNS])
    write_csv(out_dir / "manifest.csv", res.manifest, cfg)
    write_csv(out_dir / "cohort.csv", res.cohort, cfg)
    write_csv(out_dir / "morphometry_truth.csv", truth_frame, cfg)
    with open(out_dir / "sim_config.json", "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in cfg.items() if k not in _EXECUTION_KEYS}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------------------------

def _common(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="global seed (default 0)")
    parser.add_argument("--threads", type=int, default=default, help="worker processes (default 1)")
    parser.add_argument("--out-dir", dest="out_dir", default=default, help="output directory (default .)")
    parser.add_argument("--config", default=default, help="JSON run configuration")


def build_parser():
    parser = _Parser(prog="retinacam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"retinacam {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("morphometry", help="morphometry features for every manifest row")
    p.add_argument("manifest")
    p.add_argument("--graph-json", action="store_true", help="also write traced vessel graphs as JSON")
    p.set_defaults(func=cmd_morphometry)

    p = sub.add_parser("cam-score", help="saliency overlap scores and population summaries")
    p.add_argument("manifest")
    p.add_argument("--threshold", type=float, default=None, help="saliency threshold t (default 0.5)")
    p.add_argument("--factors", nargs="+", help="saliency factors to score (default: all in manifest)")
    p.add_argument("--cohort", help="cohort CSV used to split summaries by factor level")
    p.set_defaults(func=cmd_cam_score)

    p = sub.add_parser("group-compare", help="compare non-zero CAM scores between two subject groups")
    p.add_argument("cam_csv")
    p.add_argument("grouping")
    p.add_argument("--groups", nargs=2, metavar=("A", "B"), help="group order (default: sorted names)")
    p.add_argument("--cohort", help="cohort CSV used to split rows by factor level")
    p.set_defaults(func=cmd_group_compare)

    p = sub.add_parser("baseline", help="LR and HGB risk-factor models on morphometry features")
    p.add_argument("cohort")
    p.add_argument("morphometry")
    p.add_argument("--factors", nargs="+")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("probe", help="linear probes from embeddings to morphometry features")
    p.add_argument("embeddings")
    p.add_argument("morphometry")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("impute", help="two-stage imputation of a cohort CSV")
    p.add_argument("cohort")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("cohort-sim", help="write a synthetic phantom cohort with analytic truth")
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--saliency-factors", nargs="+")
    p.set_defaults(func=cmd_cohort_sim)

    p = sub.add_parser("assoc", help="risk factor by morphometry association tests")
    p.add_argument("cohort")
    p.add_argument("morphometry")
    p.add_argument("--factors", nargs="+")
    p.set_defaults(func=cmd_assoc)

    for p in sub.choices.values():
        _common(p, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="retinacam: %(levelname)s: %(message)s", stream=sys.stderr, force=True)
    if not hasattr(args, "threshold"):
        args.threshold = None
    try:
        cfg = resolve_config(args)
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (RetinaCamError, ValueError, KeyError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NO_ROWS


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
