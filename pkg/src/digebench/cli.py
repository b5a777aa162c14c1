"""Command-line orchestration: reproducible pipelines over cohort manifests.

Two subcommands: `synth` generates a cohort directory from a config, `run`
executes one named task against an existing cohort. Reports are plain JSON or
CSV with no timestamps inside, so identical config and inputs give
byte-identical artifacts; wall-clock provenance lives only in the run
manifest. Exit codes: 0 success, 2 invalid input or config, 3 numerical
non-convergence, 4 unsatisfiable experimental design.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from . import evalheads, mil, sampler, screening, survival
from .datastore import (Cohort, SynthSpec, UnsatisfiableDesignError,
                        assign_folds, fold_split, load_cohort, synth_cohort,
                        write_manifest)
from .metrics import (BootstrapError, ConfusionMatrix, auroc,
                      balanced_accuracy, bootstrap_ci, weighted_f1)
from .numerics import NonFiniteError
from ._parallel import map_ordered

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NONCONVERGENCE = 3
EXIT_UNSATISFIABLE = 4

TASKS = ("folds", "sample-rois", "train-mil", "eval-mil", "probe", "fewshot",
         "retrieve", "survival", "screen-calibrate", "screen-apply",
         "screen-report", "heatmap")

# Tasks that draw random numbers and therefore refuse to run without a seed.
SEED_REQUIRED = {"folds", "sample-rois", "train-mil", "fewshot", "survival",
                 "screen-report"}


@dataclass
class RunConfig:
    """Effective configuration: TOML file contents with flag overrides applied."""

    data: Dict[str, Any] = field(default_factory=dict)

    def section(self, name: str) -> Dict[str, Any]:
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            raise ValueError(f"config section [{name}] must be a table")
        return value

    def get(self, section: str, key: str, default=None):
        return self.section(section).get(key, default)

    @property
    def seed(self) -> Optional[int]:
        seed = self.data.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ValueError(f"seed must be an integer, got {seed!r}")
        return seed

    def hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        raw = Path(path).read_bytes()
        try:
            data = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"invalid TOML in {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        dotted, _, raw_value = item.partition("=")
        keys = dotted.split(".")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} descends into a non-table")
        node[keys[-1]] = value
    return RunConfig(data)


def _provenance(cfg: RunConfig, seed: Optional[int]) -> Dict[str, Any]:
    return {"toolkit_version": __version__, "config_hash": cfg.hash(), "seed": seed}


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _write_run_manifest(out_dir: Path, task: str, cfg: RunConfig, seed: Optional[int],
                        artifacts: List[Path], started: float) -> None:
    payload = {
        "task": task,
        "artifacts": sorted(str(p.relative_to(out_dir)) for p in artifacts),
        "toolkit_version": __version__,
        "config_hash": cfg.hash(),
        "seed": seed,
        "elapsed_seconds": round(time.time() - started, 3),
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _require_seed(task: str, seed: Optional[int]) -> int:
    if seed is None:
        raise ValueError(f"task {task!r} is stochastic and requires an explicit seed "
                         "(config key `seed` or --seed)")
    return seed


def _load_cohort(cfg: RunConfig, args) -> Cohort:
    manifest = getattr(args, "manifest", None) or cfg.get("cohort", "manifest")
    if manifest is None:
        raise ValueError("no cohort manifest: set [cohort].manifest or --manifest")
    task_kind = cfg.get("cohort", "task_kind")
    return load_cohort(manifest, task_kind=task_kind)


def _fold(cfg: RunConfig, args) -> int:
    if getattr(args, "fold", None) is not None:
        return args.fold
    return int(cfg.get("folds", "eval_fold", 0))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    section = cfg.section("synth")
    if not section:
        raise ValueError("config needs a [synth] section")
    seed = _require_seed("synth", cfg.seed if "seed" not in section else section.get("seed"))
    started = time.time()

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    patches = section.get("patches_per_slide", [8, 32])
    spec = SynthSpec(
        n_slides=int(section.get("n_slides", 100)),
        patches_per_slide=(int(patches[0]), int(patches[1])),
        dim=int(section.get("dim", 32)),
        n_classes=int(section.get("n_classes", 2)),
        class_mean_separation=float(section.get("class_mean_separation", 2.0)),
        signal_fraction=float(section.get("signal_fraction", 0.5)),
        censoring_rate=float(section.get("censoring_rate", 0.0)),
        seed=seed,
    )
    cohort = synth_cohort(spec,
                          task_kind=section.get("task_kind", "classification"),
                          n_sites=int(section.get("n_sites", 1)),
                          name=section.get("name", "synthetic"))
    manifest_path = write_manifest(cohort, out)
    prov = _provenance(cfg, seed)
    prov["synth_spec"] = {**asdict(spec), "patches_per_slide": list(spec.patches_per_slide)}
    prov_path = _write_json(out / "provenance.json", prov)
    _write_run_manifest(out, "synth", cfg, seed, [manifest_path, prov_path], started)
    print(f"wrote {len(cohort.slides)} slides to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run tasks
# ---------------------------------------------------------------------------


def _task_folds(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    k = int(cfg.get("folds", "k", 5))
    assign_folds(cohort, k, seed=seed)
    manifest_path = write_manifest(cohort, out)
    counts: Dict[str, Dict[str, int]] = {}
    for slide in cohort.slides:
        per_class = counts.setdefault(str(slide.label), {})
        key = str(slide.fold)
        per_class[key] = per_class.get(key, 0) + 1
    report = {**_provenance(cfg, seed), "k": k, "fold_counts_per_class": counts}
    return [manifest_path, _write_json(out / "folds_summary.json", report)]


def _task_sample_rois(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    threshold = float(cfg.get("sampler", "threshold", 0.5))
    tolerance = float(cfg.get("sampler", "target_ratio_tolerance", 0.02))
    missing = [s.slide_id for s in cohort.slides if s.roi_tumor_probs is None]
    if missing:
        raise ValueError(f"slides without roi_tumor_probs: {missing[:3]}")
    dataset = sampler.build_balanced_dataset(cohort.slides, threshold=threshold,
                                             target_ratio_tolerance=tolerance, seed=seed)
    rois_path = out / "rois.jsonl"
    summary_path = out / "sampling_summary.json"
    sampler.write_refined_dataset(dataset, rois_path)
    summary = {
        **_provenance(cfg, seed),
        "tumor_count": dataset.tumor_count,
        "nontumor_count": dataset.nontumor_count,
        "balanced": dataset.balanced,
        "imbalance": dataset.imbalance,
        "warning": dataset.warning,
        "threshold": threshold,
        "target_ratio_tolerance": tolerance,
    }
    _write_json(summary_path, summary)
    return [rois_path, summary_path]


def _mil_config(cfg: RunConfig, seed: int) -> mil.MilTrainConfig:
    section = cfg.section("mil")
    return mil.MilTrainConfig(
        learning_rate=float(section.get("learning_rate", 1e-4)),
        epochs=int(section.get("epochs", 50)),
        early_stop_patience=int(section.get("early_stop_patience", 5)),
        batch_slides=int(section.get("batch_slides", 1)),
        seed=seed,
        attn_dim=int(section.get("attn_dim", 128)),
        weight_init_scale=float(section.get("weight_init_scale", 1.0)),
    )


def _task_train_mil(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    fold = _fold(cfg, args)
    model, log = mil.train_mil(cohort, fold, _mil_config(cfg, seed))
    model_path = out / "mil_model.dgmm"
    mil.save_model(model, model_path)
    report = {
        **_provenance(cfg, seed),
        "fold": fold,
        "best_epoch": log.best_epoch,
        "best_val_balanced_accuracy": log.best_val_balanced_accuracy,
        "stopped_early": log.stopped_early,
        "epochs": log.epochs,
    }
    return [model_path, _write_json(out / "train_log.json", report)]


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> List[Dict[str, float]]:
    thresholds = np.unique(scores)[::-1]
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    points = [{"threshold": float("inf"), "fpr": 0.0, "tpr": 0.0}]
    for t in thresholds:
        flags = scores >= t
        points.append({
            "threshold": float(t),
            "fpr": float((flags & (labels == 0)).sum() / n_neg),
            "tpr": float((flags & (labels == 1)).sum() / n_pos),
        })
    return points


def _task_eval_mil(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    fold = _fold(cfg, args)
    model_path = args.model or cfg.get("mil", "model_path")
    if model_path is None:
        raise ValueError("eval-mil needs a model file: --model or [mil].model_path")
    model = mil.load_model(model_path)
    test = fold_split(cohort, fold)[2]
    preds = map_ordered(lambda s: mil.bag_forward(s, model)[0], test)
    probs = np.vstack([np.exp(lg - lg.max()) / np.exp(lg - lg.max()).sum() for lg in preds])
    labels = np.array([s.label for s in test], dtype=np.int64)
    predicted = probs.argmax(axis=1)

    cm = ConfusionMatrix.from_labels(labels, predicted, n_classes=cohort.n_classes)
    binary = cohort.n_classes == 2
    scores = probs[:, 1] if binary else probs
    metrics_report: Dict[str, Any] = {
        "balanced_accuracy": balanced_accuracy(cm),
        "weighted_f1": weighted_f1(cm),
        "auroc": auroc(scores, labels),
        "n_test_slides": len(test),
        "fold": fold,
    }
    replicates = args.bootstrap if args.bootstrap is not None else int(cfg.get("mil", "bootstrap", 0))
    if replicates:
        seed = _require_seed("eval-mil --bootstrap", seed)
        cis = {
            "balanced_accuracy": bootstrap_ci(
                lambda idx: balanced_accuracy(
                    ConfusionMatrix.from_labels(labels[idx], predicted[idx],
                                                n_classes=cohort.n_classes)),
                len(test), replicates=replicates, seed=seed),
            "weighted_f1": bootstrap_ci(
                lambda idx: weighted_f1(
                    ConfusionMatrix.from_labels(labels[idx], predicted[idx],
                                                n_classes=cohort.n_classes)),
                len(test), replicates=replicates, seed=seed + 1),
            "auroc": bootstrap_ci(
                lambda idx: auroc(scores[idx], labels[idx]),
                len(test), replicates=replicates, seed=seed + 2),
        }
        metrics_report["bootstrap"] = {
            name: {"point": ci.point, "ci_lower": ci.lower, "ci_upper": ci.upper,
                   "replicates": ci.replicates}
            for name, ci in cis.items()
        }
    report = {**_provenance(cfg, seed), "metrics": metrics_report}
    artifacts = [_write_json(out / "eval_mil.json", report)]

    preds_path = out / "predictions.jsonl"
    with preds_path.open("w") as fh:
        for slide, p, c in zip(test, probs, predicted):
            fh.write(json.dumps({
                "slide_id": slide.slide_id, "label": slide.label, "site": slide.site,
                "predicted_class": int(c),
                "probabilities": [float(v) for v in p],
                "score": float(p[1]) if binary else None,
            }) + "\n")
    artifacts.append(preds_path)

    if binary:
        roc_path = out / "roc.csv"
        lines = ["threshold,fpr,tpr"]
        lines += [f"{pt['threshold']:.10g},{pt['fpr']:.10g},{pt['tpr']:.10g}"
                  for pt in _roc_points(probs[:, 1], labels)]
        roc_path.write_text("\n".join(lines) + "\n")
        artifacts.append(roc_path)
    return artifacts


def _bag_mean_features(slides) -> np.ndarray:
    return np.stack([s.feature_matrix().mean(axis=0) for s in slides])


def _task_probe(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    fold = _fold(cfg, args)
    train, val, test = fold_split(cohort, fold)
    fit_slides = train + val  # the probe has no early stopping, so val joins train
    X_fit = _bag_mean_features(fit_slides)
    y_fit = np.array([s.label for s in fit_slides], dtype=np.int64)
    X_test = _bag_mean_features(test)
    y_test = np.array([s.label for s in test], dtype=np.int64)

    variant = cfg.get("probe", "lambda_variant", "literal")
    lam = cfg.get("probe", "lam")
    if lam is None:
        lam = evalheads.probe_lambda(X_fit.shape[1], cohort.n_classes, variant=variant)
    max_iterations = int(cfg.get("probe", "max_iterations", 1000))
    probe = evalheads.fit_linear_probe(X_fit, y_fit, float(lam), max_iterations=max_iterations)
    train_acc = float((evalheads.probe_predict(probe, X_fit) == y_fit).mean())
    test_acc = float((evalheads.probe_predict(probe, X_test) == y_test).mean())
    cm = ConfusionMatrix.from_labels(
        y_test, evalheads.probe_predict(probe, X_test), n_classes=cohort.n_classes)
    report = {
        **_provenance(cfg, seed),
        "fold": fold,
        "lambda": float(lam),
        "lambda_variant": variant,
        "converged": probe.converged,
        "iterations": probe.iterations,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "test_balanced_accuracy": balanced_accuracy(cm),
    }
    return [_write_json(out / "probe_report.json", report)]


def _task_fewshot(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    labeled = cohort.labeled_slides()
    X = _bag_mean_features(labeled)
    y = np.array([s.label for s in labeled], dtype=np.int64)
    bank = evalheads.bank_from_labels(X, y)
    section = cfg.section("fewshot")
    shots = [int(s) for s in section.get("shots", [1, 2, 4, 8, 16, 32, 64, 128, 256])]
    episodes = int(section.get("episodes", 1000))
    ways = section.get("ways")
    query = int(section.get("query_per_class", 15))
    results = evalheads.run_fewshot(bank, shots, episodes=episodes,
                                    ways=int(ways) if ways else None,
                                    query_per_class=query, seed=seed)
    if not results:
        raise UnsatisfiableDesignError(
            f"no requested shot count is satisfiable (shots={shots}, "
            f"smallest class has {min(len(b) for b in bank)} slides)")
    report = {
        **_provenance(cfg, seed),
        "episodes": episodes,
        "query_per_class": query,
        "ways": int(ways) if ways else len(bank),
        "per_shot": {str(k): asdict(v) for k, v in results.items()},
    }
    json_path = _write_json(out / "fewshot.json", report)
    csv_path = out / "fewshot.csv"
    lines = ["shot,median,q25,q75,min,max"]
    lines += [f"{k},{v.median:.10g},{v.q25:.10g},{v.q75:.10g},{v.min:.10g},{v.max:.10g}"
              for k, v in sorted(results.items())]
    csv_path.write_text("\n".join(lines) + "\n")
    return [json_path, csv_path]


def _task_retrieve(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    fold = _fold(cfg, args)
    train, val, test = fold_split(cohort, fold)
    fit_slides = train + val
    index = evalheads.build_prototypes(
        _bag_mean_features(fit_slides),
        np.array([s.label for s in fit_slides], dtype=np.int64),
        class_names=cohort.class_names)
    candidates = _bag_mean_features(test)
    ids = [s.slide_id for s in test]
    k = int(cfg.get("retrieve", "k", 5))
    path = out / "retrieval.jsonl"
    with path.open("w") as fh:
        for c, name in enumerate(cohort.class_names):
            top = evalheads.topk_nearest_to_prototype(c, index, candidates,
                                                      candidate_ids=ids, k=k)
            for rank, (slide_id, sim) in enumerate(top, start=1):
                fh.write(json.dumps({
                    "class": name, "rank": rank,
                    "candidate_id": slide_id, "similarity": sim,
                }) + "\n")
    report = {**_provenance(cfg, seed), "fold": fold, "k": k,
              "n_candidates": len(ids)}
    return [path, _write_json(out / "retrieval_report.json", report)]


def _task_survival(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    fold = _fold(cfg, args)
    section = cfg.section("survival")
    config = survival.RiskTrainConfig(
        learning_rate=float(section.get("learning_rate", 1e-2)),
        epochs=int(section.get("epochs", 100)),
        early_stop_patience=int(section.get("early_stop_patience", 5)),
        seed=seed,
        attn_dim=int(section.get("attn_dim", 64)),
        weight_init_scale=float(section.get("weight_init_scale", 1.0)),
    )
    model, log = survival.train_risk_model(cohort, fold, config)
    test = fold_split(cohort, fold)[2]
    records = [s.survival for s in test]
    theta = survival.predict_risk(test, model)
    ci = survival.c_index(theta, records)
    low, high = survival.stratify_by_median_risk(theta, records)
    chi2, p = survival.logrank_test([records[i] for i in low],
                                    [records[i] for i in high])
    low_path = out / "km_low_risk.csv"
    high_path = out / "km_high_risk.csv"
    survival.write_km_csv(survival.km_curve([records[i] for i in low]), low_path)
    survival.write_km_csv(survival.km_curve([records[i] for i in high]), high_path)
    report = {
        **_provenance(cfg, seed),
        "fold": fold,
        "c_index": ci,
        "logrank_chi2": chi2,
        "logrank_p": p,
        "group_sizes": {"low": int(low.size), "high": int(high.size)},
        "best_val_c_index": log.best_val_c_index,
        "best_epoch": log.best_epoch,
        "epochs_run": len(log.epochs),
    }
    return [_write_json(out / "survival_report.json", report), low_path, high_path]


def _load_scores_jsonl(path, taxonomy: Optional[Dict[str, str]]) -> List[Dict[str, Any]]:
    rows = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: invalid JSON ({exc.msg})") from exc
            if "slide_id" not in row or "score" not in row:
                raise ValueError(f"{path} line {lineno}: needs slide_id and score")
            if "label" in row and row["label"] is not None:
                label = int(row["label"])
            elif "class_name" in row:
                label = int(screening.positive_label_rule(row["class_name"], taxonomy)
                            == screening.POSITIVE)
            else:
                raise ValueError(f"{path} line {lineno}: needs label or class_name")
            rows.append({
                "slide_id": row["slide_id"],
                "site": row.get("site", "default"),
                "score": float(row["score"]),
                "label": label,
            })
    if not rows:
        raise ValueError(f"{path}: no score rows")
    return rows


def _taxonomy(cfg: RunConfig) -> Optional[Dict[str, str]]:
    tax = cfg.get("screening", "taxonomy")
    if tax is None:
        return None
    if not isinstance(tax, dict):
        raise ValueError("[screening].taxonomy must be a table of class -> positive/negative")
    return tax


def _task_screen_calibrate(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    if args.scores is None:
        raise ValueError("screen-calibrate needs --scores JSONL")
    rows = _load_scores_jsonl(args.scores, _taxonomy(cfg))
    target = float(cfg.get("screening", "target_sensitivity", 0.99))
    op = screening.calibrate_threshold([r["score"] for r in rows],
                                       [r["label"] for r in rows],
                                       target_sensitivity=target)
    report = {**_provenance(cfg, seed), **asdict(op)}
    return [_write_json(out / "operating_point.json", report)]


def _load_operating_point(path) -> screening.OperatingPoint:
    data = json.loads(Path(path).read_text())
    fields = ("threshold", "target_sensitivity", "achieved_sensitivity",
              "achieved_specificity", "calibration_n")
    missing = [f for f in fields if f not in data]
    if missing:
        raise ValueError(f"{path}: operating point missing fields {missing}")
    return screening.OperatingPoint(**{f: data[f] for f in fields})


def _task_screen_apply(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    if args.scores is None or args.operating_point is None:
        raise ValueError("screen-apply needs --scores and --operating-point")
    rows = _load_scores_jsonl(args.scores, _taxonomy(cfg))
    op = _load_operating_point(args.operating_point)
    flags = screening.apply_screening([r["score"] for r in rows], op)
    path = out / "flags.jsonl"
    with path.open("w") as fh:
        for row, flag in zip(rows, flags):
            fh.write(json.dumps({**row, "flag": bool(flag)}) + "\n")
    return [path]


def _task_screen_report(cfg: RunConfig, args, out: Path, seed: int) -> List[Path]:
    if args.flags is None:
        raise ValueError("screen-report needs --flags JSONL")
    results = []
    with Path(args.flags).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            for key in ("slide_id", "site", "label", "flag"):
                if key not in row:
                    raise ValueError(f"{args.flags} line {lineno}: missing {key!r}")
            results.append(screening.SlideScreeningResult(
                slide_id=row["slide_id"], site=row["site"],
                label=int(row["label"]), flag=bool(row["flag"])))
    replicates = args.bootstrap if args.bootstrap is not None else int(
        cfg.get("screening", "bootstrap", 1000))
    reports, pooled = screening.site_report(results, replicates=replicates, seed=seed,
                                            with_ci=replicates > 0)
    csv_path = out / "screening_report.csv"
    screening.write_site_report_csv(reports, pooled, csv_path)
    missed_path = out / "missed_cases.jsonl"
    screening.write_missed_cases_jsonl(reports, missed_path)

    def report_dict(r: screening.SiteReport) -> Dict[str, Any]:
        return {
            "site": r.site, "n_slides": r.n_slides, "n_positive": r.n_positive,
            "sensitivity": r.sensitivity, "specificity": r.specificity,
            "accuracy": r.accuracy, "missed_case_ids": r.missed_case_ids,
            "sensitivity_ci": r.sensitivity_ci, "specificity_ci": r.specificity_ci,
            "accuracy_ci": r.accuracy_ci,
        }

    payload = {
        **_provenance(cfg, seed),
        "replicates": replicates,
        "sites": [report_dict(r) for r in reports],
        "pooled": report_dict(pooled),
    }
    json_path = _write_json(out / "screening_report.json", payload)
    return [csv_path, missed_path, json_path]


def _task_heatmap(cfg: RunConfig, args, out: Path, seed: Optional[int]) -> List[Path]:
    cohort = _load_cohort(cfg, args)
    model_path = args.model or cfg.get("mil", "model_path")
    if model_path is None:
        raise ValueError("heatmap needs a model file: --model or [mil].model_path")
    if args.slide is None:
        raise ValueError("heatmap needs --slide SLIDE_ID")
    model = mil.load_model(model_path)
    matches = [s for s in cohort.slides if s.slide_id == args.slide]
    if not matches:
        raise ValueError(f"slide {args.slide!r} not found in cohort")
    slide = matches[0]
    attention = mil.attention_weights(slide, model)
    base = out / f"heatmap_{slide.slide_id}"
    mil.export_heatmap(slide, attention, base)
    return [base.with_suffix(".csv"), base.with_suffix(".pgm")]


_TASK_FNS = {
    "folds": (_task_folds, True),
    "sample-rois": (_task_sample_rois, True),
    "train-mil": (_task_train_mil, True),
    "eval-mil": (_task_eval_mil, False),
    "probe": (_task_probe, False),
    "fewshot": (_task_fewshot, True),
    "retrieve": (_task_retrieve, False),
    "survival": (_task_survival, True),
    "screen-calibrate": (_task_screen_calibrate, False),
    "screen-apply": (_task_screen_apply, False),
    "screen-report": (_task_screen_report, True),
    "heatmap": (_task_heatmap, False),
}


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    seed = cfg.seed
    task_fn, needs_seed = _TASK_FNS[args.task]
    if needs_seed:
        seed = _require_seed(args.task, seed)
    started = time.time()
    out = _out_dir(args)
    artifacts = task_fn(cfg, args, out, seed)
    _write_run_manifest(out, args.task, cfg, seed, artifacts, started)
    print(f"{args.task}: wrote {len(artifacts)} artifacts to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="digebench",
        description="Desk-scale evaluation pipelines for patch-embedding cohorts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cohort directory")
    synth.add_argument("--config", required=True, help="TOML config with a [synth] section")
    synth.add_argument("--out", required=True, help="output cohort directory")
    synth.add_argument("--seed", type=int, default=None, help="overrides config seed")
    synth.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
    synth.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, e.g. --set synth.n_slides=50")
    synth.set_defaults(fn=cmd_synth)

    run = sub.add_parser("run", help="run one pipeline task")
    run.add_argument("task", choices=TASKS)
    run.add_argument("--config", default=None, help="TOML config file")
    run.add_argument("--out", required=True, help="output directory for artifacts")
    run.add_argument("--manifest", default=None, help="cohort manifest (overrides config)")
    run.add_argument("--seed", type=int, default=None, help="overrides config seed")
    run.add_argument("--fold", type=int, default=None, help="evaluation fold index")
    run.add_argument("--model", default=None, help="model file for eval/heatmap tasks")
    run.add_argument("--scores", default=None, help="scores JSONL for screening tasks")
    run.add_argument("--operating-point", dest="operating_point", default=None,
                     help="operating point JSON from screen-calibrate")
    run.add_argument("--flags", default=None, help="flags JSONL from screen-apply")
    run.add_argument("--slide", default=None, help="slide id for the heatmap task")
    run.add_argument("--bootstrap", type=int, default=None,
                     help="bootstrap replicate count where applicable")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="config override, e.g. --set mil.epochs=10")
    run.set_defaults(fn=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UnsatisfiableDesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSATISFIABLE
    except (NonFiniteError, BootstrapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
