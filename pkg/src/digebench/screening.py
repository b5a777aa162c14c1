"""Sensitivity-targeted screening: threshold calibration and site reporting.

A slide is flagged when its positive-class score clears a threshold chosen on
validation data: the largest threshold whose sensitivity still meets the
target, which maximizes specificity subject to the sensitivity constraint.
Reports break performance down by contributing site with bootstrap intervals
and an audit list of missed positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import UndefinedMetricError, bootstrap_ci

POSITIVE = "positive"
NEGATIVE = "negative"

# Diagnosis classes screened as positive: intraepithelial neoplasia of either
# grade and malignant tumors. Benign and inflammatory findings are negative.
DEFAULT_TAXONOMY: Dict[str, str] = {
    "low-grade intraepithelial neoplasia": POSITIVE,
    "high-grade intraepithelial neoplasia": POSITIVE,
    "malignant tumor": POSITIVE,
    "benign polyp": NEGATIVE,
    "chronic gastritis": NEGATIVE,
    "intestinal metaplasia": NEGATIVE,
}


def positive_label_rule(diagnosis_class: str,
                        taxonomy: Optional[Dict[str, str]] = None) -> str:
    """Map a diagnosis class to "positive" or "negative"; unmapped classes error."""
    taxonomy = DEFAULT_TAXONOMY if taxonomy is None else taxonomy
    try:
        value = taxonomy[diagnosis_class]
    except KeyError:
        known = sorted(taxonomy)
        raise ValueError(
            f"diagnosis class {diagnosis_class!r} is not in the screening taxonomy; "
            f"known classes: {known}") from None
    if value not in (POSITIVE, NEGATIVE):
        raise ValueError(f"taxonomy maps {diagnosis_class!r} to invalid value {value!r}")
    return value


@dataclass
class OperatingPoint:
    threshold: float
    target_sensitivity: float
    achieved_sensitivity: float
    achieved_specificity: float
    calibration_n: int


def _check_scores_labels(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if scores.size != labels.size:
        raise ValueError("scores and labels must have equal length")
    if np.any(scores < 0.0) or np.any(scores > 1.0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must lie in [0, 1]")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (1 = positive)")
    return scores, labels


def calibrate_threshold(val_scores, val_labels,
                        target_sensitivity: float = 0.99) -> OperatingPoint:
    """Largest threshold with validation sensitivity >= target (flag rule: >=).

    Candidate thresholds are the distinct observed scores plus 0. Threshold 0
    flags everything (sensitivity 1), so any target <= 1 is reachable.
    """
    scores, labels = _check_scores_labels(val_scores, val_labels)
    if not (0.0 <= target_sensitivity <= 1.0):
        raise ValueError(f"target sensitivity must lie in [0, 1], got {target_sensitivity}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("calibration set must contain both classes")
    candidates = np.unique(np.concatenate([scores, [0.0]]))[::-1]  # descending
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    for threshold in candidates:
        sensitivity = float((pos_scores >= threshold).mean())
        if sensitivity >= target_sensitivity:
            specificity = float((neg_scores < threshold).mean())
            return OperatingPoint(threshold=float(threshold),
                                  target_sensitivity=target_sensitivity,
                                  achieved_sensitivity=sensitivity,
                                  achieved_specificity=specificity,
                                  calibration_n=labels.size)
    raise AssertionError("unreachable: threshold 0 always meets any target <= 1")


def apply_screening(test_scores, op: OperatingPoint) -> np.ndarray:
    """Boolean flags: score >= op.threshold."""
    scores = np.asarray(test_scores, dtype=np.float64).ravel()
    if np.any(scores < 0.0) or np.any(scores > 1.0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must lie in [0, 1]")
    return scores >= op.threshold


@dataclass
class SlideScreeningResult:
    slide_id: str
    site: str
    label: int  # 1 = positive
    flag: bool


@dataclass
class SiteReport:
    site: str
    n_slides: int
    n_positive: int
    sensitivity: Optional[float]  # None when the site has no positives
    specificity: Optional[float]
    accuracy: float
    missed_case_ids: List[str] = field(default_factory=list)
    sensitivity_ci: Optional[Tuple[float, float]] = None
    specificity_ci: Optional[Tuple[float, float]] = None
    accuracy_ci: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.n_positive > self.n_slides:
            raise ValueError("n_positive cannot exceed n_slides")


def _summarize(site: str, results: Sequence[SlideScreeningResult],
               replicates: int, alpha: float, seed: int,
               with_ci: bool) -> SiteReport:
    labels = np.array([r.label for r in results], dtype=np.int64)
    flags = np.array([r.flag for r in results], dtype=bool)
    n = labels.size
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    tp = int((flags & (labels == 1)).sum())
    tn = int((~flags & (labels == 0)).sum())
    sensitivity = tp / n_pos if n_pos > 0 else None
    specificity = tn / n_neg if n_neg > 0 else None
    accuracy = (tp + tn) / n
    missed = [r.slide_id for r in results if r.label == 1 and not r.flag]

    report = SiteReport(site=site, n_slides=n, n_positive=n_pos,
                        sensitivity=sensitivity, specificity=specificity,
                        accuracy=accuracy, missed_case_ids=missed)
    if not with_ci or n < 2:
        return report

    def sens_metric(idx: np.ndarray) -> float:
        sub = labels[idx]
        if sub.sum() == 0:
            raise UndefinedMetricError("resample has no positives")
        return float(flags[idx][sub == 1].mean())

    def spec_metric(idx: np.ndarray) -> float:
        sub = labels[idx]
        if (sub == 0).sum() == 0:
            raise UndefinedMetricError("resample has no negatives")
        return float((~flags[idx][sub == 0]).mean())

    def acc_metric(idx: np.ndarray) -> float:
        return float((flags[idx] == (labels[idx] == 1)).mean())

    if sensitivity is not None:
        ci = bootstrap_ci(sens_metric, n, replicates=replicates, alpha=alpha, seed=seed)
        report.sensitivity_ci = (ci.lower, ci.upper)
    if specificity is not None:
        ci = bootstrap_ci(spec_metric, n, replicates=replicates, alpha=alpha, seed=seed + 1)
        report.specificity_ci = (ci.lower, ci.upper)
    ci = bootstrap_ci(acc_metric, n, replicates=replicates, alpha=alpha, seed=seed + 2)
    report.accuracy_ci = (ci.lower, ci.upper)
    return report


def site_report(results: Sequence[SlideScreeningResult], replicates: int = 1000,
                alpha: float = 0.05, seed: int = 0,
                with_ci: bool = True) -> Tuple[List[SiteReport], SiteReport]:
    """Per-site reports (sorted by site name) plus a pooled report over all slides."""
    if not results:
        raise ValueError("no screening results to report")
    by_site: Dict[str, List[SlideScreeningResult]] = {}
    for r in results:
        by_site.setdefault(r.site, []).append(r)
    reports = [
        _summarize(site, by_site[site], replicates, alpha, seed + 1000 * i, with_ci)
        for i, site in enumerate(sorted(by_site))
    ]
    pooled = _summarize("pooled", list(results), replicates, alpha, seed + 999000, with_ci)
    return reports, pooled


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6f}"


def _fmt_ci(ci: Optional[Tuple[float, float]]) -> str:
    return "n/a,n/a" if ci is None else f"{ci[0]:.6f},{ci[1]:.6f}"


def write_site_report_csv(reports: Sequence[SiteReport], pooled: SiteReport, path) -> None:
    header = ("site,n,n_positive,sensitivity,specificity,accuracy,"
              "sensitivity_ci_lower,sensitivity_ci_upper,"
              "specificity_ci_lower,specificity_ci_upper,"
              "accuracy_ci_lower,accuracy_ci_upper")
    lines = [header]
    for r in list(reports) + [pooled]:
        lines.append(",".join([
            r.site, str(r.n_slides), str(r.n_positive),
            _fmt(r.sensitivity), _fmt(r.specificity), _fmt(r.accuracy),
            _fmt_ci(r.sensitivity_ci), _fmt_ci(r.specificity_ci), _fmt_ci(r.accuracy_ci),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_missed_cases_jsonl(reports: Sequence[SiteReport], path) -> None:
    with Path(path).open("w") as fh:
        for r in reports:
            for slide_id in r.missed_case_ids:
                fh.write(json.dumps({"site": r.site, "slide_id": slide_id}) + "\n")
