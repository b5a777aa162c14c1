"""Confidence-weighted ROI refinement with global class balancing.

Given per-patch tumor probabilities, each slide contributes a budgeted
selection: tumor-bearing slides contribute their highest-confidence tumor
patches plus a few non-tumor patches, negative slides contribute a small
Poisson-sized random sample. Pooled selections are then downsampled on the
majority class to a 1:1 ratio within a tolerance band.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datastore import SlideBag
from .numerics import RngStream, poisson_sample

TUMOR = "tumor"
NON_TUMOR = "non-tumor"


def _exact_fraction(p: float) -> Fraction:
    # Budgets are defined on decimal probabilities; recover the intended
    # rational so ceil(12*0.35/0.7) is 6, not 7 from float residue.
    return Fraction(p).limit_denominator(10**9)


def _check_probability(p: float) -> None:
    if not (isinstance(p, (int, float)) and math.isfinite(p) and 0.0 <= p <= 1.0):
        raise ValueError(f"probability must lie in [0, 1], got {p}")


def tumor_budget(p_tumor: float) -> int:
    """Tumor-patch budget for a slide with top confidence p_tumor: ceil(12*p/0.7)."""
    _check_probability(p_tumor)
    value = 12 * _exact_fraction(p_tumor) / Fraction(7, 10)
    return int(math.ceil(value))


def nontumor_budget(p_tumor: float) -> int:
    """Non-tumor-patch budget for the same slide: ceil(4*(1 - p))."""
    _check_probability(p_tumor)
    value = 4 * (1 - _exact_fraction(p_tumor))
    return int(math.ceil(value))


def negative_slide_budget(rng: RngStream) -> int:
    """Patch budget for slides without a predicted-tumor patch: one Poisson(8) draw."""
    return poisson_sample(8.0, rng)


def select_rois(slide: SlideBag, threshold: float = 0.5,
                rng: Optional[RngStream] = None) -> List[Tuple[int, str]]:
    """Select (patch index, predicted class) pairs from one slide.

    A patch is predicted tumor iff its probability >= threshold. Slides with
    at least one predicted-tumor patch contribute their budgeted top-confidence
    tumor patches (ties broken by (y, x, level)) plus uniformly drawn non-tumor
    patches; slides without any contribute a Poisson(8)-sized uniform sample
    tagged non-tumor. Budgets are always capped at availability.
    """
    if slide.roi_tumor_probs is None:
        raise ValueError(f"slide {slide.slide_id!r} has no roi_tumor_probs")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if rng is None:
        rng = RngStream(0)
    probs = slide.roi_tumor_probs
    n = len(probs)
    tumor_idx = [i for i in range(n) if probs[i] >= threshold]
    if not tumor_idx:
        n_take = min(negative_slide_budget(rng), n)
        taken = sorted(int(j) for j in rng.choice_without_replacement(n, n_take))
        return [(j, NON_TUMOR) for j in taken]

    p_slide = float(np.max(probs))
    n1 = tumor_budget(p_slide)
    n2 = nontumor_budget(p_slide)
    order = sorted(
        tumor_idx,
        key=lambda i: (-probs[i], slide.patches[i].y, slide.patches[i].x,
                       int(slide.patches[i].level)),
    )
    selected = [(i, TUMOR) for i in order[:min(n1, len(order))]]
    nontumor_idx = [i for i in range(n) if probs[i] < threshold]
    n_take = min(n2, len(nontumor_idx))
    if n_take > 0:
        picks = rng.choice_without_replacement(len(nontumor_idx), n_take)
        selected.extend((nontumor_idx[int(j)], NON_TUMOR) for j in sorted(int(j) for j in picks))
    return selected


@dataclass
class RoiEntry:
    slide_id: str
    patch_index: int
    predicted_class: str
    p: float


@dataclass
class RefinedDataset:
    """Pooled, balance-enforced ROI selection across a slide collection."""

    entries: List[RoiEntry]
    tumor_count: int
    nontumor_count: int
    balanced: bool
    warning: Optional[str] = None

    @property
    def imbalance(self) -> Optional[float]:
        """|tumor - nontumor| / max(tumor, nontumor); None when a class is empty."""
        hi = max(self.tumor_count, self.nontumor_count)
        if hi == 0 or min(self.tumor_count, self.nontumor_count) == 0:
            return None
        return abs(self.tumor_count - self.nontumor_count) / hi


def build_balanced_dataset(slides: Sequence[SlideBag], threshold: float = 0.5,
                           target_ratio_tolerance: float = 0.02,
                           seed: int = 0) -> RefinedDataset:
    """Run select_rois over every slide, pool, and balance by downsampling.

    The majority class is uniformly downsampled to floor(minority/(1 - tol)),
    the largest count still inside the tolerance band. If either class comes
    back empty the pool is returned unbalanced with a warning set.
    """
    if not (0.0 <= target_ratio_tolerance < 1.0):
        raise ValueError(f"tolerance must lie in [0, 1), got {target_ratio_tolerance}")
    root = RngStream(seed)
    entries: List[RoiEntry] = []
    for i, slide in enumerate(slides):
        stream = root.substream(i)
        for patch_index, cls in select_rois(slide, threshold=threshold, rng=stream):
            entries.append(RoiEntry(slide.slide_id, patch_index, cls,
                                    float(slide.roi_tumor_probs[patch_index])))

    tumor = sum(1 for e in entries if e.predicted_class == TUMOR)
    nontumor = len(entries) - tumor
    if tumor == 0 or nontumor == 0:
        empty = TUMOR if tumor == 0 else NON_TUMOR
        return RefinedDataset(entries, tumor, nontumor, balanced=False,
                              warning=f"no {empty} patches selected; ratio undefined")

    majority = TUMOR if tumor > nontumor else NON_TUMOR
    hi, lo = max(tumor, nontumor), min(tumor, nontumor)
    if (hi - lo) / hi > target_ratio_tolerance:
        target = int(math.floor(lo / (1.0 - target_ratio_tolerance)))
        majority_positions = [i for i, e in enumerate(entries) if e.predicted_class == majority]
        keep_stream = root.substream(2**32)
        picks = keep_stream.choice_without_replacement(len(majority_positions), target)
        keep = set(majority_positions[int(j)] for j in picks)
        entries = [e for i, e in enumerate(entries)
                   if e.predicted_class != majority or i in keep]
        tumor = sum(1 for e in entries if e.predicted_class == TUMOR)
        nontumor = len(entries) - tumor
    return RefinedDataset(entries, tumor, nontumor, balanced=True)


def write_refined_dataset(dataset: RefinedDataset, jsonl_path, summary_path=None) -> None:
    """Write entries as JSONL plus a counts/ratio summary JSON."""
    jsonl_path = Path(jsonl_path)
    with jsonl_path.open("w") as fh:
        for e in dataset.entries:
            fh.write(json.dumps({
                "slide_id": e.slide_id,
                "patch_index": e.patch_index,
                "predicted_class": e.predicted_class,
                "p": e.p,
            }) + "\n")
    if summary_path is not None:
        summary = {
            "tumor_count": dataset.tumor_count,
            "nontumor_count": dataset.nontumor_count,
            "balanced": dataset.balanced,
            "imbalance": dataset.imbalance,
            "warning": dataset.warning,
        }
        Path(summary_path).write_text(json.dumps(summary, indent=2) + "\n")
