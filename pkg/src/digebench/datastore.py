"""Data model, file formats, cohort loading, folds, and synthetic cohorts.

Slides are bags of patch embeddings with optional labels, sites, folds, and
survival records. Feature payloads live in DGPF sidecar binaries (32-bit
floats on disk, upcast to 64-bit for all computation); cohort membership and
per-slide metadata live in a JSONL manifest, one slide per line.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import RngStream

DGPF_MAGIC = b"DGPF"
DGPF_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_RECORD_DTYPE = np.dtype([("x", "<i4"), ("y", "<i4"), ("level", "u1"), ("pad", "u1", (3,))])

TASK_KINDS = ("classification", "survival", "screening")


class FeatureFileError(ValueError):
    """DGPF payload is malformed (magic/version/length/shape)."""


class ManifestError(ValueError):
    """Manifest line violates the schema; message names the line."""


class UnsatisfiableDesignError(ValueError):
    """The requested experimental design cannot be satisfied by the data."""


class Magnification(IntEnum):
    X2_5 = 0
    X5 = 1
    X10 = 2
    X20 = 3

    @property
    def label(self) -> str:
        return {0: "2.5x", 1: "5x", 2: "10x", 3: "20x"}[int(self)]


@dataclass
class PatchEmbedding:
    """One patch: grid position, magnification level, and its feature vector."""

    x: int
    y: int
    level: Magnification
    features: np.ndarray  # float32, length = cohort dim

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"patch grid coordinates must be >= 0, got ({self.x}, {self.y})")
        self.level = Magnification(self.level)
        self.features = np.asarray(self.features, dtype=np.float32).ravel()
        if not np.all(np.isfinite(self.features)):
            raise ValueError("patch features must be finite")


@dataclass
class SurvivalRecord:
    time_days: float
    event: int  # 1 = event observed, 0 = censored

    def __post_init__(self):
        if not math.isfinite(self.time_days) or self.time_days <= 0:
            raise ValueError(f"survival time must be finite and > 0, got {self.time_days}")
        if self.event not in (0, 1):
            raise ValueError(f"event indicator must be 0 or 1, got {self.event}")


@dataclass
class SlideBag:
    """A slide's ordered patch set plus slide-level metadata."""

    slide_id: str
    patches: List[PatchEmbedding]
    label: Optional[int] = None
    site: str = "default"
    fold: Optional[int] = None
    survival: Optional[SurvivalRecord] = None
    roi_tumor_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.patches:
            raise ValueError(f"slide {self.slide_id!r}: patch list must be non-empty")
        dims = {p.features.size for p in self.patches}
        if len(dims) != 1:
            raise ValueError(f"slide {self.slide_id!r}: inconsistent feature dims {sorted(dims)}")
        keys = [(p.x, p.y, int(p.level)) for p in self.patches]
        if len(set(keys)) != len(keys):
            raise ValueError(f"slide {self.slide_id!r}: duplicate (x, y, level) patch positions")
        if self.roi_tumor_probs is not None:
            probs = np.asarray(self.roi_tumor_probs, dtype=np.float64).ravel()
            if probs.size != len(self.patches):
                raise ValueError(
                    f"slide {self.slide_id!r}: {probs.size} probabilities for "
                    f"{len(self.patches)} patches"
                )
            if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
                raise ValueError(f"slide {self.slide_id!r}: tumor probabilities must lie in [0,1]")
            self.roi_tumor_probs = probs

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def dim(self) -> int:
        return self.patches[0].features.size

    def feature_matrix(self) -> np.ndarray:
        """(n_patches, dim) float64 matrix; computation always upcasts."""
        return np.stack([p.features for p in self.patches]).astype(np.float64)


@dataclass
class Cohort:
    name: str
    dim: int
    class_names: List[str]
    slides: List[SlideBag]
    task_kind: str = "classification"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        seen = set()
        for slide in self.slides:
            if slide.slide_id in seen:
                raise ValueError(f"duplicate slide_id {slide.slide_id!r}")
            seen.add(slide.slide_id)
            if slide.dim != self.dim:
                raise ValueError(
                    f"slide {slide.slide_id!r} has dim {slide.dim}, cohort dim is {self.dim}"
                )
            if slide.label is not None and not (0 <= slide.label < len(self.class_names)):
                raise ValueError(
                    f"slide {slide.slide_id!r} label {slide.label} out of range "
                    f"for {len(self.class_names)} classes"
                )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labeled_slides(self) -> List[SlideBag]:
        return [s for s in self.slides if s.label is not None]


# ---------------------------------------------------------------------------
# DGPF feature files
# ---------------------------------------------------------------------------


def write_feature_file(slide: SlideBag, path) -> int:
    """Write the slide's patches as a DGPF binary; returns bytes written."""
    path = Path(path)
    n, dim = slide.n_patches, slide.dim
    records = np.zeros(n, dtype=_RECORD_DTYPE)
    records["x"] = [p.x for p in slide.patches]
    records["y"] = [p.y for p in slide.patches]
    records["level"] = [int(p.level) for p in slide.patches]
    features = np.stack([p.features for p in slide.patches]).astype("<f4")
    payload = (
        _HEADER.pack(DGPF_MAGIC, DGPF_VERSION, dim, n)
        + records.tobytes()
        + features.tobytes()
    )
    path.write_bytes(payload)
    return len(payload)


def read_feature_file(path) -> List[PatchEmbedding]:
    """Read and validate a DGPF file; returns the patch list."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated file (no complete header)")
    magic, version, dim, n = _HEADER.unpack_from(blob)
    if magic != DGPF_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != DGPF_VERSION:
        raise FeatureFileError(f"{path}: version mismatch (got {version}, expected {DGPF_VERSION})")
    if n == 0 or dim == 0:
        raise FeatureFileError(f"{path}: n_patches and dim must be positive (got n={n}, dim={dim})")
    expected = _HEADER.size + 12 * n + 4 * n * dim
    if len(blob) < expected:
        raise FeatureFileError(f"{path}: truncated file ({len(blob)} bytes, expected {expected})")
    if len(blob) > expected:
        raise FeatureFileError(f"{path}: trailing bytes ({len(blob)} bytes, expected {expected})")
    records = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=n, offset=_HEADER.size)
    features = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size + 12 * n).reshape(n, dim)
    return [
        PatchEmbedding(int(records["x"][i]), int(records["y"][i]),
                       Magnification(int(records["level"][i])), features[i].copy())
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Manifest JSONL
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {
    "slide_id", "feature_file", "label", "class_name", "site", "fold",
    "survival", "roi_tumor_probs_file",
}


def _parse_manifest_line(line: str, lineno: int, base: Path) -> SlideBag:
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(row, dict):
        raise ManifestError(f"line {lineno}: expected an object")
    unknown = set(row) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    for key in ("slide_id", "feature_file"):
        if not isinstance(row.get(key), str) or not row[key]:
            raise ManifestError(f"line {lineno}: {key!r} is required and must be a string")

    feature_path = base / row["feature_file"]
    if not feature_path.exists():
        raise ManifestError(f"line {lineno}: missing feature file {feature_path}")
    try:
        patches = read_feature_file(feature_path)
    except FeatureFileError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc

    label = row.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
        raise ManifestError(f"line {lineno}: label must be a non-negative integer or null")

    survival = None
    if "survival" in row and row["survival"] is not None:
        surv = row["survival"]
        if not isinstance(surv, dict) or set(surv) != {"time_days", "event"}:
            raise ManifestError(f"line {lineno}: survival must be {{time_days, event}}")
        try:
            survival = SurvivalRecord(float(surv["time_days"]), int(surv["event"]))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: {exc}") from exc

    probs = None
    if row.get("roi_tumor_probs_file"):
        probs_path = base / row["roi_tumor_probs_file"]
        if not probs_path.exists():
            raise ManifestError(f"line {lineno}: missing probabilities file {probs_path}")
        with probs_path.open() as fh:
            probs = [json.loads(p) for p in fh if p.strip()]

    fold = row.get("fold")
    if fold is not None and (not isinstance(fold, int) or isinstance(fold, bool) or fold < 0):
        raise ManifestError(f"line {lineno}: fold must be a non-negative integer or null")

    try:
        return SlideBag(
            slide_id=row["slide_id"],
            patches=patches,
            label=label,
            site=row.get("site", "default") or "default",
            fold=fold,
            survival=survival,
            roi_tumor_probs=probs,
        )
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def load_cohort(manifest_path, task_kind: Optional[str] = None) -> Cohort:
    """Load a cohort from a JSONL manifest, enforcing all invariants.

    When task_kind is None it is inferred: slides carrying survival records
    make a survival cohort, otherwise classification.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    slides: List[SlideBag] = []
    class_names: Dict[int, str] = {}
    seen_ids: Dict[str, int] = {}

    with manifest_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            slide = _parse_manifest_line(line, lineno, base)
            if slide.slide_id in seen_ids:
                raise ManifestError(
                    f"line {lineno}: duplicate slide_id {slide.slide_id!r} "
                    f"(first seen on line {seen_ids[slide.slide_id]})"
                )
            seen_ids[slide.slide_id] = lineno
            row = json.loads(line)
            if slide.label is not None and row.get("class_name"):
                existing = class_names.get(slide.label)
                if existing is not None and existing != row["class_name"]:
                    raise ManifestError(
                        f"line {lineno}: class_name {row['class_name']!r} conflicts with "
                        f"{existing!r} for label {slide.label}"
                    )
                class_names[slide.label] = row["class_name"]
            slides.append(slide)

    if not slides:
        raise ManifestError("manifest contains no slides")
    dims = {s.dim for s in slides}
    if len(dims) != 1:
        raise ManifestError(f"inconsistent feature dims across slides: {sorted(dims)}")
    labels = [s.label for s in slides if s.label is not None]
    n_classes = (max(labels) + 1) if labels else 0
    names = [class_names.get(i, f"class_{i}") for i in range(n_classes)]
    if task_kind is None:
        task_kind = "survival" if any(s.survival is not None for s in slides) else "classification"
    return Cohort(
        name=manifest_path.stem,
        dim=dims.pop(),
        class_names=names,
        slides=slides,
        task_kind=task_kind,
    )


def write_manifest(cohort: Cohort, out_dir, feature_subdir: str = "features") -> Path:
    """Write the cohort as manifest.jsonl plus DGPF (and probability) sidecars."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / feature_subdir
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with manifest_path.open("w") as fh:
        for slide in cohort.slides:
            feature_file = f"{feature_subdir}/{slide.slide_id}.dgpf"
            write_feature_file(slide, out_dir / feature_file)
            row = {"slide_id": slide.slide_id, "feature_file": feature_file}
            if slide.label is not None:
                row["label"] = slide.label
                row["class_name"] = cohort.class_names[slide.label]
            if slide.site != "default":
                row["site"] = slide.site
            if slide.fold is not None:
                row["fold"] = slide.fold
            if slide.survival is not None:
                row["survival"] = {
                    "time_days": slide.survival.time_days,
                    "event": slide.survival.event,
                }
            if slide.roi_tumor_probs is not None:
                probs_file = f"{feature_subdir}/{slide.slide_id}.probs.jsonl"
                with (out_dir / probs_file).open("w") as pf:
                    for p in slide.roi_tumor_probs:
                        pf.write(json.dumps(float(p)) + "\n")
                row["roi_tumor_probs_file"] = probs_file
            fh.write(json.dumps(row) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------


def assign_folds(cohort: Cohort, k: int, seed: int) -> Cohort:
    """Stratified fold assignment: per-class counts across folds differ by <= 1.

    Deterministic given the seed. Folds are written onto the slides in place
    and the cohort is returned.
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    unlabeled = [s.slide_id for s in cohort.slides if s.label is None]
    if unlabeled:
        raise ValueError(f"cannot assign folds: unlabeled slides {unlabeled[:3]}")
    by_class: Dict[int, List[int]] = {}
    for idx, slide in enumerate(cohort.slides):
        by_class.setdefault(slide.label, []).append(idx)
    for label, indices in sorted(by_class.items()):
        if len(indices) < k:
            raise UnsatisfiableDesignError(
                f"class {label} has {len(indices)} slides, fewer than {k} folds"
            )
        stream = RngStream(seed, stream_id=label + 1)
        order = stream.permutation(len(indices))
        for pos, j in enumerate(order):
            cohort.slides[indices[j]].fold = pos % k
    return cohort


def fold_split(cohort: Cohort, fold: int, k: Optional[int] = None) -> Tuple[List[SlideBag], List[SlideBag], List[SlideBag]]:
    """(train, val, test) slide lists for one fold.

    Fold `fold` is the held-out test set, fold (fold+1) mod k the validation
    set, and the remaining folds train.
    """
    folds = sorted({s.fold for s in cohort.slides if s.fold is not None})
    if not folds:
        raise ValueError("cohort has no fold assignment; run assign_folds first")
    if k is None:
        k = len(folds)
    if not (0 <= fold < k):
        raise ValueError(f"fold {fold} out of range for {k} folds")
    val_fold = (fold + 1) % k
    test = [s for s in cohort.slides if s.fold == fold]
    val = [s for s in cohort.slides if s.fold == val_fold]
    train = [s for s in cohort.slides if s.fold is not None and s.fold not in (fold, val_fold)]
    return train, val, test


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of the synthetic patch-embedding cohort generator."""

    n_slides: int
    patches_per_slide: Tuple[int, int]
    dim: int
    n_classes: int
    class_mean_separation: float
    signal_fraction: float
    censoring_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.patches_per_slide
        if not (1 <= lo <= hi):
            raise ValueError(f"invalid patches_per_slide range ({lo}, {hi})")
        if self.n_slides < 1 or self.dim < 1 or self.n_classes < 1:
            raise ValueError("n_slides, dim and n_classes must be positive")
        if not (0.0 < self.signal_fraction <= 1.0):
            raise ValueError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if self.class_mean_separation < 0:
            raise ValueError(f"class separation must be >= 0, got {self.class_mean_separation}")
        if self.class_mean_separation > 0 and self.dim < self.n_classes:
            raise ValueError("dim must be >= n_classes to place equidistant class means")
        if not (0.0 <= self.censoring_rate < 1.0):
            raise ValueError(f"censoring_rate must lie in [0, 1), got {self.censoring_rate}")


@dataclass
class SynthTruth:
    """Generator-side ground truth, for oracle tests only."""

    signal_indices: Dict[str, np.ndarray] = field(default_factory=dict)
    true_risk: Dict[str, float] = field(default_factory=dict)


def _class_means(spec: SynthSpec) -> np.ndarray:
    # Scaled standard basis vectors: every pair of class means sits exactly
    # class_mean_separation apart (distance between s*e_i and s*e_j is s*sqrt(2)).
    means = np.zeros((spec.n_classes, spec.dim))
    if spec.class_mean_separation > 0:
        s = spec.class_mean_separation / math.sqrt(2.0)
        for c in range(spec.n_classes):
            means[c, c] = s
    return means


def synth_cohort_with_truth(
    spec: SynthSpec,
    task_kind: str = "classification",
    n_sites: int = 1,
    name: str = "synthetic",
) -> Tuple[Cohort, SynthTruth]:
    """Generate a cohort plus its ground truth (signal patches, true risk).

    Class-c bags mix signal_fraction patches from class c's Gaussian with
    background (class 0) patches; class-0 bags are background only. Survival
    cohorts attach exponential event times whose log-rate is a fixed linear
    function of the slide's mean feature vector (standardized across the
    cohort), with uniform censoring; slide labels then carry the event
    indicator so folds can stratify on it.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    means = _class_means(spec)
    root = RngStream(spec.seed)
    lo, hi = spec.patches_per_slide
    truth = SynthTruth()
    slides: List[SlideBag] = []
    gen_classes: List[int] = []

    for i in range(spec.n_slides):
        stream = root.substream(i)
        cls = i % spec.n_classes
        gen_classes.append(cls)
        n = int(stream.integers(lo, hi + 1))
        feats = stream.normal((n, spec.dim)) + means[0]
        if cls > 0:
            n_signal = max(1, int(round(spec.signal_fraction * n)))
            signal_idx = np.sort(stream.choice_without_replacement(n, n_signal))
            feats[signal_idx] = stream.normal((n_signal, spec.dim)) + means[cls]
        else:
            signal_idx = np.array([], dtype=np.int64)
        width = max(1, math.ceil(math.sqrt(n)))
        patches = [
            PatchEmbedding(j % width, j // width, Magnification.X20, feats[j].astype(np.float32))
            for j in range(n)
        ]
        # Simulated patch classifier output: signal patches score in [0.65, 1),
        # background in [0, 0.35), so a 0.5 threshold recovers the truth.
        # Drawn after the feature draws so adding it never shifts them.
        u = stream.uniform(n)
        probs = 0.35 * u
        probs[signal_idx] = 0.65 + 0.35 * u[signal_idx]
        slide_id = f"slide_{i:05d}"
        truth.signal_indices[slide_id] = signal_idx
        slides.append(SlideBag(
            slide_id=slide_id,
            patches=patches,
            label=cls,
            site=f"site_{i % n_sites}" if n_sites > 1 else "default",
            roi_tumor_probs=probs,
        ))

    if task_kind == "survival":
        _attach_survival(spec, root, slides, truth)
        class_names = ["censored", "event"]
    else:
        class_names = [f"class_{c}" for c in range(spec.n_classes)]

    cohort = Cohort(name=name, dim=spec.dim, class_names=class_names,
                    slides=slides, task_kind=task_kind)
    return cohort, truth


def _attach_survival(spec: SynthSpec, root: RngStream, slides: List[SlideBag],
                     truth: SynthTruth) -> None:
    surv_stream = root.substream(2**32)
    beta = surv_stream.normal(spec.dim)
    beta /= np.linalg.norm(beta)
    raw = np.array([float(beta @ s.feature_matrix().mean(axis=0)) for s in slides])
    sd = raw.std()
    risk = (raw - raw.mean()) / (sd if sd > 0 else 1.0)
    # Log-hazard spread of 4 per risk SD keeps the true ordering recoverable
    # (concordance of the true risk stays near 0.9 despite exponential noise).
    for idx, (slide, z) in enumerate(zip(slides, risk)):
        stream = surv_stream.substream(idx)
        u_t = float(stream.uniform())
        time = -math.log(max(u_t, 1e-300)) / math.exp(4.0 * z) * 365.0
        event = 1
        if spec.censoring_rate > 0 and float(stream.uniform()) < spec.censoring_rate:
            event = 0
            time *= max(float(stream.uniform()), 1e-12)
        slide.survival = SurvivalRecord(max(time, 1e-9), event)
        slide.label = event
        truth.true_risk[slide.slide_id] = float(z)


def synth_cohort(spec: SynthSpec, task_kind: str = "classification",
                 n_sites: int = 1, name: str = "synthetic") -> Cohort:
    """Generate a synthetic cohort; fully determined by spec.seed."""
    cohort, _ = synth_cohort_with_truth(spec, task_kind=task_kind, n_sites=n_sites, name=name)
    return cohort
