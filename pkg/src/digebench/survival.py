"""Censoring-aware survival modeling on patch bags.

The training loss is the negative mean log partial likelihood over event
samples, with the literal risk-set rule T_j >= T_i (ties stay in the risk
set). The risk model reuses the gated attention pooling of the bag classifier
and maps the bag embedding to a scalar risk through a linear head. Analysis
utilities cover concordance, product-limit curves, the two-group log-rank
test, median-risk stratification, and Welch's t-test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datastore import Cohort, SlideBag, SurvivalRecord, fold_split
from .metrics import UndefinedMetricError
from .mil import _attention_forward, _bag_embedding
from .numerics import (AdamState, NonFiniteError, RngStream, adam_step, chi_square_sf,
                       row_log_sum_exp, student_t_two_sided_p)


def _records_arrays(records: Sequence[SurvivalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time_days for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.float64)
    return times, events


def _check_theta(theta, records) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.size != len(records):
        raise ValueError(f"{theta.size} scores for {len(records)} records")
    if theta.size == 0:
        raise ValueError("need at least one record")
    if not np.all(np.isfinite(theta)):
        raise ValueError("risk scores must be finite")
    return theta


def cox_loss(theta, records: Sequence[SurvivalRecord]) -> float:
    """Negative mean log partial likelihood.

    -(1/N) sum_i E_i * (theta_i - log sum_{j: T_j >= T_i} exp(theta_j)),
    evaluated through log-sum-exp over each row's risk set.
    """
    theta = _check_theta(theta, records)
    times, events = _records_arrays(records)
    n = theta.size
    risk_sets = times[None, :] >= times[:, None]
    lse = row_log_sum_exp(np.broadcast_to(theta, (n, n)), risk_sets)
    return float(-(events @ (theta - lse)) / n)


def cox_loss_grad(theta, records: Sequence[SurvivalRecord]) -> np.ndarray:
    """Analytic gradient of cox_loss with respect to theta.

    d/d theta_k = -(1/N) * (E_k - sum_i E_i * softmax over risk set i at k).
    """
    theta = _check_theta(theta, records)
    times, events = _records_arrays(records)
    n = theta.size
    risk_sets = times[None, :] >= times[:, None]
    lse = row_log_sum_exp(np.broadcast_to(theta, (n, n)), risk_sets)
    weights = np.exp(theta[None, :] - lse[:, None]) * risk_sets
    return -(events - events @ weights) / n


def c_index(theta, records: Sequence[SurvivalRecord]) -> float:
    """Concordance over comparable pairs (T_i < T_j with E_i = 1); score ties count 0.5."""
    theta = _check_theta(theta, records)
    times, events = _records_arrays(records)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1.0)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("c-index undefined: no comparable pairs")
    concordant = int((comparable & (theta[:, None] > theta[None, :])).sum())
    tied = int((comparable & (theta[:, None] == theta[None, :])).sum())
    return (concordant + 0.5 * tied) / n_pairs


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank
# ---------------------------------------------------------------------------


@dataclass
class KmCurve:
    """Product-limit estimate: survival value after each distinct event time."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    n_total: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.survival = np.asarray(self.survival, dtype=np.float64)
        self.at_risk = np.asarray(self.at_risk, dtype=np.int64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if np.any(np.diff(self.survival) > 0):
            raise ValueError("survival values must be non-increasing")
        if self.survival.size and (self.survival[0] > 1.0 or self.survival.min() < 0.0):
            raise ValueError("survival values must lie in [0, 1]")


def km_curve(records: Sequence[SurvivalRecord]) -> KmCurve:
    """Kaplan-Meier estimator; censored subjects leave the risk set after their time."""
    if not records:
        raise ValueError("need at least one record")
    times, events = _records_arrays(records)
    event_times = np.unique(times[events == 1.0])
    survival = []
    at_risk = []
    s = 1.0
    for t in event_times:
        n_i = int((times >= t).sum())
        d_i = int(((times == t) & (events == 1.0)).sum())
        s *= 1.0 - d_i / n_i
        survival.append(s)
        at_risk.append(n_i)
    return KmCurve(times=event_times, survival=np.array(survival),
                   at_risk=np.array(at_risk, dtype=np.int64), n_total=len(records))


def write_km_csv(curve: KmCurve, path) -> None:
    lines = ["time,survival,at_risk"]
    lines += [f"{t:.10g},{s:.10g},{n}" for t, s, n in
              zip(curve.times, curve.survival, curve.at_risk)]
    Path(path).write_text("\n".join(lines) + "\n")


def logrank_test(group_a: Sequence[SurvivalRecord],
                 group_b: Sequence[SurvivalRecord]) -> Tuple[float, float]:
    """Two-group log-rank test with hypergeometric variance at each event time."""
    if not group_a or not group_b:
        raise ValueError("both groups must be non-empty")
    t_a, e_a = _records_arrays(group_a)
    t_b, e_b = _records_arrays(group_b)
    all_times = np.concatenate([t_a, t_b])
    all_events = np.concatenate([e_a, e_b])
    if not np.any(all_events == 1.0):
        raise ValueError("log-rank test needs at least one event")
    event_times = np.unique(all_times[all_events == 1.0])
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n_a = int((t_a >= t).sum())
        n_b = int((t_b >= t).sum())
        n = n_a + n_b
        d_a = int(((t_a == t) & (e_a == 1.0)).sum())
        d_b = int(((t_b == t) & (e_b == 1.0)).sum())
        d = d_a + d_b
        if n == 0 or d == 0:
            continue
        expected_a = d * n_a / n
        observed_minus_expected += d_a - expected_a
        if n > 1:
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return 0.0, 1.0
    chi2 = observed_minus_expected ** 2 / variance
    return float(chi2), float(chi_square_sf(chi2, 1))


class DegenerateSplitError(ValueError):
    """All risk scores identical; a median split cannot separate groups."""


def stratify_by_median_risk(theta, records: Sequence[SurvivalRecord]
                            ) -> Tuple[np.ndarray, np.ndarray]:
    """(low indices, high indices): theta > median goes high, <= median goes low.

    The median is the lower-middle order statistic for even counts, so both
    groups are always non-empty on non-degenerate input.
    """
    theta = _check_theta(theta, records)
    if theta.size < 2:
        raise ValueError("need at least two samples to stratify")
    if np.all(theta == theta[0]):
        raise DegenerateSplitError("all risk scores identical; split is degenerate")
    median = float(np.sort(theta)[(theta.size - 1) // 2])
    high = np.flatnonzero(theta > median)
    low = np.flatnonzero(theta <= median)
    return low, high


def welch_t_test(sample_a, sample_b) -> Tuple[float, float, float]:
    """Welch's unequal-variance t-test: (t, degrees of freedom, two-sided p)."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if var_a == 0.0 and var_b == 0.0:
        raise ValueError("degenerate samples: both variances are zero")
    sa = var_a / a.size
    sb = var_b / b.size
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    return t, df, student_t_two_sided_p(t, df)


# ---------------------------------------------------------------------------
# Risk model
# ---------------------------------------------------------------------------


@dataclass
class RiskModel:
    """Gated attention pooling plus a linear risk head mapping bags to theta."""

    dim_in: int
    attn_dim: int
    V: np.ndarray         # (attn_dim, dim_in)
    U: np.ndarray         # (attn_dim, dim_in)
    w: np.ndarray         # (attn_dim,)
    risk_head: np.ndarray  # (dim_in,)
    risk_bias: float = 0.0

    def __post_init__(self):
        m, d = self.dim_in, self.attn_dim
        shapes = {"V": (d, m), "U": (d, m), "w": (d,), "risk_head": (m,)}
        for name, expected in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        if not math.isfinite(self.risk_bias):
            raise ValueError("risk_bias must be finite")

    def copy(self) -> "RiskModel":
        return RiskModel(self.dim_in, self.attn_dim, self.V.copy(), self.U.copy(),
                         self.w.copy(), self.risk_head.copy(), self.risk_bias)


@dataclass
class RiskTrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 100
    early_stop_patience: int = 5
    seed: int = 0
    attn_dim: int = 64
    weight_init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning_rate must be > 0 and epochs >= 1")
        if self.early_stop_patience < 1 or self.attn_dim < 1:
            raise ValueError("patience and attn_dim must be >= 1")


def init_risk_model(dim_in: int, config: RiskTrainConfig) -> RiskModel:
    s = config.weight_init_scale / np.sqrt(dim_in)
    stream = RngStream(config.seed, stream_id=0x51C6)
    d = config.attn_dim
    draw = lambda *shape: (stream.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * s
    return RiskModel(dim_in=dim_in, attn_dim=d,
                     V=draw(d, dim_in), U=draw(d, dim_in), w=draw(d).ravel(),
                     risk_head=draw(dim_in).ravel(), risk_bias=0.0)


def predict_risk(slides: Sequence[SlideBag], model: RiskModel) -> np.ndarray:
    """Per-slide risk scores theta."""
    theta = np.empty(len(slides))
    for i, slide in enumerate(slides):
        H = slide.feature_matrix()
        a = _attention_forward(H, model)[3]
        z = _bag_embedding(H, a)
        theta[i] = float(model.risk_head @ z) + model.risk_bias
    return theta


_RISK_PARAMS = ("V", "U", "w", "risk_head", "risk_bias")


@dataclass
class RiskTrainLog:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_c_index: float = -np.inf
    stopped_early: bool = False


def train_risk_on_splits(train_slides: Sequence[SlideBag], val_slides: Sequence[SlideBag],
                         config: RiskTrainConfig) -> Tuple[RiskModel, RiskTrainLog]:
    """Full-batch Adam on the partial-likelihood loss, early stop on val concordance."""
    if not train_slides or not val_slides:
        raise ValueError("train and validation splits must be non-empty")
    missing = [s.slide_id for s in list(train_slides) + list(val_slides) if s.survival is None]
    if missing:
        raise ValueError(f"slides without survival records: {missing[:3]}")
    train_records = [s.survival for s in train_slides]
    val_records = [s.survival for s in val_slides]
    if not any(r.event == 1 for r in train_records):
        raise ValueError("training split has no events")

    model = init_risk_model(train_slides[0].dim, config)
    states = {
        name: AdamState.zeros_like(np.asarray(getattr(model, name), dtype=np.float64))
        for name in _RISK_PARAMS
    }
    matrices = [s.feature_matrix() for s in train_slides]

    log = RiskTrainLog()
    best = model.copy()
    since_improve = 0
    for epoch in range(config.epochs):
        # Forward every training bag, caching attention intermediates.
        cache = []
        theta = np.empty(len(matrices))
        for i, H in enumerate(matrices):
            T, S, G, a = _attention_forward(H, model)
            z = _bag_embedding(H, a)
            cache.append((H, T, S, G, a, z))
            theta[i] = float(model.risk_head @ z) + model.risk_bias
        loss = cox_loss(theta, train_records)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
        dtheta = cox_loss_grad(theta, train_records)

        grads = {name: np.zeros_like(np.asarray(getattr(model, name), dtype=np.float64))
                 for name in _RISK_PARAMS}
        for (H, T, S, G, a, z), dt in zip(cache, dtheta):
            grads["risk_head"] += dt * z
            grads["risk_bias"] += np.asarray(dt)
            dz = dt * model.risk_head
            da = H @ dz
            de = a * (da - float(a @ da))
            grads["w"] += G.T @ de
            dG = np.outer(de, model.w)
            grads["V"] += (dG * S * (1.0 - T * T)).T @ H
            grads["U"] += (dG * T * S * (1.0 - S)).T @ H

        for name in _RISK_PARAMS:
            current = np.asarray(getattr(model, name), dtype=np.float64)
            new_param, states[name] = adam_step(current, grads[name], states[name],
                                                lr=config.learning_rate)
            setattr(model, name, float(new_param) if name == "risk_bias" else new_param)

        val_theta = predict_risk(val_slides, model)
        try:
            val_ci = c_index(val_theta, val_records)
        except UndefinedMetricError:
            raise ValueError("validation split has no comparable pairs")
        log.epochs.append({"epoch": epoch, "train_loss": loss, "val_c_index": val_ci})
        if val_ci > log.best_val_c_index:
            log.best_val_c_index = val_ci
            log.best_epoch = epoch
            best = model.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.early_stop_patience:
                log.stopped_early = True
                break
    return best, log


def train_risk_model(cohort: Cohort, fold: int,
                     config: RiskTrainConfig) -> Tuple[RiskModel, RiskTrainLog]:
    """Train on the cohort's fold split (test fold excluded, next fold validates)."""
    if cohort.task_kind != "survival":
        raise ValueError(f"expected a survival cohort, got {cohort.task_kind!r}")
    train, val, _ = fold_split(cohort, fold)
    return train_risk_on_splits(train, val, config)
