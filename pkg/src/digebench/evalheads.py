"""Embedding-quality heads: linear probing, few-shot episodes, prototypes.

These heads treat the embeddings as frozen: a regularized multinomial probe
measures linear separability, center-normalize-then-nearest-centroid episodes
measure few-shot behavior, and raw class-mean prototypes back nearest-
prototype classification and top-k retrieval.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .numerics import RngStream, lbfgs_minimize, log_sum_exp, stable_softmax

LAMBDA_VARIANTS = ("literal", "inverse")


def probe_lambda(n_features: int, n_classes: int, variant: str = "literal") -> float:
    """Probe regularization strength.

    The "literal" variant reads the strength formula left to right as
    (100 / n_features) * n_classes; "inverse" groups the product in the
    denominator, 100 / (n_features * n_classes).
    """
    if n_features < 1 or n_classes < 1:
        raise ValueError("n_features and n_classes must be >= 1")
    if variant == "literal":
        return (100.0 / n_features) * n_classes
    if variant == "inverse":
        return 100.0 / (n_features * n_classes)
    raise ValueError(f"unknown lambda variant {variant!r}; use one of {LAMBDA_VARIANTS}")


@dataclass
class LinearProbe:
    weights: np.ndarray  # (n_classes, n_features)
    bias: np.ndarray     # (n_classes,)
    lam: float
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("probe parameters must be finite")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


def probe_objective(params: np.ndarray, features: np.ndarray, labels: np.ndarray,
                    lam: float, n_classes: int) -> Tuple[float, np.ndarray]:
    """Mean multinomial cross-entropy + (lam/2)*||W||^2 (bias unregularized)."""
    n, m = features.shape
    w_size = n_classes * m
    W = params[:w_size].reshape(n_classes, m)
    b = params[w_size:]
    logits = features @ W.T + b
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    data_loss = float((lse - logits[np.arange(n), labels]).mean())
    loss = data_loss + 0.5 * lam * float((W * W).sum())

    probs = np.exp(logits - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    probs /= n
    grad_W = probs.T @ features + lam * W
    grad_b = probs.sum(axis=0)
    return loss, np.concatenate([grad_W.ravel(), grad_b])


def fit_linear_probe(train_features, train_labels, lam: float,
                     max_iterations: int = 1000) -> LinearProbe:
    """Fit the multinomial probe with the bounded-memory quasi-Newton solver."""
    X = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ValueError("features must be (n, m) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probe needs at least two classes present")
    if classes.min() < 0:
        raise ValueError("labels must be non-negative")
    n_classes = int(classes.max()) + 1
    m = X.shape[1]
    x0 = np.zeros(n_classes * m + n_classes)
    result = lbfgs_minimize(lambda p: probe_objective(p, X, y, lam, n_classes),
                            x0, max_iterations=max_iterations)
    W = result.x[:n_classes * m].reshape(n_classes, m)
    b = result.x[n_classes * m:]
    return LinearProbe(weights=W, bias=b, lam=lam,
                       converged=result.converged, iterations=result.iterations)


def probe_predict_proba(probe: LinearProbe, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    logits = X @ probe.weights.T + probe.bias
    return np.vstack([stable_softmax(row) for row in logits])


def probe_predict(probe: LinearProbe, features) -> np.ndarray:
    return np.argmax(probe_predict_proba(probe, features), axis=1)


# ---------------------------------------------------------------------------
# Few-shot episodes
# ---------------------------------------------------------------------------


Bank = Sequence[np.ndarray]  # bank[c] = (n_c, m) embeddings of class c


def bank_from_labels(features, labels) -> List[np.ndarray]:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    return [X[y == c] for c in range(int(y.max()) + 1)]


@dataclass
class EpisodeSpec:
    n_ways: int
    n_shots: int
    query_per_class: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n_ways < 2:
            raise ValueError("n_ways must be >= 2")
        if self.n_shots < 1 or self.query_per_class < 1:
            raise ValueError("n_shots and query_per_class must be >= 1")


@dataclass
class EpisodeResult:
    accuracy: float
    zero_centered: int = 0  # vectors that coincided with the support mean


def _check_bank(bank: Bank, spec: EpisodeSpec) -> List[np.ndarray]:
    arrays = [np.asarray(b, dtype=np.float64) for b in bank]
    if spec.n_ways > len(arrays):
        raise ValueError(f"{spec.n_ways} ways exceed {len(arrays)} bank classes")
    needed = spec.n_shots + spec.query_per_class
    too_small = [c for c, b in enumerate(arrays) if b.shape[0] < needed]
    if too_small:
        raise ValueError(
            f"classes {too_small} have fewer than {needed} samples "
            f"({spec.n_shots} shots + {spec.query_per_class} queries)")
    return arrays


def simpleshot_episode(bank: Bank, spec: EpisodeSpec,
                       rng: Optional[RngStream] = None) -> EpisodeResult:
    """One C-way K-shot episode with center-normalize nearest-centroid queries.

    Supports and queries are drawn disjointly per class. Every vector v is
    centered by the support mean and L2-normalized, v -> (v - mu)/||v - mu||;
    class centroids of the transformed supports classify transformed queries
    by Euclidean distance. A vector equal to mu cannot be normalized; such
    queries fall back to the nearest raw-support class mean and are counted.
    """
    arrays = _check_bank(bank, spec)
    if rng is None:
        rng = RngStream(spec.seed)
    class_pick = rng.choice_without_replacement(len(arrays), spec.n_ways)
    chosen = sorted(int(c) for c in class_pick)

    supports, queries = [], []
    for c in chosen:
        pool = arrays[c]
        idx = rng.permutation(pool.shape[0])
        supports.append(pool[idx[:spec.n_shots]])
        queries.append(pool[idx[spec.n_shots:spec.n_shots + spec.query_per_class]])

    support_stack = np.vstack(supports)
    mu = support_stack.mean(axis=0)

    zero_centered = 0

    def transform(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        centered = block - mu
        norms = np.linalg.norm(centered, axis=1)
        zero = norms == 0.0
        safe = np.where(zero, 1.0, norms)
        return centered / safe[:, None], zero

    prototypes = np.empty((spec.n_ways, support_stack.shape[1]))
    raw_means = np.empty_like(prototypes)
    for k, block in enumerate(supports):
        transformed, zero = transform(block)
        zero_centered += int(zero.sum())
        prototypes[k] = transformed.mean(axis=0)
        raw_means[k] = block.mean(axis=0)

    correct = 0
    total = 0
    for k, block in enumerate(queries):
        transformed, zero = transform(block)
        zero_centered += int(zero.sum())
        d_t = np.linalg.norm(transformed[:, None, :] - prototypes[None, :, :], axis=2)
        d_raw = np.linalg.norm(block[:, None, :] - raw_means[None, :, :], axis=2)
        assigned = np.where(zero, np.argmin(d_raw, axis=1), np.argmin(d_t, axis=1))
        correct += int((assigned == k).sum())
        total += block.shape[0]
    return EpisodeResult(accuracy=correct / total, zero_centered=zero_centered)


@dataclass
class ShotSummary:
    median: float
    q25: float
    q75: float
    min: float
    max: float
    episodes: int


def run_fewshot(bank: Bank, shots: Sequence[int], episodes: int = 1000,
                ways: Optional[int] = None, query_per_class: int = 15,
                seed: int = 0) -> Dict[int, ShotSummary]:
    """Accuracy distributions over seeded episodes for each shot count.

    Unsatisfiable shot counts (not enough samples per class) are skipped with
    a warning. Each episode runs on its own derived stream, so results do not
    depend on evaluation order.
    """
    arrays = [np.asarray(b, dtype=np.float64) for b in bank]
    if ways is None:
        ways = len(arrays)
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    root = RngStream(seed)
    results: Dict[int, ShotSummary] = {}
    min_class = min(b.shape[0] for b in arrays)
    for si, k in enumerate(shots):
        spec = EpisodeSpec(n_ways=ways, n_shots=k, query_per_class=query_per_class, seed=seed)
        if k + query_per_class > min_class:
            warnings.warn(
                f"skipping shot={k}: needs {k + query_per_class} samples per class, "
                f"smallest class has {min_class}")
            continue
        shot_root = root.substream(si)
        acc = np.array([
            simpleshot_episode(arrays, spec, rng=shot_root.substream(e)).accuracy
            for e in range(episodes)
        ])
        q25, med, q75 = np.percentile(acc, [25.0, 50.0, 75.0])
        results[k] = ShotSummary(median=float(med), q25=float(q25), q75=float(q75),
                                 min=float(acc.min()), max=float(acc.max()),
                                 episodes=episodes)
    return results


# ---------------------------------------------------------------------------
# Prototypes and retrieval
# ---------------------------------------------------------------------------


@dataclass
class PrototypeIndex:
    prototypes: np.ndarray  # (n_classes, m) raw class means
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ValueError("prototypes must be a (n_classes, m) matrix")
        if not self.class_names:
            self.class_names = [f"class_{c}" for c in range(self.prototypes.shape[0])]
        if len(self.class_names) != self.prototypes.shape[0]:
            raise ValueError("one class name per prototype required")


def build_prototypes(train_features, train_labels,
                     class_names: Optional[Sequence[str]] = None) -> PrototypeIndex:
    """Raw arithmetic class means of the training embeddings."""
    X = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be (n, m) with one label per row")
    n_classes = int(y.max()) + 1
    prototypes = np.empty((n_classes, X.shape[1]))
    for c in range(n_classes):
        members = X[y == c]
        if members.shape[0] == 0:
            raise ValueError(f"class {c} has no training embeddings")
        prototypes[c] = members.mean(axis=0)
    names = list(class_names) if class_names else []
    return PrototypeIndex(prototypes=prototypes, class_names=names)


def _cosine(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Cosine of query against matrix rows; pairs with a zero norm score 0."""
    qn = float(np.linalg.norm(query))
    norms = np.linalg.norm(matrix, axis=1)
    sims = np.zeros(matrix.shape[0])
    if qn == 0.0:
        return sims
    ok = norms > 0.0
    sims[ok] = (matrix[ok] @ query) / (norms[ok] * qn)
    return sims


def classify_by_prototype(query, index: PrototypeIndex) -> Tuple[int, np.ndarray]:
    """(argmax-cosine class, similarity vector); exact ties go to the lowest index."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.size != index.prototypes.shape[1]:
        raise ValueError(f"query dim {q.size} does not match prototypes "
                         f"{index.prototypes.shape[1]}")
    sims = _cosine(q, index.prototypes)
    return int(np.argmax(sims)), sims


def topk_nearest_to_prototype(class_index: int, index: PrototypeIndex,
                              candidate_features, candidate_ids: Optional[Sequence] = None,
                              k: int = 5) -> List[Tuple[Union[int, str], float]]:
    """Top-k candidates by descending cosine to one class prototype, ties by id."""
    X = np.asarray(candidate_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("candidates must be a non-empty (n, m) matrix")
    if not (0 <= class_index < index.prototypes.shape[0]):
        raise ValueError(f"class index {class_index} out of range")
    if candidate_ids is None:
        candidate_ids = list(range(X.shape[0]))
    if len(candidate_ids) != X.shape[0]:
        raise ValueError("one id per candidate required")
    if k > X.shape[0]:
        raise ValueError(f"k={k} exceeds {X.shape[0]} candidates")
    sims = _cosine(index.prototypes[class_index], X)
    ranked = sorted(range(X.shape[0]), key=lambda i: (-sims[i], candidate_ids[i]))
    return [(candidate_ids[i], float(sims[i])) for i in ranked[:k]]
