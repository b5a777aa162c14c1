"""Gated attention pooling over patch bags with a linear slide classifier.

Per-patch scores come from a tanh branch gated elementwise by a sigmoid
branch; softmax over patches yields attention weights, the attention-weighted
patch sum is the bag embedding, and a linear head maps it to class logits.
Training is plain Adam on mean cross-entropy with analytic gradients and
early stopping on validation balanced accuracy.
"""

from __future__ import annotations

import copy
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datastore import Cohort, SlideBag, fold_split
from .metrics import ConfusionMatrix, balanced_accuracy
from .numerics import AdamState, NonFiniteError, RngStream, adam_step, log_sum_exp, stable_softmax

DGMM_MAGIC = b"DGMM"
DGMM_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIII")


class ModelFileError(ValueError):
    """DGMM payload is malformed (magic/version/length)."""


@dataclass
class MilModel:
    """Parameters of the gated-attention bag classifier."""

    dim_in: int
    attn_dim: int
    n_classes: int
    V: np.ndarray      # (attn_dim, dim_in), tanh branch
    U: np.ndarray      # (attn_dim, dim_in), sigmoid gate branch
    w: np.ndarray      # (attn_dim,), attention score vector
    W_cls: np.ndarray  # (n_classes, dim_in), classifier head
    b_cls: np.ndarray  # (n_classes,)

    def __post_init__(self):
        m, d, c = self.dim_in, self.attn_dim, self.n_classes
        shapes = {"V": (d, m), "U": (d, m), "w": (d,), "W_cls": (c, m), "b_cls": (c,)}
        for name, expected in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def copy(self) -> "MilModel":
        return MilModel(self.dim_in, self.attn_dim, self.n_classes,
                        self.V.copy(), self.U.copy(), self.w.copy(),
                        self.W_cls.copy(), self.b_cls.copy())


@dataclass
class MilTrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    early_stop_patience: int = 5
    batch_slides: int = 1
    seed: int = 0
    attn_dim: int = 128
    weight_init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 1 or self.batch_slides < 1 or self.attn_dim < 1:
            raise ValueError("patience, batch_slides and attn_dim must be >= 1")


def init_model(dim_in: int, n_classes: int, config: MilTrainConfig) -> MilModel:
    """Seeded uniform[-s, s] initialization with s = weight_init_scale/sqrt(dim_in)."""
    s = config.weight_init_scale / np.sqrt(dim_in)
    stream = RngStream(config.seed, stream_id=0xD16E)
    d = config.attn_dim
    draw = lambda *shape: (stream.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * s
    return MilModel(
        dim_in=dim_in, attn_dim=d, n_classes=n_classes,
        V=draw(d, dim_in), U=draw(d, dim_in), w=draw(d).ravel(),
        W_cls=draw(n_classes, dim_in), b_cls=np.zeros(n_classes),
    )


def _bag_matrix(bag, dim_in: int) -> np.ndarray:
    if isinstance(bag, SlideBag):
        H = bag.feature_matrix()
    else:
        H = np.asarray(bag, dtype=np.float64)
        if H.ndim == 1:
            H = H[None, :]
    if H.size == 0:
        raise ValueError("bag must be non-empty")
    if H.ndim != 2 or H.shape[1] != dim_in:
        raise ValueError(f"bag features have shape {H.shape}, expected (n, {dim_in})")
    return H


def _sorted_sum(values: np.ndarray) -> np.ndarray:
    # Reductions over patches are done in sorted-value order so the result is
    # bitwise invariant under any permutation of the bag.
    return np.sort(values, axis=0).sum(axis=0)


def _attention_forward(H: np.ndarray, model: MilModel):
    T = np.tanh(H @ model.V.T)
    S = 1.0 / (1.0 + np.exp(-(H @ model.U.T)))
    G = T * S
    scores = G @ model.w
    shifted = np.exp(scores - scores.max())
    a = shifted / _sorted_sum(shifted)
    return T, S, G, a


def _bag_embedding(H: np.ndarray, a: np.ndarray) -> np.ndarray:
    return _sorted_sum(a[:, None] * H)


def attention_weights(bag, model: MilModel) -> np.ndarray:
    """Per-patch attention: softmax_k of w^T (tanh(V h_k) * sigmoid(U h_k))."""
    H = _bag_matrix(bag, model.dim_in)
    return _attention_forward(H, model)[3]


def bag_forward(bag, model: MilModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(logits, attention, bag_embedding) for one bag."""
    H = _bag_matrix(bag, model.dim_in)
    a = _attention_forward(H, model)[3]
    z = _bag_embedding(H, a)
    logits = model.W_cls @ z + model.b_cls
    return logits, a, z


def bag_loss_and_grads(model: MilModel, H: np.ndarray, label: int
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Cross-entropy of one bag and its analytic parameter gradients."""
    T, S, G, a = _attention_forward(H, model)
    z = _bag_embedding(H, a)
    logits = model.W_cls @ z + model.b_cls
    loss = float(log_sum_exp(logits) - logits[label])
    p = stable_softmax(logits)
    dlogits = p.copy()
    dlogits[label] -= 1.0

    dW_cls = np.outer(dlogits, z)
    db_cls = dlogits
    dz = model.W_cls.T @ dlogits
    da = H @ dz
    de = a * (da - float(a @ da))
    dw = G.T @ de
    dG = np.outer(de, model.w)
    dV = (dG * S * (1.0 - T * T)).T @ H
    dU = (dG * T * S * (1.0 - S)).T @ H
    return loss, {"V": dV, "U": dU, "w": dw, "W_cls": dW_cls, "b_cls": db_cls}


_PARAM_NAMES = ("V", "U", "w", "W_cls", "b_cls")


@dataclass
class TrainLog:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_balanced_accuracy: float = -np.inf
    stopped_early: bool = False


def train_mil_on_splits(train_slides: Sequence[SlideBag], val_slides: Sequence[SlideBag],
                        n_classes: int, config: MilTrainConfig
                        ) -> Tuple[MilModel, TrainLog]:
    """Core training loop on explicit train/validation slide lists."""
    if not train_slides or not val_slides:
        raise ValueError("train and validation splits must be non-empty")
    train_labels = {s.label for s in train_slides}
    if len(train_labels) < 2:
        raise ValueError(f"training split has a single class {train_labels}")
    dim_in = train_slides[0].dim
    model = init_model(dim_in, n_classes, config)
    states = {name: AdamState.zeros_like(getattr(model, name)) for name in _PARAM_NAMES}
    order_stream = RngStream(config.seed, stream_id=0x0D0E)

    log = TrainLog()
    best = model.copy()
    since_improve = 0
    n_train = len(train_slides)
    for epoch in range(config.epochs):
        order = order_stream.substream(epoch).permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_slides):
            batch = order[start:start + config.batch_slides]
            grads = {name: np.zeros_like(getattr(model, name)) for name in _PARAM_NAMES}
            batch_loss = 0.0
            for idx in batch:
                slide = train_slides[int(idx)]
                loss, g = bag_loss_and_grads(model, slide.feature_matrix(), slide.label)
                batch_loss += loss
                for name in _PARAM_NAMES:
                    grads[name] += g[name]
            scale = 1.0 / len(batch)
            if not np.isfinite(batch_loss):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            for name in _PARAM_NAMES:
                new_param, states[name] = adam_step(
                    getattr(model, name), grads[name] * scale, states[name],
                    lr=config.learning_rate)
                setattr(model, name, new_param)
            epoch_loss += batch_loss
        val_ba = _validation_balanced_accuracy(val_slides, model, n_classes)
        log.epochs.append({
            "epoch": epoch,
            "train_loss": epoch_loss / n_train,
            "val_balanced_accuracy": val_ba,
        })
        if val_ba > log.best_val_balanced_accuracy:
            log.best_val_balanced_accuracy = val_ba
            log.best_epoch = epoch
            best = model.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.early_stop_patience:
                log.stopped_early = True
                break
    return best, log


def _validation_balanced_accuracy(slides: Sequence[SlideBag], model: MilModel,
                                  n_classes: int) -> float:
    true = [s.label for s in slides]
    pred = [int(np.argmax(bag_forward(s, model)[0])) for s in slides]
    cm = ConfusionMatrix.from_labels(true, pred, n_classes=n_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return balanced_accuracy(cm)


def train_mil(cohort: Cohort, fold: int, config: MilTrainConfig) -> Tuple[MilModel, TrainLog]:
    """Train on the cohort's fold split: held-out test fold excluded, next fold validates."""
    if cohort.task_kind != "classification":
        raise ValueError(f"expected a classification cohort, got {cohort.task_kind!r}")
    train, val, _ = fold_split(cohort, fold)
    return train_mil_on_splits(train, val, cohort.n_classes, config)


@dataclass
class SlidePrediction:
    slide_id: str
    probabilities: np.ndarray
    predicted_class: int
    attention: np.ndarray


def predict_slides(cohort: Cohort, model: MilModel,
                   fold: Optional[int] = None) -> List[SlidePrediction]:
    """Probabilities, argmax class, and attention per slide (test fold if given)."""
    if cohort.dim != model.dim_in:
        raise ValueError(f"cohort dim {cohort.dim} does not match model dim {model.dim_in}")
    slides = cohort.slides if fold is None else fold_split(cohort, fold)[2]
    out = []
    for slide in slides:
        logits, attention, _ = bag_forward(slide, model)
        probs = stable_softmax(logits)
        out.append(SlidePrediction(slide.slide_id, probs, int(np.argmax(probs)), attention))
    return out


# ---------------------------------------------------------------------------
# Heatmap export
# ---------------------------------------------------------------------------


def heatmap_grid(slide: SlideBag, attention: np.ndarray) -> np.ndarray:
    """(max_y+1, max_x+1) grid of min-max-normalized attention; -1 marks empty cells."""
    attention = np.asarray(attention, dtype=np.float64).ravel()
    if attention.size != slide.n_patches:
        raise ValueError(
            f"attention length {attention.size} does not match {slide.n_patches} patches")
    lo, hi = float(attention.min()), float(attention.max())
    if hi == lo:
        norm = np.full_like(attention, 0.5)
    else:
        norm = (attention - lo) / (hi - lo)
    height = max(p.y for p in slide.patches) + 1
    width = max(p.x for p in slide.patches) + 1
    grid = np.full((height, width), -1.0)
    for patch, value in zip(slide.patches, norm):
        # Patches from different magnification levels can share a cell; keep the max.
        grid[patch.y, patch.x] = max(grid[patch.y, patch.x], value)
    return grid


def export_heatmap(slide: SlideBag, attention: np.ndarray, path) -> np.ndarray:
    """Write the attention grid as CSV and binary PGM (P5); returns the grid.

    CSV keeps the -1 sentinel for empty cells; the PGM maps the sentinel to 0
    and normalized values to 1..255.
    """
    grid = heatmap_grid(slide, attention)
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    pgm_path = path.with_suffix(".pgm")
    np.savetxt(csv_path, grid, fmt="%.6f", delimiter=",")
    pixels = np.where(grid < 0, 0, 1 + np.rint(grid * 254.0).astype(np.int64)).astype(np.uint8)
    with pgm_path.open("wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return grid


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_model(model: MilModel, path) -> int:
    """Serialize as DGMM: header then V, U, w, W_cls, b_cls as little-endian f64."""
    parts = [_MODEL_HEADER.pack(DGMM_MAGIC, DGMM_VERSION,
                                model.dim_in, model.attn_dim, model.n_classes)]
    for name in _PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload)
    return len(payload)


def load_model(path) -> MilModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _MODEL_HEADER.size:
        raise ModelFileError(f"{path}: truncated file (no complete header)")
    magic, version, m, d, c = _MODEL_HEADER.unpack_from(blob)
    if magic != DGMM_MAGIC:
        raise ModelFileError(f"{path}: bad magic {magic!r}")
    if version != DGMM_VERSION:
        raise ModelFileError(f"{path}: version mismatch (got {version}, expected {DGMM_VERSION})")
    if m == 0 or d == 0 or c == 0:
        raise ModelFileError(f"{path}: dims must be positive (M={m}, D={d}, C={c})")
    n_params = d * m + d * m + d + c * m + c
    expected = _MODEL_HEADER.size + 8 * n_params
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "trailing bytes in"
        raise ModelFileError(f"{path}: {kind} file ({len(blob)} bytes, expected {expected})")
    flat = np.frombuffer(blob, dtype="<f8", offset=_MODEL_HEADER.size)
    shapes = [("V", (d, m)), ("U", (d, m)), ("w", (d,)), ("W_cls", (c, m)), ("b_cls", (c,))]
    params = {}
    pos = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise ModelFileError(f"{path}: non-finite parameters")
    return MilModel(dim_in=m, attn_dim=d, n_classes=c, **params)
