"""Feed-forward classifier: embeddings, softmax probabilities, SGD training.

The network is input -> hidden layers (ReLU) -> embedding layer (linear)
-> logits.  The penultimate (embedding) activation is the geometric
representation used by clustering and alignment; the logits row count
tracks the current label set.

Everything is plain float64 numpy with mini-batch SGD, so runs are
deterministic for a fixed seed and analytic gradients can be checked
against finite differences.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from trafficlearn.data import FlowRecord, features_matrix


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class CheckpointError(RuntimeError):
    """Raised when a model file cannot be read back."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.05
    patience: int = 25
    seed: int = 0
    weight_decay: float = 0.0  # L2 penalty; keeps noise-only weights from inflating

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.patience <= 0:
            raise ValueError("all TrainConfig values must be positive")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def softmax(z) -> np.ndarray:
    """Normalize logits into a probability vector (max-shifted for stability)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class Classifier:
    """MLP over flow features; exposes embeddings and class probabilities.

    `classes` is the ordered known-label list the logits refer to;
    `label_version` mirrors the LabelSet version the model was built for.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = (64, 64),
        embedding_dim: int = 32,
        classes: Sequence[str] = (),
        seed: int = 0,
        label_version: int = 0,
    ):
        if input_dim <= 0 or embedding_dim <= 0:
            raise ValueError("dimensions must be positive")
        if not classes:
            raise ValueError("classifier needs at least one class")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embedding_dim = int(embedding_dim)
        self.classes = tuple(classes)
        self.label_version = int(label_version)

        sizes = [self.input_dim, *self.hidden, self.embedding_dim, len(self.classes)]
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(_init_weight(rng, fan_in, fan_out))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        """All parameter arrays, interleaved [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def _forward_cached(self, X: np.ndarray):
        # returns (layer inputs, pre-activations) up to logits
        inputs = [X]
        pres = []
        a = X
        n_hidden = len(self.hidden)
        for i in range(n_hidden):
            z = a @ self.weights[i] + self.biases[i]
            pres.append(z)
            a = np.maximum(z, 0.0)
            inputs.append(a)
        emb = a @ self.weights[n_hidden] + self.biases[n_hidden]
        inputs.append(emb)
        logits = emb @ self.weights[n_hidden + 1] + self.biases[n_hidden + 1]
        return inputs, pres, emb, logits

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"input has {X.shape[1]} features, model expects {self.input_dim}")
        return X

    def embed(self, X) -> np.ndarray:
        X = self._check_dim(X)
        _, _, emb, _ = self._forward_cached(X)
        return emb

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_dim(X)
        _, _, _, logits = self._forward_cached(X)
        return softmax(logits)

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Single-sample pass: (embedding, probability vector)."""
        if isinstance(x, FlowRecord):
            x = x.features
        X = self._check_dim(x)
        if X.shape[0] != 1:
            raise ValueError("forward takes a single sample; use embed/predict_proba for batches")
        _, _, emb, logits = self._forward_cached(X)
        return emb[0], softmax(logits[0])

    def loss_and_grads(self, X: np.ndarray, y_idx: np.ndarray):
        """Mean cross-entropy over the batch and its gradient for every parameter.

        Gradients are returned in the same order as `parameters()`.
        """
        X = self._check_dim(X)
        y_idx = np.asarray(y_idx, dtype=np.int64)
        n = X.shape[0]
        if np.any(y_idx < 0) or np.any(y_idx >= self.n_classes):
            bad = int(y_idx[(y_idx < 0) | (y_idx >= self.n_classes)][0])
            raise ValueError(f"label index {bad} outside [0, {self.n_classes})")

        inputs, pres, emb, logits = self._forward_cached(X)
        log_probs = _log_softmax(logits)
        loss = -float(np.mean(log_probs[np.arange(n), y_idx]))

        probs = np.exp(log_probs)
        dlogits = probs
        dlogits[np.arange(n), y_idx] -= 1.0
        dlogits /= n

        n_hidden = len(self.hidden)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        grads[2 * (n_hidden + 1)] = inputs[n_hidden + 1].T @ dlogits
        grads[2 * (n_hidden + 1) + 1] = dlogits.sum(axis=0)

        delta = dlogits @ self.weights[n_hidden + 1].T  # gradient at embedding
        grads[2 * n_hidden] = inputs[n_hidden].T @ delta
        grads[2 * n_hidden + 1] = delta.sum(axis=0)

        delta = delta @ self.weights[n_hidden].T
        for i in range(n_hidden - 1, -1, -1):
            delta = delta * (pres[i] > 0)
            grads[2 * i] = inputs[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i].T
        return loss, grads

    def to_dict(self) -> dict:
        return {
            "format": "classifier-1",
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "embedding_dim": self.embedding_dim,
            "classes": list(self.classes),
            "label_version": self.label_version,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Classifier":
        try:
            if payload["format"] != "classifier-1":
                raise CheckpointError(f"unsupported model format {payload.get('format')!r}")
            model = cls(
                input_dim=payload["input_dim"],
                hidden=payload["hidden"],
                embedding_dim=payload["embedding_dim"],
                classes=payload["classes"],
                label_version=payload["label_version"],
            )
            model.weights = [np.asarray(w, dtype=np.float64) for w in payload["weights"]]
            model.biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed model payload: {exc}") from exc
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read model from {path}: {exc}") from exc
        return cls.from_dict(payload)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def mean_cross_entropy(model: Classifier, X: np.ndarray, y_idx: np.ndarray) -> float:
    X = model._check_dim(X)
    _, _, _, logits = model._forward_cached(X)
    log_probs = _log_softmax(logits)
    return -float(np.mean(log_probs[np.arange(X.shape[0]), np.asarray(y_idx)]))


def _pairs_to_arrays(model: Classifier, pairs) -> tuple[np.ndarray, np.ndarray]:
    X = features_matrix([rec for rec, _ in pairs])
    idx = np.empty(len(pairs), dtype=np.int64)
    for i, (_, lab) in enumerate(pairs):
        try:
            idx[i] = model.classes.index(lab)
        except ValueError:
            raise ValueError(f"label {lab!r} not among model classes {model.classes}") from None
    return X, idx


def train(
    model: Classifier,
    labeled: Sequence[tuple[FlowRecord, str]],
    cfg: TrainConfig,
    val: Sequence[tuple[FlowRecord, str]] | None = None,
) -> Classifier:
    """Mini-batch SGD on mean cross-entropy; returns a trained copy.

    When `val` pairs are given, training early-stops on validation
    cross-entropy with the configured patience, keeping the earliest best
    parameters on ties.  Deterministic for a fixed seed.
    """
    if not labeled:
        raise ValueError("labeled set is empty")
    model = model.copy()
    X, y = _pairs_to_arrays(model, labeled)

    val_arrays = None
    if val:
        usable = [(r, lab) for r, lab in val if lab in model.classes]
        if usable:
            val_arrays = _pairs_to_arrays(model, usable)

    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    best_val = math.inf
    best_params = None
    since_best = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[batch], y[batch])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            for param, grad in zip(model.parameters(), grads):
                if cfg.weight_decay and param.ndim > 1:  # decay weights, not biases
                    param -= cfg.learning_rate * (grad + cfg.weight_decay * param)
                else:
                    param -= cfg.learning_rate * grad
        if val_arrays is not None:
            val_loss = mean_cross_entropy(model, *val_arrays)
            if val_loss < best_val:
                best_val = val_loss
                best_params = [p.copy() for p in model.parameters()]
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break

    if best_params is not None:
        for param, best in zip(model.parameters(), best_params):
            param[...] = best
    return model


def expand_output(model: Classifier, new_classes: Sequence[str], seed: int) -> Classifier:
    """Grow the logits layer for an enlarged label set.

    Existing logit columns are preserved bit-exactly; columns for the added
    classes are drawn from the standard init scheme with the given seed.
    All other layers are untouched.
    """
    new_classes = tuple(new_classes)
    if len(new_classes) <= model.n_classes:
        raise ValueError(f"new class count {len(new_classes)} must exceed current {model.n_classes}")
    if new_classes[: model.n_classes] != model.classes:
        raise ValueError("existing classes must be a prefix of the expanded class list")

    out = model.copy()
    n_new = len(new_classes) - model.n_classes
    rng = np.random.default_rng(seed)
    fresh = _init_weight(rng, model.embedding_dim, n_new)
    out.weights[-1] = np.concatenate([model.weights[-1], fresh], axis=1)
    out.biases[-1] = np.concatenate([model.biases[-1], np.zeros(n_new)])
    out.classes = new_classes
    out.label_version = model.label_version + n_new
    return out
