"""Fits the learned scorer on Monte-Carlo labeled prefixes.

Objective is the soft binary cross-entropy between the scorer's logit and the
MC success probability. Optimization is plain mini-batch gradient descent
with rollback-and-halve on loss regression, which keeps the epoch-level
training loss monotone and every run bitwise reproducible under its seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError
from .labeler import LabeledPrefix
from .signals import ScorerModel, sigmoid
from .simbackend import substream

log = logging.getLogger(__name__)

LOSS_REGRESSION_TOL = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    learning_rate: float = 2e-5
    batch_size: int = 16
    epochs: int = 15
    hidden_dim: int = 32
    use_adapter: bool = True
    val_fraction: float = 0.1
    patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)

    def append(self, epoch, train_loss, val_loss, lr):
        self.rows.append((epoch, train_loss, val_loss, lr))

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,learning_rate"]
        for epoch, tr, va, lr in self.rows:
            lines.append(f"{epoch},{tr:.10f},{va:.10f},{lr:.3e}")
        return "\n".join(lines) + "\n"


def soft_bce_loss(logit: float, s_mc: float) -> float:
    """-[s*log(sigmoid(x)) + (1-s)*log(1-sigmoid(x))], numerically stable."""
    if not np.isfinite(logit):
        raise FloatingPointError(f"non-finite logit {logit}")
    if not 0.0 <= s_mc <= 1.0:
        raise ValueError(f"target must lie in [0,1], got {s_mc}")
    x = float(logit)
    # max(x,0) - x*s + log(1 + exp(-|x|))
    return max(x, 0.0) - x * s_mc + float(np.log1p(np.exp(-abs(x))))


def batch_loss(model: ScorerModel, features: np.ndarray, targets: np.ndarray) -> float:
    """Mean soft BCE over a batch."""
    x = np.asarray(features, dtype=np.float64)
    s = np.asarray(targets, dtype=np.float64)
    logits = model.logits(x)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in batch")
    losses = np.maximum(logits, 0.0) - logits * s + np.log1p(np.exp(-np.abs(logits)))
    return float(np.mean(losses))


def loss_gradient(model: ScorerModel, features: np.ndarray, targets: np.ndarray) -> dict:
    """Exact analytic gradient of the mean soft BCE over the batch.

    Keys mirror the scorer's parameter names; absent parameters (no adapter)
    are omitted.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    s = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDatasetError("gradient of an empty batch")
    if x.shape[0] != s.shape[0]:
        raise ValueError("features and targets disagree on batch size")
    n = x.shape[0]

    if model.use_adapter:
        pre = x @ model.adapter_weight.T + model.adapter_bias
        hidden = np.tanh(pre)
        logits = hidden @ model.head_weight + model.head_bias
        dlogit = (sigmoid(logits) - s) / n
        grad_head_w = hidden.T @ dlogit
        grad_head_b = float(np.sum(dlogit))
        dhidden = np.outer(dlogit, model.head_weight) * (1.0 - hidden ** 2)
        return {
            "adapter_weight": dhidden.T @ x,
            "adapter_bias": dhidden.sum(axis=0),
            "head_weight": grad_head_w,
            "head_bias": grad_head_b,
        }
    logits = x @ model.head_weight + model.head_bias
    dlogit = (sigmoid(logits) - s) / n
    return {
        "head_weight": x.T @ dlogit,
        "head_bias": float(np.sum(dlogit)),
    }


def _apply_gradient(model: ScorerModel, grads: dict, lr: float) -> None:
    if model.use_adapter:
        model.adapter_weight -= lr * grads["adapter_weight"]
        model.adapter_bias -= lr * grads["adapter_bias"]
    model.head_weight -= lr * grads["head_weight"]
    model.head_bias = float(model.head_bias - lr * grads["head_bias"])


def split_by_query(
    dataset: list[LabeledPrefix], val_fraction: float, seed: int
) -> tuple[list[LabeledPrefix], list[LabeledPrefix]]:
    """Hold out whole queries for validation so prefixes never leak across
    the split. Falls back to training data when there is a single query."""
    qids = sorted({r.query_id for r in dataset})
    if len(qids) < 2 or val_fraction == 0.0:
        return list(dataset), list(dataset)
    order = substream(seed, "valsplit").permutation(len(qids))
    n_val = max(1, int(round(val_fraction * len(qids))))
    val_qids = {qids[i] for i in order[:n_val]}
    train = [r for r in dataset if r.query_id not in val_qids]
    val = [r for r in dataset if r.query_id in val_qids]
    return train, val


def train_scorer(dataset: list[LabeledPrefix], config: TrainConfig) -> tuple[ScorerModel, TrainingLog]:
    """Gradient-descent fit; returns the best-validation checkpoint."""
    if not dataset:
        raise EmptyDatasetError("cannot train on an empty dataset")
    dims = {len(r.features) for r in dataset}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions in dataset: {sorted(dims)}")
    feature_dim = dims.pop()
    if feature_dim == 0:
        raise ValueError("dataset has no checkpoint features to train on")
    if len({r.s_mc for r in dataset}) == 1:
        log.warning("all labels identical (s_mc=%s); training proceeds", dataset[0].s_mc)

    train_recs, val_recs = split_by_query(dataset, config.val_fraction, config.seed)
    x_train = np.array([r.features for r in train_recs], dtype=np.float64)
    s_train = np.array([r.s_mc for r in train_recs], dtype=np.float64)
    x_val = np.array([r.features for r in val_recs], dtype=np.float64)
    s_val = np.array([r.s_mc for r in val_recs], dtype=np.float64)

    model = ScorerModel.initialize(
        feature_dim, config.hidden_dim, seed=config.seed, use_adapter=config.use_adapter
    )
    lr = config.learning_rate
    trainlog = TrainingLog()

    best_val = batch_loss(model, x_val, s_val)
    best_model = model.copy()
    prev_train = batch_loss(model, x_train, s_train)
    stale = 0

    for epoch in range(1, config.epochs + 1):
        checkpoint = model.copy()
        order = substream(config.seed, "shuffle", epoch).permutation(len(x_train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            grads = loss_gradient(model, x_train[idx], s_train[idx])
            _apply_gradient(model, grads, lr)

        train_loss = batch_loss(model, x_train, s_train)
        if train_loss > prev_train + LOSS_REGRESSION_TOL:
            # Step overshot: restore the epoch checkpoint and halve the rate.
            model = checkpoint
            lr *= 0.5
            train_loss = prev_train
        prev_train = train_loss

        val_loss = batch_loss(model, x_val, s_val)
        trainlog.append(epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val = val_loss
            best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break

    return best_model, trainlog


def validation_accuracy(model: ScorerModel, dataset: list[LabeledPrefix], threshold: float = 0.5) -> float:
    """Fraction of records whose thresholded score matches the thresholded label."""
    if not dataset:
        raise EmptyDatasetError("no records to evaluate")
    x = np.array([r.features for r in dataset], dtype=np.float64)
    s = np.array([r.s_mc for r in dataset], dtype=np.float64)
    pred = sigmoid(model.logits(x)) >= threshold
    actual = s >= threshold
    return float(np.mean(pred == actual))
