"""Adam, early stopping, and the two-phase (balanced then cost-sensitive) schedule."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, NonFiniteGradientError, ParameterError, UsageError
from .model import CnnModel, classify, extract_features, forward_graph, l2_penalty, parameter_tensors


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 10
    pos_weight: float | None = None  # None: negatives/positives of the phase-2 set
    phase2_epochs: int = 20

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.phase2_epochs < 0:
            raise ConfigError(f"phase2_epochs must be >= 0, got {self.phase2_epochs}")
        if self.pos_weight is not None and self.pos_weight < 1:
            raise ConfigError(f"pos_weight must be >= 1, got {self.pos_weight}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Only the names present in ``grads`` are touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name} has {bad} non-finite entries at step {state.t + 1}")
        if g.shape != params[name].shape:
            raise ParameterError(f"gradient of {name} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    t = state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training
    should stop (no strict improvement for ``patience`` epochs)."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ParameterError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    best: bool


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "best"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), int(r.best)])


def example_weights(labels, pos_weight: float) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where(labels == 1, float(pos_weight), 1.0)


def balancing_pos_weight(labels) -> float:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0:
        raise ParameterError("cannot balance a set with no positive examples")
    return max(1.0, n_neg / n_pos)


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images[..., None] if images.ndim == 3 else images


def validation_loss(model: CnnModel, images, labels, batch_size: int = 64) -> float:
    """Unweighted mean cross-entropy in inference mode."""
    images = _as_batch(images)
    labels = np.asarray(labels)
    tensors = parameter_tensors(model)
    total = 0.0
    for i in range(0, len(images), batch_size):
        probs = forward_graph(model, images[i : i + batch_size], tensors)
        total += float(nn.weighted_bce(probs, labels[i : i + batch_size]).data) * len(probs.data)
    return total / len(images)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_phase1(model: CnnModel, images, labels, val_images, val_labels, cfg: TrainConfig,
                 rng: np.random.Generator) -> tuple[CnnModel, list[EpochRecord]]:
    """Train every layer on a balanced subset with plain cross-entropy plus the
    FC L2 penalty. Stops after ``patience`` epochs without a validation-loss
    improvement and returns the best-validation parameters."""
    images, labels = _as_batch(images), np.asarray(labels)
    val_images, val_labels = _as_batch(val_images), np.asarray(val_labels)
    if len(images) == 0:
        raise UsageError("phase 1 needs a non-empty training subset")
    if len(val_images) == 0:
        raise UsageError("phase 1 needs a non-empty validation set")
    model = model.copy()
    state = AdamState.from_config(cfg)
    stopper = EarlyStopping(cfg.patience)
    best_params = {k: v.copy() for k, v in model.params.items()}
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        seen, running = 0, 0.0
        for idx in _minibatches(len(images), cfg.batch_size, rng):
            tensors = parameter_tensors(model, requires_grad=True)
            probs = forward_graph(model, images[idx], tensors, nn.TRAIN, rng)
            loss = nn.weighted_bce(probs, labels[idx], 1.0) + l2_penalty(model, tensors)
            nn.backward(loss)
            adam_step(model.params, {k: t.grad for k, t in tensors.items()}, state)
            running += float(loss.data) * len(idx)
            seen += len(idx)
        val = validation_loss(model, val_images, val_labels)
        stop = stopper.update(val)
        improved = stopper.best_epoch == epoch
        if improved:
            best_params = {k: v.copy() for k, v in model.params.items()}
        history.append(EpochRecord(epoch, running / seen, val, improved))
        if stop:
            break
    model.params = best_params
    return model, history


def compute_features(model: CnnModel, images, batch_size: int = 64) -> np.ndarray:
    """Flattened conv-stage output in inference mode."""
    images = _as_batch(images)
    tensors = parameter_tensors(model)
    chunks = [extract_features(model, nn.Tensor(images[i : i + batch_size]), tensors, nn.INFER).data
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks)


def fine_tune_phase2(model: CnnModel, images, labels, cfg: TrainConfig, rng: np.random.Generator,
                     val_images=None, val_labels=None) -> tuple[CnnModel, list[EpochRecord]]:
    """Cost-sensitive fine-tuning of the FC layers on the full (imbalanced)
    training set for exactly ``cfg.phase2_epochs`` epochs.

    The conv stage is frozen and evaluated once in inference mode; positives
    are weighted by ``cfg.pos_weight`` (default: negatives / positives).
    """
    labels = np.asarray(labels)
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else balancing_pos_weight(labels)
    if pos_weight < 1:
        raise ParameterError(f"pos_weight must be >= 1, got {pos_weight}")
    model = model.copy()
    history: list[EpochRecord] = []
    if cfg.phase2_epochs == 0:
        return model, history
    feats = compute_features(model, images)
    val_feats = compute_features(model, val_images) if val_images is not None and len(val_images) else None
    trainable = model.classifier_params
    state = AdamState.from_config(cfg)
    best = np.inf
    for epoch in range(1, cfg.phase2_epochs + 1):
        seen, running = 0, 0.0
        for idx in _minibatches(len(feats), cfg.batch_size, rng):
            tensors = parameter_tensors(model, trainable, requires_grad=True)
            probs = classify(model, nn.Tensor(feats[idx]), tensors, nn.TRAIN, rng)
            loss = nn.weighted_bce(probs, labels[idx], pos_weight) + l2_penalty(model, tensors)
            nn.backward(loss)
            adam_step(model.params, {k: tensors[k].grad for k in trainable}, state)
            running += float(loss.data) * len(idx)
            seen += len(idx)
        val = np.nan
        if val_feats is not None:
            probs = classify(model, nn.Tensor(val_feats), parameter_tensors(model), nn.INFER)
            val = float(nn.weighted_bce(probs, np.asarray(val_labels)).data)
        improved = bool(val < best)
        best = min(best, val) if not np.isnan(val) else best
        history.append(EpochRecord(epoch, running / seen, val, improved))
    return model, history
