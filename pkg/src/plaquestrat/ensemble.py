"""Group-aware splitting, balanced sub-sampling, three-model two-phase training
and the vote / average / certainty-weighted combination schemes."""
from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .errors import FormatError, InfeasibleSplitError, ParameterError, UsageError
from .model import (FORMAT_VERSION, MAGIC, CnnModel, ModelConfig, _Reader, build_model, model_from_bytes,
                    model_to_bytes, predict_proba)
from .training import EpochRecord, TrainConfig, fine_tune_phase2, train_phase1

SCHEMES = ("vote", "average", "weighted_average")
SCHEME_ALIASES = {"weighted": "weighted_average", "mean": "average"}
DEFAULT_THRESHOLD = 0.465
SPLIT_RATIOS = (0.62, 0.13, 0.25)
N_MODELS = 3


def canonical_scheme(scheme: str) -> str:
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown combination scheme {scheme!r}; choose from vote, average, weighted")
    return scheme


# ---------------------------------------------------------------- partitioning


def _class_groups(manifest: DatasetManifest) -> dict[int, list[str]]:
    """Group ids per class, in order of first appearance."""
    label_of: dict[str, int] = {}
    for e in manifest.entries:
        if label_of.setdefault(e.group, e.label) != e.label:
            raise ParameterError(f"group {e.group!r} mixes both labels")
    out: dict[int, list[str]] = {0: [], 1: []}
    for g, label in label_of.items():
        out[label].append(g)
    return out


def stratified_split(manifest: DatasetManifest, ratios=SPLIT_RATIOS, seed: int = 0) -> DatasetManifest:
    """Assign train/val/test per group, separately for each class.

    For a class with n groups (shuffled by ``seed``): val gets floor(r_val*n),
    test floor(r_test*n), train the rest. Entries sharing a group share a split.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    groups = _class_groups(manifest)
    rng = np.random.default_rng([seed, 17])
    split_of: dict[str, str] = {}
    for label in (0, 1):
        ids = groups[label]
        if len(ids) < 3:
            raise InfeasibleSplitError(f"class {label} has {len(ids)} groups; need at least 3 "
                                       "to populate train, val and test")
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_val = int(np.floor(ratios[1] * len(ids)))
        n_test = int(np.floor(ratios[2] * len(ids)))
        for i, g in enumerate(order):
            split_of[g] = "val" if i < n_val else "test" if i < n_val + n_test else "train"
    return manifest.with_splits([split_of[e.group] for e in manifest.entries])


def balanced_subsets(labels, k: int = N_MODELS, seed: int = 0) -> list[np.ndarray]:
    """Partition the majority class into ``k`` near-equal parts (larger parts
    first) and pair each with every minority instance.

    Returns positional index arrays into ``labels``.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    majority = 1 if n_pos > len(labels) - n_pos else 0
    major = np.flatnonzero(labels == majority)
    minor = np.flatnonzero(labels != majority)
    if len(major) < k:
        raise ParameterError(f"majority class has {len(major)} instances, fewer than k={k}")
    rng = np.random.default_rng([seed, 23])
    parts = np.array_split(major[rng.permutation(len(major))], k)
    return [np.concatenate([part, minor]) for part in parts]


# ---------------------------------------------------------------- combination


def certainty(y):
    """Distance of a probability from indecision, folded to [0.5, 1]."""
    arr = np.asarray(y, dtype=np.float64)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ParameterError(f"probabilities must lie in [0, 1], got {y}")
    c = np.where(arr >= 0.5, arr, 1.0 - arr)
    return float(c) if c.ndim == 0 else c


def certainty_weights(ys) -> np.ndarray:
    """Per-model weights proportional to certainty, normalised over the last axis."""
    c = certainty(np.asarray(ys, dtype=np.float64))
    return c / np.sum(c, axis=-1, keepdims=True)


def combine_many(ys, scheme: str = "average", threshold: float = DEFAULT_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`combine` over rows of an (N, n_models) array."""
    scheme = canonical_scheme(scheme)
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    certainty(ys)  # range check
    if scheme == "vote":
        votes = ys >= threshold
        p = votes.mean(axis=-1)
        labels = (2 * votes.sum(axis=-1) > ys.shape[-1]).astype(np.int64)
        return p, labels
    if scheme == "average":
        p = ys.mean(axis=-1)
    else:
        p = np.sum(certainty_weights(ys) * ys, axis=-1)
    return p, (p >= threshold).astype(np.int64)


def combine(ys, scheme: str = "average", threshold: float = DEFAULT_THRESHOLD) -> tuple[float, int]:
    """Ensemble probability and label from one prediction per primary model.

    ``vote`` thresholds each model and takes the majority (probability = vote
    fraction); ``average`` is the plain mean; ``weighted_average`` weights each
    model by its certainty. Labels use ``p >= threshold``.
    """
    p, labels = combine_many(np.asarray(ys, dtype=np.float64)[None, :], scheme, threshold)
    return float(p[0]), int(labels[0])


# ---------------------------------------------------------------- ensemble model


@dataclass
class EnsembleModel:
    models: list[CnnModel]
    scheme: str = "average"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.scheme = canonical_scheme(self.scheme)
        if len(self.models) != N_MODELS:
            raise ParameterError(f"an ensemble holds exactly {N_MODELS} models, got {len(self.models)}")
        if len({m.config for m in self.models}) != 1:
            raise ParameterError("primary models must share one architecture")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must be in (0, 1), got {self.threshold}")

    @property
    def config(self) -> ModelConfig:
        return self.models[0].config


def model_probabilities(ensemble: EnsembleModel, images) -> np.ndarray:
    """(N, 3) positive-class probability from each primary model."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    return np.stack([predict_proba(m, batch) for m in ensemble.models], axis=1)


def predict(ensemble: EnsembleModel, image) -> tuple[float, int, np.ndarray]:
    """(p*, label, per-model probabilities) for a single (H, W, 1) image."""
    ys = model_probabilities(ensemble, np.asarray(image)[None] if np.ndim(image) == 3 else image)
    if ys.shape[0] != 1:
        raise UsageError("predict takes one image; use predict_batch for several")
    p, label = combine(ys[0], ensemble.scheme, ensemble.threshold)
    return p, label, ys[0]


def predict_batch(ensemble: EnsembleModel, images) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ys = model_probabilities(ensemble, images)
    p, labels = combine_many(ys, ensemble.scheme, ensemble.threshold)
    return p, labels, ys


def ensemble_to_bytes(ensemble: EnsembleModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = json.dumps({"kind": "ensemble", "scheme": ensemble.scheme, "threshold": ensemble.threshold,
                         "n_models": len(ensemble.models)}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for m in ensemble.models:
        blob = model_to_bytes(m)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def ensemble_from_bytes(data: bytes, what: str = "ensemble") -> EnsembleModel:
    rd = _Reader(data, what)
    meta = rd.header("ensemble")
    try:
        n, scheme, threshold = int(meta["n_models"]), meta["scheme"], float(meta["threshold"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{what}: invalid ensemble header ({exc})") from None
    models = []
    for i in range(n):
        size = rd.u64(f"model {i + 1} length")
        models.append(model_from_bytes(rd.take(size, f"model {i + 1}"), f"{what}[model {i + 1}]"))
    if rd.pos != len(data):
        raise FormatError(f"{what}: {len(data) - rd.pos} trailing bytes")
    try:
        return EnsembleModel(models, scheme, threshold)
    except ParameterError as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_ensemble(ensemble: EnsembleModel, path) -> None:
    Path(path).write_bytes(ensemble_to_bytes(ensemble))


def load_ensemble(path) -> EnsembleModel:
    return ensemble_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- training


@dataclass
class PrimaryResult:
    model: CnnModel
    phase1: list[EpochRecord]
    phase2: list[EpochRecord]


def train_primary(images, labels, subset, train_idx, val_idx, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, seed: int, index: int) -> PrimaryResult:
    """Build and two-phase train primary model ``index`` (0-based).

    ``subset`` indexes its balanced phase-1 set; ``train_idx`` the full
    imbalanced training split used for phase 2.
    """
    model = build_model(model_cfg, np.random.default_rng([seed, 101, index]))
    rng = np.random.default_rng([seed, 202, index])
    model, h1 = train_phase1(model, images[subset], labels[subset], images[val_idx], labels[val_idx],
                             train_cfg, rng)
    model, h2 = fine_tune_phase2(model, images[train_idx], labels[train_idx], train_cfg, rng,
                                 images[val_idx], labels[val_idx])
    return PrimaryResult(model, h1, h2)


def _train_primary_star(args):
    return train_primary(*args)


def run_parallel(fn, tasks: list, jobs: int = 1) -> list:
    """Map ``fn`` over ``tasks`` in order, optionally across processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def train_ensemble(manifest: DatasetManifest, images, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   seed: int = 0, scheme: str = "average", threshold: float = DEFAULT_THRESHOLD,
                   jobs: int = 1) -> tuple[EnsembleModel, list[PrimaryResult]]:
    """Train the three primary models on balanced subsets of the manifest's
    train split, fine-tune each on the whole train split, and bundle them.

    ``images`` is aligned with ``manifest.entries``. Results do not depend on
    ``jobs``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = manifest.labels
    train_idx, val_idx = manifest.indices("train"), manifest.indices("val")
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise UsageError("manifest needs non-empty train and val splits")
    subsets = [train_idx[s] for s in balanced_subsets(labels[train_idx], N_MODELS, seed)]
    tasks = [(images, labels, subsets[i], train_idx, val_idx, model_cfg, train_cfg, seed, i)
             for i in range(N_MODELS)]
    results = run_parallel(_train_primary_star, tasks, jobs)
    return EnsembleModel([r.model for r in results], scheme, threshold), results
