"""Local surrogate explanations over superpixels.

An image is cut into SLIC superpixels, random subsets of superpixels are
replaced by a flat gray value, the black box scores each perturbed copy, and
a kernel-weighted ridge regression on the on/off masks attributes the score
to individual superpixels.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError, SingularSystemError

NEGLIGIBLE = 1e-12


@dataclass(frozen=True)
class ExplainConfig:
    n_segments: int = 40
    compactness: float = 10.0
    iters: int = 10
    intensity_scale: float = 100.0
    n_samples: int = 1000
    gray_value: float | None = None  # None: mean intensity of the explained image
    kernel_width: float = 0.25
    ridge: float = 1e-3
    top_k: int = 2
    batch_size: int = 100

    def __post_init__(self):
        from .errors import ConfigError

        if self.n_segments < 1 or self.iters < 0 or self.n_samples < 1 or self.batch_size < 1:
            raise ConfigError("n_segments, n_samples and batch_size must be >= 1 and iters >= 0")
        if self.kernel_width <= 0 or self.ridge < 0 or self.compactness < 0 or self.intensity_scale < 0:
            raise ConfigError("kernel_width must be > 0; ridge, compactness and intensity_scale >= 0")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int, values 0..n_segments-1

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


@dataclass
class Explanation:
    coefficients: np.ndarray
    intercept: float
    r2: float
    n_samples: int
    kernel_width: float
    base_prediction: float = float("nan")
    masks: np.ndarray | None = field(default=None, repr=False)
    predictions: np.ndarray | None = field(default=None, repr=False)

    def ranking(self) -> np.ndarray:
        """Segment indices by descending |coefficient|; ties keep lower index first."""
        return np.lexsort((np.arange(len(self.coefficients)), -np.abs(self.coefficients)))


def _as_2d(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty (H, W) or (H, W, 1) image, got {np.shape(image)}")
    return arr


# ---------------------------------------------------------------- segmentation


def slic_segment(image, n_segments: int = 40, compactness: float = 10.0, iters: int = 10,
                 intensity_scale: float = 100.0) -> SuperpixelMap:
    """SLIC superpixels on a single-channel image.

    k-means over (intensity * intensity_scale, y, x) with grid-initialised
    centres; a pixel only considers centres within one grid interval ``g``
    (per axis). Distance is sqrt(d_int**2 + (compactness/g)**2 * d_xy**2).
    Afterwards every disconnected fragment of a cluster except its largest is
    merged into its largest 4-neighbouring region.
    """
    img = _as_2d(image)
    h, w = img.shape
    if n_segments < 1:
        raise ParameterError(f"n_segments must be >= 1, got {n_segments}")
    if n_segments > h * w:
        raise ParameterError(f"n_segments {n_segments} exceeds pixel count {h * w}")
    nx = max(1, min(w, int(round(np.sqrt(n_segments * w / h)))))
    ny = max(1, min(h, int(round(n_segments / nx))))
    step_y, step_x = h / ny, w / nx
    g = np.sqrt(h * w / (nx * ny))
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * step_y - 0.5, (np.arange(nx) + 0.5) * step_x - 0.5,
                         indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    vals = img * intensity_scale
    yy, xx = np.mgrid[0:h, 0:w]
    ci = vals[np.clip(np.rint(cy).astype(int), 0, h - 1), np.clip(np.rint(cx).astype(int), 0, w - 1)]
    reach_y, reach_x = max(g, step_y), max(g, step_x)
    spatial = (compactness / g) ** 2
    py, px, pv = yy.ravel().astype(np.float64), xx.ravel().astype(np.float64), vals.ravel()

    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(max(1, iters)):
        dy = py[:, None] - cy[None, :]
        dx = px[:, None] - cx[None, :]
        dist = (pv[:, None] - ci[None, :]) ** 2 + spatial * (dy * dy + dx * dx)
        outside = (np.abs(dy) > reach_y) | (np.abs(dx) > reach_x)
        windowed = np.where(outside, np.inf, dist)
        labels = np.where(np.all(outside, axis=1), dist.argmin(axis=1), windowed.argmin(axis=1))
        counts = np.bincount(labels, minlength=len(cy))
        filled = counts > 0
        safe = np.maximum(counts, 1)
        cy = np.where(filled, np.bincount(labels, py, len(cy)) / safe, cy)
        cx = np.where(filled, np.bincount(labels, px, len(cx)) / safe, cx)
        ci = np.where(filled, np.bincount(labels, pv, len(ci)) / safe, ci)
    return SuperpixelMap(_enforce_connectivity(labels.reshape(h, w)))


def _neighbour_ids(region: np.ndarray, mask: np.ndarray) -> np.ndarray:
    grown = ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(2, 1))
    return np.unique(region[grown & ~mask])


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    region = np.zeros_like(labels)
    next_id = 0
    keepers, orphans = set(), []
    for lab in np.unique(labels):
        comps, n = ndimage.label(labels == lab)
        if n == 0:
            continue
        sizes = np.bincount(comps.ravel())[1:]
        largest = int(np.argmax(sizes))
        for c in range(n):
            region[comps == c + 1] = next_id
            (keepers.add if c == largest else orphans.append)(next_id)
            next_id += 1
    sizes = np.bincount(region.ravel(), minlength=next_id)
    for orphan in sorted(orphans, key=lambda r: (sizes[r], r)):
        mask = region == orphan
        if not mask.any():
            continue
        nbrs = [int(r) for r in _neighbour_ids(region, mask) if r != orphan]
        if not nbrs:
            continue
        target = max(nbrs, key=lambda r: (sizes[r], -r))
        region[mask] = target
        sizes[target] += sizes[orphan]
        sizes[orphan] = 0
    # contiguous ids in raster order of first appearance
    _, first = np.unique(region.ravel(), return_index=True)
    order = np.unique(region.ravel())[np.argsort(first)]
    remap = np.empty(region.max() + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[region]


# ---------------------------------------------------------------- perturbation


def sample_masks(n_segments: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """(n_samples, S) 0/1 masks; row 0 is all ones (the unperturbed image)."""
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    masks = rng.integers(0, 2, size=(n_samples, n_segments), dtype=np.int64)
    masks[0] = 1
    return masks


def perturb(image, spmap: SuperpixelMap, mask, gray_value: float) -> np.ndarray:
    """Copy of ``image`` with every segment whose mask entry is 0 set to ``gray_value``."""
    mask = np.asarray(mask)
    if mask.shape != (spmap.n_segments,):
        raise ShapeError(f"mask has shape {mask.shape}, expected ({spmap.n_segments},)")
    out = np.array(image, dtype=np.float64, copy=True)
    hidden = (mask == 0)[spmap.labels]
    if out.ndim == 3:
        out[hidden, :] = gray_value
    else:
        out[hidden] = gray_value
    return out


def kernel_weights(masks, kernel_width: float) -> np.ndarray:
    """exp(-D**2 / width**2), D = cosine distance from each mask to all-ones.

    An all-zero mask is taken to be at distance 1.
    """
    masks = np.asarray(masks, dtype=np.float64)
    on = masks.sum(axis=1)
    cos = np.sqrt(on / masks.shape[1])  # <z, 1> / (|z| |1|) for binary z
    d = 1.0 - cos
    return np.exp(-(d**2) / kernel_width**2)


def fit_surrogate(masks, predictions, kernel_width: float = 0.25, ridge: float = 1e-3) -> Explanation:
    """Kernel-weighted ridge regression of black-box scores on binary masks.

    Sample weights are normalised to sum to one, so ``ridge`` is relative to
    the total weight and duplicating the sample leaves the fit unchanged. The
    intercept is not penalised. A positive coefficient means showing the
    segment raises the positive-class score.
    """
    X = np.asarray(masks, dtype=np.float64)
    y = np.asarray(predictions, dtype=np.float64)
    n, s = X.shape
    if y.shape != (n,):
        raise ShapeError(f"{n} masks but predictions of shape {y.shape}")
    if n < s + 1:
        warnings.warn(f"only {n} samples for {s} segments; the surrogate is underdetermined", stacklevel=2)
    pi = kernel_weights(X, kernel_width)
    wts = pi / pi.sum()
    x_bar = wts @ X
    y_bar = wts @ y
    Xc, yc = X - x_bar, y - y_bar
    gram = Xc.T @ (Xc * wts[:, None])
    rhs = Xc.T @ (wts * yc)
    if ridge == 0.0 and np.linalg.matrix_rank(gram) < s:
        raise SingularSystemError("normal equations are singular; use a ridge penalty > 0")
    try:
        coef = np.linalg.solve(gram + ridge * np.eye(s), rhs)
    except np.linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use a ridge penalty > 0") from None
    intercept = float(y_bar - x_bar @ coef)
    resid = y - (X @ coef + intercept)
    ss_res = float(wts @ resid**2)
    ss_tot = float(wts @ yc**2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= NEGLIGIBLE else 0.0)
    return Explanation(coef, intercept, r2, n, kernel_width)


Predictor = Callable[[np.ndarray], np.ndarray]


def explain_instance(predictor: Predictor, image, cfg: ExplainConfig = ExplainConfig(),
                     seed: int = 0) -> tuple[Explanation, SuperpixelMap]:
    """Explain ``predictor`` (batch (N, H, W, 1) -> positive-class scores (N,))
    at ``image``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    spmap = slic_segment(img, cfg.n_segments, cfg.compactness, cfg.iters, cfg.intensity_scale)
    rng = np.random.default_rng([seed, 31])
    masks = sample_masks(spmap.n_segments, cfg.n_samples, rng)
    gray = float(img.mean()) if cfg.gray_value is None else float(cfg.gray_value)
    preds = np.empty(len(masks))
    for start in range(0, len(masks), cfg.batch_size):
        chunk = masks[start : start + cfg.batch_size]
        batch = np.stack([perturb(img, spmap, m, gray) for m in chunk])
        preds[start : start + len(chunk)] = np.asarray(predictor(batch), dtype=np.float64).reshape(-1)
    expl = fit_surrogate(masks, preds, cfg.kernel_width, cfg.ridge)
    expl.base_prediction = float(preds[0])
    expl.masks, expl.predictions = masks, preds
    return expl, spmap


# ---------------------------------------------------------------- rendering

NEG_RGB = np.array([215, 25, 28], dtype=np.float64)   # asymptomatic-leaning
POS_RGB = np.array([26, 150, 65], dtype=np.float64)   # symptomatic-leaning
NEUTRAL_RGB = np.array([255, 255, 255], dtype=np.float64)


def top_segments(explanation: Explanation, top_k: int = 2) -> list[int]:
    """Up to ``top_k`` segment ids by |coefficient|, skipping negligible ones."""
    coef = explanation.coefficients
    return [int(s) for s in explanation.ranking()[:top_k] if abs(coef[s]) >= NEGLIGIBLE]


def signed_colors(values: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to a red-white-green ramp."""
    v = np.clip(values, -1.0, 1.0)[..., None]
    rgb = np.where(v < 0, NEUTRAL_RGB + (-v) * (NEG_RGB - NEUTRAL_RGB), NEUTRAL_RGB + v * (POS_RGB - NEUTRAL_RGB))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def segment_border(labels: np.ndarray, segment: int) -> np.ndarray:
    mask = labels == segment
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask & ~inner


def render_heatmap(image, spmap: SuperpixelMap, explanation: Explanation,
                   top_k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Signed per-segment heatmap and an overlay marking the ``top_k`` most
    influential segments (tinted, with solid borders) in the sign colour.

    Both are (H, W, 3) uint8.
    """
    img = _as_2d(image)
    if img.shape != spmap.labels.shape:
        raise ShapeError(f"image {img.shape} and segment map {spmap.labels.shape} differ")
    if top_k > spmap.n_segments:
        raise ParameterError(f"top_k {top_k} exceeds {spmap.n_segments} segments")
    coef = explanation.coefficients
    scale = np.max(np.abs(coef)) if coef.size else 0.0
    norm = coef / scale if scale >= NEGLIGIBLE else np.zeros_like(coef)
    heatmap = signed_colors(norm[spmap.labels])

    gray = np.clip(np.rint(img * 255), 0, 255)
    overlay = np.repeat(gray[..., None], 3, axis=2)
    for s in top_segments(explanation, top_k):
        color = POS_RGB if coef[s] > 0 else NEG_RGB
        inside = spmap.labels == s
        overlay[inside] = 0.6 * overlay[inside] + 0.4 * color
        overlay[segment_border(spmap.labels, s)] = color
    return heatmap, np.clip(np.rint(overlay), 0, 255).astype(np.uint8)
